"""Independent numerical oracles used by the ``oracle`` command and the test-suite.

Each suite returns a list of :class:`Check` records; a suite passes when every
check does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import linops as lo
from . import metrics as mt
from . import problems as pb


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: value={self.value:.3e} tol={self.tol:.1e}"


def _le(name: str, value: float, tol: float) -> Check:
    return Check(name, float(value), tol, bool(value <= tol))


# --- random composites --------------------------------------------------------------

def _ops(rng: np.random.Generator) -> dict[str, Callable]:
    """Primitive-exercising transforms of an 8-vector ``v`` (``x`` is the original input)."""
    perm = rng.permutation(8)
    A = rng.standard_normal((8, 8)) / math.sqrt(8)
    M = rng.standard_normal((4, 4)) / 2.0
    C = rng.standard_normal((3, 8))
    zeta = rng.standard_normal(8)
    c = float(rng.uniform(0.5, 1.5))
    grid = lambda v: ad.reshape(v, (2, 4))  # noqa: E731
    flat = lambda v: ad.reshape(v, (8,))  # noqa: E731
    return {
        "add": lambda v, x: ad.add(v, ad.getitem(x, perm)),
        "sub": lambda v, x: ad.sub(v, ad.scale(ad.getitem(x, perm), c)),
        "mul": lambda v, x: ad.mul(v, ad.getitem(v, perm)),
        "div": lambda v, x: ad.div(v, ad.add(2.0, ad.mul(v, v))),
        "neg": lambda v, x: ad.neg(v),
        "scale": lambda v, x: ad.scale(v, c),
        "transpose": lambda v, x: flat(ad.transpose(grid(v))),
        "matmul": lambda v, x: flat(ad.matmul(grid(v), M)),
        "matvec": lambda v, x: ad.matvec(A, v),
        "concat": lambda v, x: ad.concat([ad.getitem(v, slice(4, 8)), ad.getitem(v, slice(0, 4))]),
        "stack": lambda v, x: flat(ad.stack([ad.getitem(v, slice(0, 4)), ad.getitem(x, slice(4, 8))])),
        "sum": lambda v, x: ad.add(v, ad.scale(ad.sum(v), 0.1)),
        "mean": lambda v, x: ad.sub(v, ad.mean(v)),
        "exp": lambda v, x: ad.exp(ad.tanh(v)),
        "log": lambda v, x: ad.log(ad.add(1.0, ad.mul(v, v))),
        "sqrt": lambda v, x: ad.sqrt(ad.add(1.0, ad.mul(v, v))),
        "power": lambda v, x: ad.power(ad.add(1.5, ad.tanh(v)), 1.7),
        "sigmoid": lambda v, x: ad.sigmoid(ad.scale(v, 2.0)),
        "tanh": lambda v, x: ad.tanh(v),
        "leaky_relu": lambda v, x: ad.leaky_relu(v, 0.2),
        "absolute": lambda v, x: ad.absolute(v),
        "clip": lambda v, x: ad.clip(v, -0.8, 0.8),
        "soft_threshold": lambda v, x: ad.soft_threshold(v, ad.scale(ad.exp(ad.getitem(x, 0)), 0.2)),
        "l1_sum": lambda v, x: ad.mul(v, ad.scale(ad.l1_sum(v), 0.125)),
        "sq_l2_sum": lambda v, x: ad.div(v, ad.add(1.0, ad.sq_l2_sum(v))),
        "gaussian_reparam": lambda v, x: ad.gaussian_reparam(v, ad.sigmoid(ad.getitem(x, perm)), zeta),
        "fourier_filter": lambda v, x: flat(ad.fourier_filter(grid(v), ad.add(1.0, ad.sigmoid(grid(x))))),
        "flip2": lambda v, x: flat(ad.flip2(grid(v))),
        "broadcast_sum_to": lambda v, x: flat(ad.sum_to(ad.mul(ad.broadcast_to(v, (3, 8)), C), (1, 8))),
    }


PRIMITIVE_OPS = tuple(_ops(np.random.default_rng(0)))


def random_composite(index: int, rng: np.random.Generator, n_ops: int = 5):
    """Composite scalar function of an 8-vector; composites cycle through every primitive op."""
    table = _ops(rng)
    names = [PRIMITIVE_OPS[(index * n_ops + j) % len(PRIMITIVE_OPS)] for j in range(n_ops)]
    names += list(rng.choice(PRIMITIVE_OPS, size=2))
    weights = rng.standard_normal(8)

    def f(x: ad.Node) -> ad.Node:
        v = x
        for name in names:
            v = table[name](v, x)
        return ad.add(ad.sum(ad.mul(v, weights)), ad.scale(ad.sq_l2_sum(v), 0.05))

    return f, names


def autodiff_composite_errors(seed: int, n: int = 50, h: float = 1e-6) -> list[tuple[list[str], float]]:
    """Finite-difference errors of ``n`` random composites at inputs at least 100 h from any kink."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        f, names = random_composite(i, rng)
        for _ in range(1000):
            x = rng.uniform(-1.5, 1.5, size=8)
            with ad.track_kinks() as log:
                f(ad.param(x))
            if not log or min(log) > 100 * h:
                break
        else:
            raise RuntimeError(f"could not find a smooth point for composite {i}")
        out.append((names, ad.finite_diff_check(f, x, h)))
    return out


# --- suites ------------------------------------------------------------------------------

def suite_autodiff(seed: int) -> list[Check]:
    checks = []
    errs = autodiff_composite_errors(seed)
    checks.append(_le("50 random composites, max relative FD error", max(e for _, e in errs), 1e-6))
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal(8)
    checks.append(_le("sq_l2_sum gradient", ad.finite_diff_check(ad.sq_l2_sum, x), 1e-9))
    A = rng.standard_normal((8, 8))
    checks.append(_le("sigmoid(matvec) chain", ad.finite_diff_check(lambda v: ad.sum(ad.sigmoid(ad.matvec(A, v))), x),
                      1e-6))

    def gp_like(v):
        inner = ad.param(rng_x)
        (g,) = ad.grad(ad.sum(ad.tanh(ad.mul(inner, v))), [inner], create_graph=True)
        return ad.sq_l2_sum(g)

    rng_x = rng.standard_normal(8)
    checks.append(_le("double backward (gradient-norm penalty)", ad.finite_diff_check(gp_like, x), 1e-6))
    return checks


def suite_conditional(seed: int, n16: int = 100_000, n4: int = 200_000) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    # 16 x 16 circulant: per-pixel mean and variance
    op = lo.Circulant2D(rng.random((5, 5)), (16, 16))
    lik = lo.GaussianLikelihood(op, 0.2)
    y = op.apply(rng.random((16, 16))) + 0.2 * rng.standard_normal((16, 16))
    m, rho = rng.random((16, 16)), 0.3
    mean = lo.prox_gaussian_nll(lik, y, rho ** 2, m)
    var = float(np.mean(1.0 / lo.conditional_precision_eigs(lik, rho)))
    s1 = np.zeros((16, 16))
    s2 = np.zeros((16, 16))
    for _ in range(n16 // 10_000):
        d = lo.sample_gaussian_conditional(lik, y, rho, np.broadcast_to(m, (10_000, 16, 16)), rng) - mean
        s1 += d.sum(axis=0)
        s2 += (d * d).sum(axis=0)
    emp_mean = s1 / n16
    emp_var = s2 / n16 - emp_mean ** 2
    checks.append(_le("16x16 mean error in standard errors (max)", np.max(np.abs(emp_mean) / math.sqrt(var / n16)), 4.0))
    checks.append(_le("16x16 relative variance error (max)", np.max(np.abs(emp_var / var - 1.0)), 0.02))
    # 4 x 4 circulant: full covariance against a dense inverse
    op4 = lo.Circulant2D(rng.random((3, 3)), (4, 4))
    lik4 = lo.GaussianLikelihood(op4, 0.5)
    A = op4.to_dense()
    cov = np.linalg.inv(A.T @ A / lik4.variance + np.eye(16) / rho ** 2)
    y4 = rng.standard_normal((4, 4))
    draws = lo.sample_gaussian_conditional(lik4, y4, rho, np.zeros((n4, 4, 4)), rng).reshape(n4, 16)
    emp = np.cov(draws, rowvar=False)
    se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n4)
    checks.append(_le("4x4 covariance error in standard errors (max)", np.max(np.abs(emp - cov) / se), 5.0))
    checks.append(_le("prox stationarity, 100 random cases (max relative residual)", prox_residuals(seed, 100).max(),
                      1e-8))
    return checks


def prox_residuals(seed: int, n: int) -> np.ndarray:
    """Relative stationarity residuals of prox_gaussian_nll over random circulant/mask/identity cases."""
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    for i in range(n):
        kind = i % 3
        H, W = int(rng.integers(4, 17)), int(rng.integers(4, 17))
        if kind == 0:
            kh, kw = int(rng.integers(1, min(H, 7) + 1)), int(rng.integers(1, min(W, 7) + 1))
            op = lo.Circulant2D(rng.random((kh, kw)), (H, W))
        elif kind == 1:
            op = lo.FourierMask((rng.random((H, W)) < 0.5) * rng.uniform(0.5, 2.0, (H, W)))
        else:
            op = lo.Identity((H, W))
        sigma = float(rng.uniform(0.05, 2.0))
        lik = lo.GaussianLikelihood(op, sigma)
        gamma = float(10 ** rng.uniform(-3, 2))
        v = rng.standard_normal(op.in_shape)
        y = rng.standard_normal(op.out_shape)
        x = lo.prox_gaussian_nll(lik, y, gamma, v)
        c = gamma / lik.variance
        resid = x + c * op.adjoint(op.apply(x)) - v - c * op.adjoint(y)
        out[i] = np.linalg.norm(resid) / np.linalg.norm(v)
    return out


def suite_quadrature(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    mean0, cov0 = np.array([0.2, -0.4]), np.array([[1.0, 0.3], [0.3, 0.5]])
    prob = pb.ToyProblem(pb.GaussianPrior(mean0, cov0), lo.Identity(2), 0.7, grid_points=161)
    y = rng.standard_normal(2)
    post = pb.toy_posterior_quadrature(prob, y)
    P = np.linalg.inv(cov0) + np.eye(2) / 0.49
    exact = np.linalg.solve(P, np.linalg.solve(cov0, mean0) + y / 0.49)
    checks.append(_le("Gaussian prior: grid vs conjugate posterior mean", np.max(np.abs(post.mean - exact)), 1e-6))
    steps = [ax[1] - ax[0] for ax in post.grid]
    w = np.outer(*[np.r_[0.5, np.ones(len(ax) - 2), 0.5] for ax in post.grid])
    checks.append(_le("grid density integrates to one", abs((post.density * w).sum() * np.prod(steps) - 1.0), 1e-8))
    mix = pb.GaussianMixturePrior([0.5, 0.5], [[1.0, -1.0], [-1.0, 1.0]], [np.eye(2) * 0.3, np.eye(2) * 0.3])
    sym = pb.ToyProblem(mix, lo.Identity(2), 0.5)
    checks.append(_le("symmetric mixture, y = 0: posterior mean", np.max(np.abs(pb.toy_posterior_quadrature(
        sym, np.zeros(2)).mean)), 1e-12))
    grid_mix = pb._x_grid_posterior(sym, np.array([0.3, 0.1]), 201)
    cf = pb.toy_posterior_quadrature(sym, np.array([0.3, 0.1]))
    checks.append(_le("mixture: grid vs closed-form mean", np.max(np.abs(grid_mix.mean - cf.mean)), 1e-6))
    W = np.array([[2.0, -1.0], [0.5, 1.5]])
    lat = pb.ToyProblem(pb.LatentLaplaceToyPrior(W, 1.0, 0.3), lo.Identity(2), 0.3)
    try:
        pb.toy_posterior_quadrature(lat, np.array([0.4, 0.8]))
        checks.append(Check("latent-Laplace grid refinement", 0.0, 1e-6, True))
    except pb.GridTooCoarseError as exc:
        checks.append(Check(f"latent-Laplace grid refinement ({exc})", 1.0, 1e-6, False))
    return checks


def brute_force_w2(a: np.ndarray, b: np.ndarray) -> float:
    """Equal-weight 1D W2 by explicit optimal assignment."""
    cost = (a[:, None] - b[None, :]) ** 2
    r, c = linear_sum_assignment(cost)
    return math.sqrt(cost[r, c].mean())


def suite_metrics(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    a = rng.standard_normal((64, 2))
    b = rng.standard_normal((64, 2)) * 1.5 + 0.3
    dirs = mt.random_directions(2, 20, rng)
    worst = max(abs(mt.projected_w2(a, b, d) - brute_force_w2(a @ d, b @ d)) for d in dirs)
    checks.append(_le("SW per-projection vs brute-force assignment", worst, 1e-12))
    sw = mt.sliced_wasserstein(a, b, directions=dirs)
    ref = np.mean([brute_force_w2(a @ d, b @ d) for d in dirs])
    checks.append(_le("SW mean over projections", abs(sw - ref), 1e-12))
    m1, m2 = rng.standard_normal(4), rng.standard_normal(4)
    c1, c2 = rng.uniform(0.1, 2.0, 4), rng.uniform(0.1, 2.0, 4)
    fd = mt.frechet_gaussian(mt.GaussianSummary(m1, np.diag(c1)), mt.GaussianSummary(m2, np.diag(c2)))
    closed = np.sum((m1 - m2) ** 2) + np.sum((np.sqrt(c1) - np.sqrt(c2)) ** 2)
    checks.append(_le("Frechet vs diagonal closed form", abs(fd - closed), 1e-10))
    one = mt.frechet_gaussian(mt.GaussianSummary([0.0], [[1.0]]), mt.GaussianSummary([1.0], [[1.0]]))
    checks.append(Check("Frechet N(0,1) vs N(1,1) equals 1.0", one, 0.0, one == 1.0))
    sampler = lambda n, r: r.standard_normal((n, 2))  # noqa: E731
    small = mt.sw_bias_baseline(sampler, 200, 50, 20, np.random.default_rng(seed))
    large = mt.sw_bias_baseline(sampler, 400, 50, 20, np.random.default_rng(seed))
    checks.append(Check("SW baseline positive", small[0], 0.0, small[0] > 0))
    checks.append(Check("SW baseline shrinks when n doubles", large[0] - small[0], 0.0, large[0] < small[0]))
    return checks


SUITES = {
    "autodiff": suite_autodiff,
    "conditional": suite_conditional,
    "quadrature": suite_quadrature,
    "metrics": suite_metrics,
}


def run_suite(name: str, seed: int) -> list[Check]:
    if name not in SUITES:
        raise KeyError(f"unknown oracle suite {name!r}; choose from {', '.join(SUITES)}")
    return SUITES[name](seed)

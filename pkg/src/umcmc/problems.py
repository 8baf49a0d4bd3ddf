"""Datasets, synthetic forward models and low-dimensional toy problems with exact posteriors."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .kernels import Observation
from .linops import GaussianLikelihood, LinearOperator
from .priors import smoothed_laplace_logpdf

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    pass


class GridTooCoarseError(RuntimeError):
    pass


# --- IDX files --------------------------------------------------------------------

@dataclass
class ImageDataset:
    images: np.ndarray  # (N, H, W) in [0, 1]
    labels: np.ndarray | None = None
    split: str = "train"

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - head} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx_images(path, pad: int = 2, split: str = "train") -> ImageDataset:
    """uint8 IDX image tensor scaled to [0, 1] with ``pad`` zero pixels on every side."""
    if pad < 0:
        raise ValueError("pad must be nonnegative")
    data = _read_idx(path, IDX_IMAGES).astype(np.float64) / 255.0
    if pad:
        data = np.pad(data, ((0, 0), (pad, pad), (pad, pad)))
    return ImageDataset(data, split=split)


def load_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 images (N, H, W) in IDX format."""
    arr = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES))
        fh.write(struct.pack(">3I", *arr.shape))
        fh.write(arr.tobytes())


# --- blur kernels -----------------------------------------------------------------

def matern32_cov(t: np.ndarray, length_scale: float, std: float) -> np.ndarray:
    r = np.abs(t[:, None] - t[None, :]) * (math.sqrt(3.0) / length_scale)
    return std ** 2 * (1.0 + r) * np.exp(-r)


def sample_motion_blur_kernel(size: int, length_scale: float, gp_std: float, rng: np.random.Generator,
                              n_points: int = 256) -> np.ndarray:
    """Rasterise a Matérn-3/2 Gaussian-process trajectory into a unit-sum ``size`` x ``size`` kernel.

    Trajectory coordinates are in half-kernel-widths, centred at their mean.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be odd")
    if not (length_scale > 0 and gp_std >= 0):
        raise ValueError("length_scale must be positive and gp_std nonnegative")
    t = np.linspace(0.0, 1.0, n_points)
    cov = matern32_cov(t, length_scale, 1.0) + 1e-10 * np.eye(n_points)
    chol = np.linalg.cholesky(cov)
    path = gp_std * (chol @ rng.standard_normal((n_points, 2)))
    c = (size - 1) / 2.0
    pts = np.clip(c + (path - path.mean(axis=0)) * (size / 2.0), 0.0, size - 1.0)
    kernel = np.zeros((size, size))
    i0 = np.minimum(np.floor(pts).astype(int), size - 1)
    frac = pts - i0
    i1 = np.minimum(i0 + 1, size - 1)
    for di, wi in ((i0[:, 0], 1 - frac[:, 0]), (i1[:, 0], frac[:, 0])):
        for dj, wj in ((i0[:, 1], 1 - frac[:, 1]), (i1[:, 1], frac[:, 1])):
            np.add.at(kernel, (di, dj), wi * wj)
    return kernel / kernel.sum()


# --- Fourier masks ------------------------------------------------------------------

@dataclass(frozen=True)
class TrackParams:
    disk_radius: float = 2.0
    min_axis: float = 0.1  # fractions of the image extent
    max_axis: float = 0.45
    min_arc: float = math.pi / 3
    max_arc: float = math.pi


def sample_fourier_mask(shape: tuple, n_tracks: int, track_params: TrackParams | None = None,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Binary Hermitian-symmetric sampling mask: a low-frequency disk plus elliptical arcs.

    Tracks are drawn one after another from ``rng``, so with the same seed the
    mask for ``n`` tracks is contained in the mask for ``n + 1``.
    """
    if n_tracks < 1:
        raise ValueError("need at least one track")
    tp = track_params or TrackParams()
    H, W = shape
    fu = np.fft.fftfreq(H) * H
    fv = np.fft.fftfreq(W) * W
    mask = (fu[:, None] ** 2 + fv[None, :] ** 2 <= tp.disk_radius ** 2)
    n = min(H, W)
    for _ in range(n_tracks):
        a, ratio, theta, start, span = rng.random(5)
        a = (tp.min_axis + a * (tp.max_axis - tp.min_axis)) * n
        b = a * (0.2 + 0.8 * ratio)
        theta *= math.pi
        start *= 2 * math.pi
        span = tp.min_arc + span * (tp.max_arc - tp.min_arc)
        phi = start + np.linspace(0.0, span, int(8 * a) + 16)
        u = a * np.cos(phi) * math.cos(theta) - b * np.sin(phi) * math.sin(theta)
        v = a * np.cos(phi) * math.sin(theta) + b * np.sin(phi) * math.cos(theta)
        mask[np.rint(u).astype(int) % H, np.rint(v).astype(int) % W] = True
    mirrored = np.roll(mask[::-1, ::-1], (1, 1), axis=(0, 1))
    return (mask | mirrored).astype(np.float64)


# --- observations -------------------------------------------------------------------

def make_observation(x: np.ndarray, operator: LinearOperator, sigma: float, rng: np.random.Generator) -> Observation:
    """y = A x + noise; circular complex noise with variance sigma^2 for complex operators."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    ax = operator.apply(x)
    std = sigma / math.sqrt(2.0) if operator.is_complex else sigma
    return Observation(ax + std * rng.standard_normal(ax.shape), GaussianLikelihood(operator, sigma))


# --- toy priors -----------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        d = x - self.mean
        sol = np.linalg.solve(self.cov, d.reshape(-1, self.dim).T).T.reshape(d.shape)
        _, logdet = np.linalg.slogdet(self.cov)
        return -0.5 * np.sum(d * sol, axis=-1) - 0.5 * logdet - 0.5 * self.dim * math.log(2 * math.pi)

    def sample(self, n: int, rng) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=n)

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


@dataclass(frozen=True)
class GaussianMixturePrior:
    weights: np.ndarray
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=np.float64)))
        object.__setattr__(self, "covs", np.asarray(self.covs, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chols = np.linalg.cholesky(self.covs)
        return self.means[comp] + np.einsum("nij,nj->ni", chols[comp], z)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        parts = [math.log(w) + GaussianPrior(m, C).logpdf(x) for w, m, C in zip(self.weights, self.means, self.covs)]
        return np.logaddexp.reduce(np.stack(parts), axis=0)

    def marginal_sd(self) -> np.ndarray:
        m = self.weights @ self.means
        second = np.einsum("k,kii->i", self.weights, self.covs) + self.weights @ self.means ** 2
        return np.sqrt(second - m ** 2)


@dataclass(frozen=True)
class LatentLaplaceToyPrior:
    """x | z ~ N(Sig(W z), rho^2 I) with z having density proportional to exp(-Huber_lam(z))."""

    W: np.ndarray
    lam: float
    rho: float

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def d_z(self) -> int:
        return self.W.shape[1]

    def sample_z(self, n: int, rng) -> np.ndarray:
        # rejection from a unit Laplace envelope: exp(-H(z)) <= exp(lam/2 - |z|)
        out = np.empty((0, self.d_z))
        while out.shape[0] < n:
            prop = rng.laplace(size=(2 * n, self.d_z))
            logacc = smoothed_laplace_logpdf(prop, self.lam) - np.sum(self.lam / 2 - np.abs(prop), axis=1)
            keep = np.log(rng.random(2 * n)) < logacc
            out = np.vstack([out, prop[keep]])
        return out[:n]

    def sample(self, n: int, rng) -> np.ndarray:
        z = self.sample_z(n, rng)
        return 1.0 / (1.0 + np.exp(-z @ self.W.T)) + self.rho * rng.standard_normal((n, self.dim))


# --- toy problems and oracles ----------------------------------------------------------

@dataclass
class ToyProblem:
    prior: GaussianPrior | GaussianMixturePrior | LatentLaplaceToyPrior
    operator: LinearOperator
    sigma_y: float
    grid_points: int = 201
    grid_width_sd: float = 8.0

    def __post_init__(self):
        if self.prior.dim > 4:
            raise ValueError("toy problems are limited to dimension 4")

    @property
    def likelihood(self) -> GaussianLikelihood:
        return GaussianLikelihood(self.operator, self.sigma_y)

    @property
    def dense(self) -> np.ndarray:
        return self.operator.to_dense()

    def sample_joint(self, n: int, rng) -> tuple[np.ndarray, list[Observation]]:
        xs = self.prior.sample(n, rng)
        obs = [make_observation(x.reshape(self.operator.in_shape), self.operator, self.sigma_y, rng) for x in xs]
        return xs, obs


@dataclass
class ToyPosterior:
    """Exact (closed-form or gridded) posterior for one observation."""

    mean: np.ndarray
    normalizer: float
    sampler: object = field(repr=False)
    grid: tuple | None = None
    density: np.ndarray | None = None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sampler(n, rng)


def _trapezoid_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


def _grid_sampler(axes: list[np.ndarray], probs: np.ndarray):
    """Inverse-CDF draw of a grid node, jittered uniformly within its cell."""
    cdf = np.cumsum(probs.ravel())
    cdf /= cdf[-1]
    steps = np.array([ax[1] - ax[0] for ax in axes])
    grids = np.meshgrid(*axes, indexing="ij")
    flat = np.stack([g.ravel() for g in grids], axis=1)

    def draw(n, rng):
        idx = np.searchsorted(cdf, rng.random(n), side="right")
        idx = np.minimum(idx, cdf.size - 1)
        return flat[idx] + (rng.random((n, len(axes))) - 0.5) * steps

    return draw


def _gaussian_logpdf_rows(r: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    sol = sla.solve_triangular(chol, r.T, lower=True)
    logdet = 2 * np.sum(np.log(np.diag(chol)))
    return -0.5 * np.sum(sol * sol, axis=0) - 0.5 * logdet - 0.5 * cov.shape[0] * math.log(2 * math.pi)


def _mixture_posterior(problem: ToyProblem, y: np.ndarray) -> ToyPosterior:
    pr = problem.prior
    A = problem.dense
    var = problem.likelihood.variance
    yv = y.reshape(-1)
    post_means, post_covs, logw = [], [], []
    for w, m, C in zip(pr.weights, pr.means, pr.covs):
        S = A @ C @ A.T + var * np.eye(A.shape[0])
        gain = C @ A.T @ np.linalg.inv(S)
        post_means.append(m + gain @ (yv - A @ m))
        Cp = C - gain @ A @ C
        post_covs.append(0.5 * (Cp + Cp.T))
        logw.append(math.log(w) + _gaussian_logpdf_rows((yv - A @ m)[None], S)[0])
    logw = np.array(logw)
    logZ = np.logaddexp.reduce(logw)
    weights = np.exp(logw - logZ)
    post_means = np.array(post_means)
    post_covs = np.array(post_covs)
    chols = np.linalg.cholesky(post_covs)

    def draw(n, rng):
        comp = rng.choice(len(weights), size=n, p=weights)
        z = rng.standard_normal((n, pr.dim))
        return post_means[comp] + np.einsum("nij,nj->ni", chols[comp], z)

    return ToyPosterior(weights @ post_means, float(math.exp(logZ)), draw)


def _x_grid_posterior(problem: ToyProblem, y: np.ndarray, n: int) -> ToyPosterior:
    pr = problem.prior
    A = problem.dense
    var = problem.likelihood.variance
    centre = pr.mean if isinstance(pr, GaussianPrior) else pr.weights @ pr.means
    sd = pr.marginal_sd()
    axes = [np.linspace(c - problem.grid_width_sd * s, c + problem.grid_width_sd * s, n) for c, s in zip(centre, sd)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    logp = (pr.logpdf(pts) - np.sum((pts @ A.T - y.reshape(-1)) ** 2, axis=1) / (2 * var)
            - 0.5 * A.shape[0] * math.log(2 * math.pi * var))
    shift = logp.max()
    f = np.exp(logp - shift).reshape(grids[0].shape)
    w = _trapezoid_weights(n)
    weights = f.copy()
    for ax in range(len(axes)):
        shape = [1] * len(axes)
        shape[ax] = n
        weights = weights * w.reshape(shape)
    cell = np.prod([ax[1] - ax[0] for ax in axes])
    Z = weights.sum() * cell
    mean = np.array([(weights * g).sum() * cell / Z for g in grids])
    sampler = _grid_sampler(axes, weights) if len(axes) <= 2 else None
    return ToyPosterior(mean, float(Z * math.exp(shift)), sampler, tuple(axes), f / (Z))


def _latent_grid(problem: ToyProblem, y: np.ndarray, per_lam: int, tail: float = 30.0):
    """z-grid quantities; nodes include +-lam so the Huber kink falls on panel edges."""
    pr = problem.prior
    A = problem.dense
    var = problem.likelihood.variance
    h = pr.lam / per_lam
    J = int(math.ceil(tail / h))
    ax = np.arange(-J, J + 1) * h
    axes = [ax] * pr.d_z
    grids = np.meshgrid(*axes, indexing="ij")
    zs = np.stack([g.ravel() for g in grids], axis=1)
    S = var * np.eye(A.shape[0]) + pr.rho ** 2 * (A @ A.T)
    out = np.empty(zs.shape[0])
    chunk = 200_000
    for s in range(0, zs.shape[0], chunk):
        zc = zs[s:s + chunk]
        sig = 1.0 / (1.0 + np.exp(-zc @ pr.W.T))
        out[s:s + chunk] = (smoothed_laplace_logpdf(zc, pr.lam)
                            + _gaussian_logpdf_rows(y.reshape(1, -1) - sig @ A.T, S))
    shift = out.max()
    f = np.exp(out - shift).reshape(grids[0].shape)
    w = _trapezoid_weights(ax.size)
    weights = f
    for d in range(pr.d_z):
        shape = [1] * pr.d_z
        shape[d] = ax.size
        weights = weights * w.reshape(shape)
    Z = weights.sum() * h ** pr.d_z
    return axes, zs, weights, Z, shift


def _latent_posterior(problem: ToyProblem, y: np.ndarray, per_lam: int, check: bool) -> ToyPosterior:
    pr = problem.prior
    if pr.d_z > 2:
        raise ValueError("latent grid posterior supports d_z <= 2")
    axes, zs, weights, Z, shift = _latent_grid(problem, y, per_lam)
    if check:
        _, _, _, Z2, shift2 = _latent_grid(problem, y, 2 * per_lam)
        drift = abs(Z2 * math.exp(shift2 - shift) - Z) / Z
        if drift > 1e-6:
            raise GridTooCoarseError(f"normalisation changed by {drift:.2e} on refinement")
    A = problem.dense
    var = problem.likelihood.variance
    prec = A.T @ A / var + np.eye(pr.dim) / pr.rho ** 2
    cov = np.linalg.inv(prec)
    chol = np.linalg.cholesky(cov)
    aty = A.T @ y.reshape(-1) / var
    probs = weights.ravel() / weights.sum()
    sig = 1.0 / (1.0 + np.exp(-zs @ pr.W.T))
    cond_means = (aty + sig / pr.rho ** 2) @ cov.T
    mean = probs @ cond_means
    zdraw = _grid_sampler(axes, weights)

    def draw(n, rng):
        z = zdraw(n, rng)
        m = (aty + (1.0 / (1.0 + np.exp(-z @ pr.W.T))) / pr.rho ** 2) @ cov.T
        return m + rng.standard_normal((n, pr.dim)) @ chol.T

    return ToyPosterior(mean, float(Z * math.exp(shift)), draw, tuple(axes), weights / (Z))


def toy_posterior_quadrature(problem: ToyProblem, y, grid_points: int | None = None,
                             check_refinement: bool = True) -> ToyPosterior:
    """Exact posterior p(x | y) for a toy problem.

    Gaussian mixtures use the closed-form posterior mixture. A Gaussian prior is
    integrated on an x-grid and a latent-Laplace prior on a z-grid combined with
    the exact Gaussian x | z, y. With ``check_refinement`` the grid is halved and
    a normalisation drift above 1e-6 raises :class:`GridTooCoarseError`.
    """
    y = np.asarray(y, dtype=np.float64)
    pr = problem.prior
    if isinstance(pr, GaussianMixturePrior):
        return _mixture_posterior(problem, y)
    if isinstance(pr, LatentLaplaceToyPrior):
        return _latent_posterior(problem, y, grid_points or 20, check_refinement)
    n = grid_points or problem.grid_points
    post = _x_grid_posterior(problem, y, n)
    if check_refinement:
        fine = _x_grid_posterior(problem, y, 2 * n - 1)
        drift = abs(fine.normalizer - post.normalizer) / post.normalizer
        if drift > 1e-6:
            raise GridTooCoarseError(f"normalisation changed by {drift:.2e} on refinement")
    return post


# --- dataset builders -------------------------------------------------------------------

def gmm_toy_problem(sigma_y: float = 0.15) -> ToyProblem:
    """Two well-separated components in the unit square, observed through a 1 x 2 circular blur."""
    from .linops import Circulant2D

    prior = GaussianMixturePrior(
        weights=[0.5, 0.5],
        means=[[0.3, 0.3], [0.7, 0.7]],
        covs=[np.diag([0.01, 0.01]), np.diag([0.01, 0.01])],
    )
    op = Circulant2D(np.array([[0.75, 0.25]]), (1, 2))
    return ToyProblem(prior, op, sigma_y)


def toy_paired_data(problem: ToyProblem, n_train: int, n_val: int, rng: np.random.Generator):
    from .training import PairedData

    x_tr, ob_tr = problem.sample_joint(n_train, rng)
    x_va, ob_va = problem.sample_joint(n_val, rng)
    return PairedData(x_tr, ob_tr, x_va, ob_va)


def image_paired_data(images: np.ndarray, make_operator, sigma_y: float, n_val: int, rng: np.random.Generator):
    """Pair each image with its own operator draw and noisy observation; last ``n_val`` are validation."""
    from .training import PairedData

    obs = [make_observation(img, make_operator(rng), sigma_y, rng) for img in images]
    n_tr = len(images) - n_val
    if n_tr < 1 or n_val < 1:
        raise ValueError("need at least one training and one validation image")
    return PairedData(images[:n_tr], obs[:n_tr], images[n_tr:], obs[n_tr:])

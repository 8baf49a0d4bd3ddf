"""Markov transition kernels and the unfolded chain generator.

Chains are batched: every state carries a leading axis with one row per chain,
and images are kept flat (batch, d_x) between kernel steps. Layer 0 is the
initialisation kernel; layers 1..L are transitions, each with its own
hyperparameters. For SGS the initialisation is the Dirac mass at zero, for
LATINO it is one LATINO step from the normalised back-projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .linops import GaussianLikelihood, UnsupportedOperatorError
from .priors import (AnalyticGaussian, SmallDense, VPSchedule, laplace_score_smoothed,
                     small_dense_forward)

# noise roles for the counter-based streams
ROLE_Z, ROLE_X, ROLE_DIFFUSION = 0, 1, 2
T_MIN = 1e-4


class ChainDivergenceError(FloatingPointError):
    def __init__(self, layer: int):
        super().__init__(f"chain produced non-finite values at layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class Observation:
    y: np.ndarray
    likelihood: GaussianLikelihood

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != tuple(self.likelihood.operator.out_shape):
            raise ValueError(f"observation shape {y.shape} does not match operator output "
                             f"{self.likelihood.operator.out_shape}")
        object.__setattr__(self, "y", y)

    @property
    def operator(self):
        return self.likelihood.operator


class ObservationBatch:
    """Stacked per-chain quantities needed by the kernels."""

    def __init__(self, observations: Sequence[Observation]):
        if not observations:
            raise ValueError("empty observation batch")
        ops = [o.operator for o in observations]
        self.x_shape = tuple(ops[0].in_shape)
        if any(tuple(op.in_shape) != self.x_shape for op in ops):
            raise ValueError("observations in a batch must share the image shape")
        bases = {op.basis for op in ops}
        if None in bases or len(bases) != 1:
            raise UnsupportedOperatorError("kernels need Fourier- or pixel-diagonal operators of one kind")
        self.basis = bases.pop()
        self.observations = list(observations)
        B = len(observations)
        self.batch = B
        self.d_x = int(np.prod(self.x_shape))
        spec_pad = (1,) * len(self.x_shape)
        ys = np.stack([o.y for o in observations])
        self.y_flat = ys.reshape(B, -1)
        self.var = np.array([o.likelihood.variance for o in observations])
        self.var_flat = self.var.reshape(B, 1)
        self.var_spec = self.var.reshape((B,) + spec_pad)
        if all(op is ops[0] for op in ops):
            # shared operator: one batched adjoint, broadcast spectra
            self.gram = ops[0].gram_eigs()[None]
            self.lip = np.full(B, ops[0].lipschitz())
            self.aty = ops[0].adjoint(ys).reshape(B, -1)
        else:
            self.gram = np.stack([op.gram_eigs() for op in ops])
            self.lip = np.array([op.lipschitz() for op in ops])
            self.aty = np.stack([o.operator.adjoint(o.y) for o in observations]).reshape(B, -1)
        self.lip_flat = self.lip.reshape(B, 1)
        self.lip_spec = self.lip.reshape((B,) + spec_pad)

    def __len__(self):
        return self.batch

    def spectral(self, x_flat, h) -> Node:
        """Apply the operator-diagonal multiplier ``h`` (shape (B, *x_shape)) to flat x."""
        if self.basis == "pixel":
            return ad.mul(x_flat, ad.reshape(h, (self.batch, -1)))
        field_ = ad.reshape(x_flat, (self.batch,) + self.x_shape)
        return ad.reshape(ad.fourier_filter(field_, h), (self.batch, -1))


def as_batch(obs) -> ObservationBatch:
    if isinstance(obs, ObservationBatch):
        return obs
    if isinstance(obs, Observation):
        return ObservationBatch([obs])
    return ObservationBatch(list(obs))


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser applied elementwise to a uint64 array (wrapping arithmetic)."""
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def counter_uniforms(seeds: Sequence[int], layer: int, role: int, n: int) -> np.ndarray:
    """Uniforms in (0, 1) from hashing (seed, layer, role, counter); shape (len(seeds), n)."""
    s = np.asarray(seeds, dtype=np.int64).astype(np.uint64).reshape(-1, 1)
    key = _splitmix64(_splitmix64(_splitmix64(s) ^ np.uint64(layer)) ^ np.uint64(role))
    bits = _splitmix64(key ^ _splitmix64(np.arange(n, dtype=np.uint64)).reshape(1, -1))
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def chain_noise(seeds: Sequence[int], layer: int, role: int, shape: tuple) -> np.ndarray:
    """Standard normal draws, one independent counter-based stream per (seed, layer, role).

    Streams do not depend on how chains are batched together.
    """
    n = int(np.prod(shape))
    half = (n + 1) // 2
    u = counter_uniforms(seeds, layer, role, 2 * half)
    radius = np.sqrt(-2.0 * np.log(u[:, :half]))
    angle = 2.0 * np.pi * u[:, half:]
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)], axis=1)[:, :n]
    return z.reshape((len(u),) + tuple(shape))


@dataclass
class UnfoldedModel:
    """Trainable parameters of the unfolded generator.

    SGS params: ``W`` (d_x, d_z), ``log_lam``, ``log_gamma`` (L+1,), ``log_rho`` (L+1,).
    LATINO params: ``log_gamma`` (L+1,), ``t`` (L+1,) and, for a trainable
    denoiser, ``den/W1``, ``den/b1``, ``den/W2``, ``den/b2``.
    """

    kind: str
    L: int
    L0: int
    params: dict[str, np.ndarray]
    sched: VPSchedule = field(default_factory=VPSchedule)
    denoiser: AnalyticGaussian | None = None

    def __post_init__(self):
        if self.kind not in ("sgs", "latino"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not (0 <= self.L0 <= self.L) or self.L < 0:
            raise ValueError(f"need 0 <= L0 <= L, got L={self.L}, L0={self.L0}")
        if self.params["log_gamma"].shape != (self.L + 1,):
            raise ValueError("per-layer parameters must have length L + 1")

    @classmethod
    def sgs(cls, d_x: int, d_z: int, L: int, rng: np.random.Generator, L0: int | None = None,
            gamma: float = 0.1, rho: float = 0.5, lam: float = 1.0) -> "UnfoldedModel":
        params = {
            "W": rng.standard_normal((d_x, d_z)) / math.sqrt(d_z),
            "log_lam": np.array(math.log(lam)),
            "log_gamma": np.full(L + 1, math.log(gamma)),
            "log_rho": np.full(L + 1, math.log(rho)),
        }
        return cls("sgs", L, L // 4 if L0 is None else L0, params)

    @classmethod
    def latino(cls, d_x: int, L: int, L0: int, per_layer: Sequence[dict], rng: np.random.Generator | None = None,
               denoiser: AnalyticGaussian | None = None, sched: VPSchedule | None = None,
               hidden: int = 64) -> "UnfoldedModel":
        if len(per_layer) != L + 1:
            raise ValueError("per_layer must have L + 1 entries")
        params = {
            "log_gamma": np.log([float(p["gamma"]) for p in per_layer]),
            "t": np.array([float(p["t"]) for p in per_layer]),
        }
        if denoiser is None:
            small = SmallDense.init(d_x, rng, hidden=hidden)
            params.update({f"den/{k}": v for k, v in small.params.items()})
        return cls("latino", L, L0, params, sched or VPSchedule(), denoiser)

    @property
    def per_layer(self) -> list[dict]:
        gam = np.exp(self.params["log_gamma"])
        if self.kind == "sgs":
            rho = np.exp(self.params["log_rho"])
            return [{"gamma": float(g), "rho": float(r)} for g, r in zip(gam, rho)]
        return [{"gamma": float(g), "t": float(t)} for g, t in zip(gam, self.params["t"])]

    @property
    def n_kept(self) -> int:
        return self.L - self.L0 + 1

    def bind(self, tape: ad.Tape | None = None) -> dict[str, Node]:
        if tape is None:
            return {k: ad.const(v) for k, v in self.params.items()}
        return tape.bind(self.params)

    def copy(self) -> "UnfoldedModel":
        return UnfoldedModel(self.kind, self.L, self.L0, {k: v.copy() for k, v in self.params.items()},
                             self.sched, self.denoiser)


@dataclass
class ChainTrace:
    """Retained samples x_{L0..L} (each (batch, d_x)) and their ergodic mean."""

    samples: list[Node]
    ergodic_mean: Node
    z: Node | None
    seeds: np.ndarray
    x_shape: tuple

    def sample_array(self) -> np.ndarray:
        """Retained samples as (n_kept, batch, *x_shape)."""
        return np.stack([s.value for s in self.samples]).reshape(
            (len(self.samples), -1) + self.x_shape)

    def final(self) -> Node:
        return self.samples[-1]


def _check_finite(layer: int, *nodes: Node) -> None:
    for n in nodes:
        if not np.all(np.isfinite(n.value)):
            raise ChainDivergenceError(layer)


def sgs_z_update(p: dict[str, Node], x: Node, z: Node, layer: int, zeta_z) -> Node:
    """One Langevin step on z targeting p(z | x) with the layer's (gamma, rho)."""
    W = p["W"]
    gamma = ad.exp(p["log_gamma"][layer])
    rho = ad.exp(p["log_rho"][layer])
    lam = ad.exp(p["log_lam"])
    s = ad.sigmoid(ad.matvec(W, z))
    weighted = ad.div(ad.mul(ad.mul(s, ad.sub(1.0, s)), ad.sub(x, s)), ad.mul(rho, rho))
    drift = ad.add(ad.matmul(weighted, W), laplace_score_smoothed(z, lam))
    return ad.gaussian_reparam(ad.add(z, ad.mul(gamma, drift)), ad.sqrt(ad.scale(gamma, 2.0)), zeta_z)


def sgs_x_update(p: dict[str, Node], z: Node, ob: ObservationBatch, layer: int, zeta_x) -> Node:
    """Exact draw of x | y, z from N(prox mean, (A^T A / var + rho^-2)^-1)."""
    rho = ad.exp(p["log_rho"][layer])
    rho2 = ad.mul(rho, rho)
    m = ad.sigmoid(ad.matvec(p["W"], z))
    c_flat = ad.div(rho2, ob.var_flat)
    c_spec = ad.div(rho2, ob.var_spec)
    mean = ob.spectral(ad.add(m, ad.mul(c_flat, ob.aty)), ad.div(1.0, ad.add(1.0, ad.mul(c_spec, ob.gram))))
    prec = ad.add(ad.div(ob.gram, ob.var_spec), ad.div(1.0, rho2))
    noise = ob.spectral(np.asarray(zeta_x).reshape(ob.batch, -1), ad.power(prec, -0.5))
    return ad.add(mean, noise)


def sgs_step(p: dict[str, Node], state: tuple[Node, Node], obs, layer: int, seeds: Sequence[int],
             noise: tuple | None = None) -> tuple[Node, Node]:
    """(x_l, z_l) -> (x_{l+1}, z_{l+1}) using the hyperparameters of ``layer``."""
    ob = as_batch(obs)
    if not 0 <= layer < p["log_gamma"].shape[0]:
        raise IndexError(f"layer {layer} out of range")
    x, z = state
    d_z = p["W"].shape[1]
    if noise is None:
        noise = (chain_noise(seeds, layer, ROLE_Z, (d_z,)), chain_noise(seeds, layer, ROLE_X, (ob.d_x,)))
    z_new = sgs_z_update(p, ad._wrap(x), ad._wrap(z), layer, noise[0])
    x_new = sgs_x_update(p, z_new, ob, layer, noise[1])
    _check_finite(layer, z_new, x_new)
    return x_new, z_new


def latino_step(p: dict[str, Node], x, obs, layer: int, seeds: Sequence[int], sched: VPSchedule,
                denoiser: Callable | None = None, noise=None) -> Node:
    """Forward-diffuse to t_l, denoise, then take the likelihood prox with step gamma_l / L_A."""
    ob = as_batch(obs)
    x = ad._wrap(x)
    t = ad.clip(p["t"][layer], T_MIN, 1.0)
    if noise is None:
        noise = chain_noise(seeds, layer, ROLE_DIFFUSION, (ob.d_x,))
    mu, sigma = sched.mu_sigma(t)
    x_t = ad.gaussian_reparam(ad.mul(mu, x), sigma, np.asarray(noise).reshape(ob.batch, -1))
    if denoiser is None:
        den = {k[4:]: v for k, v in p.items() if k.startswith("den/")}
        z = small_dense_forward(den, x_t, t, sched)
    else:
        z = denoiser(x_t, t, sched)
    g = ad.div(ad.exp(p["log_gamma"][layer]), ob.lip_flat)
    c_flat = ad.div(g, ob.var_flat)
    c_spec = ad.div(ad.reshape(g, (ob.batch,) + (1,) * len(ob.x_shape)), ob.var_spec)
    x_new = ob.spectral(ad.add(z, ad.mul(c_flat, ob.aty)), ad.div(1.0, ad.add(1.0, ad.mul(c_spec, ob.gram))))
    _check_finite(layer, x_new)
    return x_new


def latino_init(ob: ObservationBatch) -> np.ndarray:
    """Back-projection A^T y / L_A^2."""
    return ob.aty / ob.lip_flat ** 2


def unfold_chain(model: UnfoldedModel, obs, seeds: Sequence[int] | int,
                 params: dict[str, Node] | None = None, init: np.ndarray | None = None) -> ChainTrace:
    """Run the initialisation kernel and L transitions, keeping layers >= L0.

    With ``params`` bound on a tape, the retained samples stay differentiable.
    """
    ob = as_batch(obs)
    seeds = np.atleast_1d(np.asarray(seeds, dtype=np.int64))
    if seeds.shape[0] != ob.batch:
        raise ValueError(f"need one seed per chain: {seeds.shape[0]} seeds for {ob.batch} chains")
    p = model.bind() if params is None else params
    kept: list[Node] = []
    z = None
    if model.kind == "sgs":
        d_z = model.params["W"].shape[1]
        x = ad.const(np.zeros((ob.batch, ob.d_x)) if init is None else init)
        z = ad.const(np.zeros((ob.batch, d_z)))
        if model.L0 == 0:
            kept.append(x)
        for layer in range(1, model.L + 1):
            x, z = sgs_step(p, (x, z), ob, layer, seeds)
            if layer >= model.L0:
                kept.append(x)
    else:
        x0 = latino_init(ob) if init is None else init
        x = ad.const(x0)
        for layer in range(0, model.L + 1):
            x = latino_step(p, x, ob, layer, seeds, model.sched, model.denoiser)
            if layer >= model.L0:
                kept.append(x)
    mean = kept[0] if len(kept) == 1 else ad.scale(_sum_nodes(kept), 1.0 / len(kept))
    return ChainTrace(kept, mean, z, seeds, ob.x_shape)


def _sum_nodes(nodes: Sequence[Node]) -> Node:
    total = nodes[0]
    for n in nodes[1:]:
        total = ad.add(total, n)
    return total


def zero_shot_latino_defaults(L: int, lipschitz: float) -> list[dict]:
    """gamma_l = L_A / 2 and t_l = 3 (L + 1 - l) / (4 L), clipped to (0, 1]."""
    if L < 1:
        raise ValueError("L must be at least 1")
    return [{"gamma": lipschitz / 2.0, "t": min(3.0 * (L + 1 - l) / (4.0 * L), 1.0)} for l in range(L + 1)]

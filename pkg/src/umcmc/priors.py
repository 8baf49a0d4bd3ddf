"""Priors and denoisers.

Functions accept arrays or tape Nodes and return Nodes, so the same code serves
sampling (under ``no_grad``) and training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node


def laplace_score_smoothed(z, lam) -> Node:
    """(ST_lam(z) - z) / lam, the gradient of the Moreau envelope of -||z||_1."""
    return ad.div(ad.sub(ad.soft_threshold(z, lam), z), lam)


def smoothed_laplace_logpdf(z: np.ndarray, lam: float) -> np.ndarray:
    """Unnormalised log density whose score is :func:`laplace_score_smoothed`.

    Sums the Huber function over the last axis: z^2/(2 lam) inside [-lam, lam],
    |z| - lam/2 outside.
    """
    a = np.abs(z)
    hub = np.where(a <= lam, a * a / (2.0 * lam), a - lam / 2.0)
    return -hub.sum(axis=-1)


@dataclass
class LatentLaplacePrior:
    """x | z ~ N(Sig(W z), rho^2), z with the smoothed Laplace density.

    ``log_lam`` is the optimised coordinate; lambda = exp(log_lam).
    """

    W: np.ndarray
    log_lam: float = 0.0

    @classmethod
    def init(cls, d_x: int, d_z: int, rng: np.random.Generator, lam: float = 1.0) -> "LatentLaplacePrior":
        return cls(W=rng.standard_normal((d_x, d_z)) / math.sqrt(d_z), log_lam=math.log(lam))

    @property
    def lam(self) -> float:
        return math.exp(self.log_lam)

    @property
    def d_x(self) -> int:
        return self.W.shape[0]

    @property
    def d_z(self) -> int:
        return self.W.shape[1]


def prior_mean(W, z) -> Node:
    """Sig(W z) for z of shape (..., d_z)."""
    W, z = ad._wrap(W), ad._wrap(z)
    if W.ndim != 2 or z.shape[-1] != W.shape[1]:
        raise ValueError(f"prior_mean: W {W.shape} cannot act on z {z.shape}")
    return ad.sigmoid(ad.matvec(W, z))


@dataclass(frozen=True)
class VPSchedule:
    """Linear beta schedule beta_t = beta_min + t (beta_max - beta_min) on [0, 1]."""

    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if not (self.beta_min > 0 and self.beta_max > 0):
            raise ValueError("beta_min and beta_max must be positive")

    def integral(self, t):
        t = ad._wrap(t)
        return ad.add(ad.scale(t, self.beta_min), ad.scale(ad.mul(t, t), 0.5 * (self.beta_max - self.beta_min)))

    def mu(self, t) -> Node:
        return ad.exp(ad.neg(self.integral(t)))

    def sigma(self, t) -> Node:
        mu = self.mu(t)
        return ad.sqrt(ad.sub(1.0, ad.mul(mu, mu)))

    def mu_sigma(self, t) -> tuple[Node, Node]:
        mu = self.mu(t)
        var = ad.sub(1.0, ad.mul(mu, mu))
        # sqrt has an infinite slope at var = 0 (t = 0); keep the forward value exact there
        if np.all(var.value > 0):
            return mu, ad.sqrt(var)
        return mu, ad.const(np.sqrt(np.maximum(var.value, 0.0)))


def vp_forward_sample(x0, t, sched: VPSchedule, rng: np.random.Generator | None = None, noise=None) -> Node:
    """mu_t x0 + sigma_t zeta with zeta ~ N(0, I) (drawn from ``rng`` unless given)."""
    x0 = ad._wrap(x0)
    t_val = np.asarray(ad._wrap(t).value)
    if np.any(t_val < 0) or np.any(t_val > 1):
        raise ValueError(f"diffusion time must lie in [0, 1], got {t_val}")
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    mu, sigma = sched.mu_sigma(t)
    return ad.gaussian_reparam(ad.mul(mu, x0), sigma, noise)


@dataclass(frozen=True)
class AnalyticGaussian:
    """MMSE denoiser of a Gaussian prior N(mu0, diag(c0)); exact Tweedie posterior mean."""

    mu0: np.ndarray
    c0: np.ndarray

    def __post_init__(self):
        c0 = np.asarray(self.c0, dtype=np.float64)
        if np.any(c0 <= 0):
            raise ValueError("prior variances must be positive")
        object.__setattr__(self, "c0", c0)
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=np.float64))

    def __call__(self, x_t, t, sched: VPSchedule) -> Node:
        return analytic_mmse_denoiser(self, x_t, t, sched)


def analytic_mmse_denoiser(d: AnalyticGaussian, x_t, t, sched: VPSchedule) -> Node:
    """E[x0 | x_t] = mu0 + mu C0 (mu^2 C0 + sigma^2)^-1 (x_t - mu mu0), diagonal C0."""
    mu, sigma = sched.mu_sigma(t)
    gain = ad.div(ad.mul(mu, d.c0), ad.add(ad.mul(ad.mul(mu, mu), d.c0), ad.mul(sigma, sigma)))
    return ad.add(d.mu0, ad.mul(gain, ad.sub(x_t, ad.mul(mu, d.mu0))))


@dataclass
class SmallDense:
    """Residual two-layer denoiser on flat vectors with (mu_t, sigma_t) appended.

    D(x_t, t) = x_t + W2 tanh(W1 [x_t, mu_t, sigma_t] + b1) + b2
    """

    params: dict[str, np.ndarray] = field(default_factory=dict)
    hidden: int = 64

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, hidden: int = 64) -> "SmallDense":
        p = {
            "W1": rng.standard_normal((hidden, dim + 2)) / math.sqrt(dim + 2),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((dim, hidden)) * (0.1 / math.sqrt(hidden)),
            "b2": np.zeros(dim),
        }
        return cls(params=p, hidden=hidden)

    @property
    def dim(self) -> int:
        return self.params["b2"].shape[0]

    def __call__(self, x_t, t, sched: VPSchedule, params: dict[str, Node] | None = None) -> Node:
        return small_dense_forward(params if params is not None else self.params, x_t, t, sched)


def small_dense_forward(p, x_t, t, sched: VPSchedule) -> Node:
    """Evaluate the residual denoiser; ``x_t`` has shape (batch, dim)."""
    x_t = ad._wrap(x_t)
    mu, sigma = sched.mu_sigma(t)
    batch = x_t.shape[0]
    ones = np.ones((batch, 1))
    # mu, sigma are scalars or one value per row
    mu_col = ad.mul(ones, ad.reshape(mu, (-1, 1)))
    sig_col = ad.mul(ones, ad.reshape(sigma, (-1, 1)))
    feats = ad.concat([x_t, mu_col, sig_col], axis=1)
    hidden = ad.tanh(ad.add(ad.matvec(p["W1"], feats), p["b1"]))
    return ad.add(x_t, ad.add(ad.matvec(p["W2"], hidden), p["b2"]))


def score_matching_loss(denoiser, batch, t_draws, sched: VPSchedule, rng: np.random.Generator | None = None,
                        noise=None) -> Node:
    """mean_i ||x_i - D(mu_t x_i + sigma_t zeta_i, t_i)||^2.

    ``denoiser(x_t, t)`` is any callable returning a Node; ``t_draws`` holds one
    time per batch row.
    """
    batch = ad._wrap(batch)
    if batch.shape[0] == 0:
        raise ValueError("score matching needs a nonempty batch")
    t = np.asarray(t_draws, dtype=np.float64).reshape(-1, 1)
    if noise is None:
        noise = rng.standard_normal(batch.shape)
    mu, sigma = sched.mu_sigma(t)
    x_t = ad.gaussian_reparam(ad.mul(mu, batch), sigma, noise)
    resid = ad.sub(batch, denoiser(x_t, t))
    return ad.scale(ad.sq_l2_sum(resid), 1.0 / batch.shape[0])

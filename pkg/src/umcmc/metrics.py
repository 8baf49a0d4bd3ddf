"""Reconstruction and posterior-quality metrics.

All functions are pure; random projections come from an explicit generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.ndimage import uniform_filter


class MetricError(ValueError):
    pass


def psnr(x, xhat, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); returns +inf when the images are identical."""
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise MetricError(f"psnr: shapes {x.shape} and {xhat.shape} differ")
    if not peak > 0:
        raise MetricError("psnr: peak must be positive")
    mse = float(np.mean((x - xhat) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def ssim(x, xhat, window: int = 7, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully contained ``window`` x ``window`` uniform windows.

    Local moments are population (biased) moments.
    """
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    if x.ndim != 2 or x.shape != xhat.shape:
        raise MetricError("ssim expects two 2D images of equal shape")
    if min(x.shape) < window:
        raise MetricError(f"image {x.shape} smaller than window {window}")
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2

    def local(a):
        full = uniform_filter(a, size=window, mode="constant")
        lo = window // 2
        hi = window - 1 - lo
        return full[lo:a.shape[0] - hi, lo:a.shape[1] - hi]

    mx, my = local(x), local(xhat)
    vx = local(x * x) - mx * mx
    vy = local(xhat * xhat) - my * my
    cxy = local(x * xhat) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


# --- sliced Wasserstein -----------------------------------------------------------

def _as_points(s) -> np.ndarray:
    a = np.asarray(s, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    return a.reshape(a.shape[0], -1)


def joint_points(x, y, whiten_y: bool = False) -> np.ndarray:
    """Concatenate flattened samples with their observations, optionally whitening y per coordinate."""
    xs, ys = _as_points(x), _as_points(y)
    if whiten_y:
        sd = ys.std(axis=0)
        ys = (ys - ys.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    return np.concatenate([xs, ys], axis=1)


def random_directions(dim: int, n_proj: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n_proj, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def projected_w2(a: np.ndarray, b: np.ndarray, direction: np.ndarray) -> float:
    """Equal-weight 1D W2 between the projections of two point sets onto ``direction``."""
    pa = np.sort(a @ direction)
    pb = np.sort(b @ direction)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def sliced_wasserstein(s1, s2, n_proj: int = 200, rng: np.random.Generator | None = None,
                       directions: np.ndarray | None = None) -> float:
    """Mean over random unit directions of the projected 1D W2 distance."""
    a, b = _as_points(s1), _as_points(s2)
    if a.shape[0] != b.shape[0]:
        raise MetricError(f"sliced_wasserstein needs equal cardinality, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise MetricError("sample dimensions differ")
    if directions is None:
        if rng is None:
            raise MetricError("either rng or directions is required")
        directions = random_directions(a.shape[1], n_proj, rng)
    pa = np.sort(a @ directions.T, axis=0)
    pb = np.sort(b @ directions.T, axis=0)
    return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))


def sw_bias_baseline(sampler: Callable[[int, np.random.Generator], np.ndarray], n: int, n_proj: int,
                     repetitions: int, rng: np.random.Generator) -> tuple[float, float]:
    """Mean and std of SW between two independent same-law sets of size ``n``."""
    if n < 2:
        raise MetricError("baseline needs n >= 2")
    vals = []
    for _ in range(repetitions):
        a, b = sampler(n, rng), sampler(n, rng)
        vals.append(sliced_wasserstein(a, b, n_proj, rng))
    vals = np.array(vals)
    return float(vals.mean()), float(vals.std())


# --- Gaussian summaries ----------------------------------------------------------------

@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise MetricError(f"covariance shape {cov.shape} does not match mean {mean.shape}")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise MetricError("covariance is not symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig.min() < -1e-10 * max(1.0, eig.max()):
            raise MetricError(f"covariance is not positive semidefinite (min eigenvalue {eig.min():.3e})")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def fit(cls, samples, ridge: float = 0.0) -> "GaussianSummary":
        a = _as_points(samples)
        mean = a.mean(axis=0)
        cov = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1]) if a.shape[0] > 1 \
            else np.zeros((a.shape[1], a.shape[1]))
        return cls(mean, cov + ridge * np.eye(a.shape[1]))


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_gaussian(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """||m1 - m2||^2 + tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2)."""
    if g1.mean.shape != g2.mean.shape:
        raise MetricError("dimension mismatch")
    s1 = _psd_sqrt(g1.cov)
    cross = _psd_sqrt(s1 @ g2.cov @ s1)
    diff = g1.mean - g2.mean
    return float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross))


class PCAEncoder:
    """Linear projection onto the leading principal components of training data."""

    def __init__(self, dim: int = 12):
        self.dim = dim
        self.mean: np.ndarray | None = None
        self.components: np.ndarray | None = None

    def fit(self, data) -> "PCAEncoder":
        a = _as_points(data)
        self.mean = a.mean(axis=0)
        _, _, vt = np.linalg.svd(a - self.mean, full_matrices=False)
        self.components = vt[:min(self.dim, vt.shape[0])]
        return self

    def __call__(self, x) -> np.ndarray:
        if self.components is None:
            raise MetricError("PCAEncoder used before fit")
        return (_as_points(x) - self.mean) @ self.components.T


def latent_w2(encoder: Callable, posterior_sets, reference_sets) -> float:
    """Average over observations of the Fréchet distance between Gaussian fits of encoded sets."""
    if len(posterior_sets) != len(reference_sets) or not posterior_sets:
        raise MetricError("need matching, nonempty lists of sample sets")
    total = 0.0
    for p, r in zip(posterior_sets, reference_sets):
        ep, er = _as_points(encoder(p)), _as_points(encoder(r))
        dim = ep.shape[1]
        ridge_p = 1e-6 if ep.shape[0] <= dim else 0.0
        ridge_r = 1e-6 if er.shape[0] <= dim else 0.0
        total += frechet_gaussian(GaussianSummary.fit(ep, ridge_p), GaussianSummary.fit(er, ridge_r))
    return total / len(posterior_sets)


# --- kernel MMD -------------------------------------------------------------------------

def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(s1, s2) -> float:
    pts = np.concatenate([_as_points(s1), _as_points(s2)])
    d = np.sqrt(_sq_dists(pts, pts))
    off = d[np.triu_indices_from(d, k=1)]
    med = float(np.median(off))
    return med if med > 0 else 1.0


def mmd_rbf(s1, s2, bandwidth: float | None = None) -> float:
    """Unbiased U-statistic estimate of squared MMD with k(a, b) = exp(-|a - b|^2 / (2 h^2))."""
    a, b = _as_points(s1), _as_points(s2)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise MetricError("mmd_rbf needs at least two points per set")
    h = median_bandwidth(a, b) if bandwidth is None else bandwidth
    if not h > 0:
        raise MetricError("bandwidth must be positive")
    kxx = np.exp(-_sq_dists(a, a) / (2 * h * h))
    kyy = np.exp(-_sq_dists(b, b) / (2 * h * h))
    kxy = np.exp(-_sq_dists(a, b) / (2 * h * h))
    n, m = a.shape[0], b.shape[0]
    xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(xx + yy - 2.0 * kxy.mean())


# --- posterior structure -------------------------------------------------------------------

def posterior_pca(samples, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenpairs of the sample covariance through the n x n Gram matrix.

    Tall sample sets (n > d) use the d x d covariance instead; both share the
    nonzero spectrum. Returns eigenvalues (k,) in decreasing order and
    eigenvectors (k, d).
    """
    a = _as_points(samples)
    n, d = a.shape
    if not 1 <= k <= min(n - 1, d):
        raise MetricError(f"k={k} must lie in [1, min(n - 1, d)] = [1, {min(n - 1, d)}]")
    c = a - a.mean(axis=0)
    if n > d:
        w, v = np.linalg.eigh(c.T @ c / (n - 1))
        order = np.argsort(w)[::-1][:k]
        return np.clip(w[order], 0.0, None), v[:, order].T
    gram = c @ c.T / (n - 1)
    w, u = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1][:k]
    w, u = np.clip(w[order], 0.0, None), u[:, order]
    vecs = c.T @ u
    norms = np.linalg.norm(vecs, axis=0)
    # zero-variance directions: fill with an orthonormal completion
    good = norms > 1e-12 * max(1.0, norms.max(initial=0.0))
    vecs[:, good] /= norms[good]
    if not good.all():
        q, _ = np.linalg.qr(np.concatenate([vecs[:, good], np.eye(d)], axis=1))
        vecs[:, ~good] = q[:, good.sum():good.sum() + (~good).sum()]
        w[~good] = 0.0
    return w, vecs.T


def block_mean(a: np.ndarray, block: int) -> np.ndarray:
    H, W = a.shape
    if H % block or W % block:
        raise MetricError(f"block {block} does not divide map shape {a.shape}")
    return a.reshape(H // block, block, W // block, block).mean(axis=(1, 3))


def residual_correlation(std_map, residual_map, block: int = 1) -> float:
    """Pearson correlation of block-mean downsampled maps."""
    s, r = np.asarray(std_map, dtype=np.float64), np.asarray(residual_map, dtype=np.float64)
    if s.shape != r.shape:
        raise MetricError("maps must share a shape")
    s, r = block_mean(s, block).ravel(), block_mean(r, block).ravel()
    s, r = s - s.mean(), r - r.mean()
    den = math.sqrt(float(s @ s) * float(r @ r))
    if den == 0.0:
        raise MetricError("correlation undefined for a constant map")
    return float(s @ r) / den


# --- reporting ----------------------------------------------------------------------------

def format_report(summary: dict, rows: list[dict] | None = None) -> str:
    """``key = value`` lines, then an optional tab-separated table."""
    lines = [f"{k} = {_fmt(v)}" for k, v in summary.items()]
    if rows:
        cols = list(rows[0])
        lines.append("")
        lines.append("\t".join(cols))
        lines.extend("\t".join(_fmt(r.get(c, "")) for c in cols) for r in rows)
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if v == math.inf else repr(v)
    return str(v)

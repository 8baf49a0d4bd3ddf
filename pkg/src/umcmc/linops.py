"""Linear forward models, Gaussian-likelihood proximal maps and the exact
Gaussian conditional sampler.

All operators act on the trailing axes of an array, so a leading batch axis is
allowed everywhere. Convolutions use periodic boundaries, which makes ``A^T A``
diagonal in the 2D Fourier basis.

FourierMask measurements are complex; they are stored as real arrays with a
trailing axis of length 2 holding (real, imaginary) parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import as_tensor


class UnsupportedOperatorError(TypeError):
    pass


class ConvergenceError(RuntimeError):
    pass


def _check_trailing(name: str, x: np.ndarray, shape: tuple) -> None:
    if x.shape[x.ndim - len(shape):] != shape or x.ndim < len(shape):
        raise ValueError(f"{name}: expected trailing shape {shape}, got {x.shape}")


def fourier_multiply(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Re(ifft2(h * fft2(x))) on the last two axes; ``h`` may be complex."""
    return np.real(np.fft.ifft2(h * np.fft.fft2(x)))


class LinearOperator:
    """Common surface of every forward model."""

    in_shape: tuple
    out_shape: tuple
    # "fourier": A^T A is diagonal in the 2D DFT basis; "pixel": diagonal in pixels
    basis: str | None = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def lipschitz(self) -> float:
        raise NotImplementedError

    def gram_eigs(self) -> np.ndarray:
        """Eigenvalues of A^T A in the operator's diagonal basis."""
        raise UnsupportedOperatorError(f"{type(self).__name__} is not diagonalisable in a fixed basis")

    def to_dense(self) -> np.ndarray:
        """Explicit real matrix of shape (prod(out_shape), prod(in_shape))."""
        n = int(np.prod(self.in_shape))
        eye = np.eye(n).reshape((n,) + tuple(self.in_shape))
        return self.apply(eye).reshape(n, -1).T.copy()

    @property
    def is_complex(self) -> bool:
        return False


@dataclass(frozen=True, eq=False)
class Identity(LinearOperator):
    shape: tuple

    basis = "pixel"

    def __post_init__(self):
        shape = (self.shape,) if np.isscalar(self.shape) else tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)

    @property
    def in_shape(self):
        return self.shape

    @property
    def out_shape(self):
        return self.shape

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        _check_trailing("Identity.apply", x, self.shape)
        return x.copy()

    def adjoint(self, u):
        u = np.asarray(u, dtype=np.float64)
        _check_trailing("Identity.adjoint", u, self.shape)
        return u.copy()

    def lipschitz(self):
        return 1.0

    def gram_eigs(self):
        return np.ones(self.shape)


def embed_kernel(kernel: np.ndarray, image_shape: tuple) -> np.ndarray:
    """Zero-pad a centred kernel to ``image_shape`` with its centre at index (0, 0)."""
    kh, kw = kernel.shape
    H, W = image_shape
    if kh > H or kw > W:
        raise ValueError(f"kernel {kernel.shape} larger than image {image_shape}")
    big = np.zeros((H, W))
    big[:kh, :kw] = kernel
    return np.roll(big, (-(kh // 2), -(kw // 2)), axis=(0, 1))


@dataclass(frozen=True, eq=False)
class Circulant2D(LinearOperator):
    """Periodic 2D convolution with a centred kernel."""

    kernel: np.ndarray
    image_shape: tuple
    _khat: np.ndarray = field(init=False, repr=False)

    basis = "fourier"

    def __post_init__(self):
        k = as_tensor(self.kernel, "kernel")
        if k.ndim != 2:
            raise ValueError(f"kernel must be 2D, got shape {k.shape}")
        shape = tuple(int(s) for s in self.image_shape)
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "image_shape", shape)
        object.__setattr__(self, "_khat", np.fft.fft2(embed_kernel(k, shape)))

    @property
    def in_shape(self):
        return self.image_shape

    @property
    def out_shape(self):
        return self.image_shape

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        _check_trailing("Circulant2D.apply", x, self.image_shape)
        return fourier_multiply(x, self._khat)

    def adjoint(self, u):
        u = np.asarray(u, dtype=np.float64)
        _check_trailing("Circulant2D.adjoint", u, self.image_shape)
        return fourier_multiply(u, np.conj(self._khat))

    def lipschitz(self):
        return float(np.abs(self._khat).max())

    def gram_eigs(self):
        return np.abs(self._khat) ** 2


@dataclass(frozen=True, eq=False)
class FourierMask(LinearOperator):
    """y = m * F x with the unitary 2D DFT ``F``; output stored as (..., H, W, 2)."""

    mask: np.ndarray

    basis = "fourier"

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {m.shape}")
        m = m.astype(np.complex128)
        if not np.all(np.isfinite(m)):
            raise ValueError("mask contains non-finite entries")
        object.__setattr__(self, "mask", m)

    @property
    def in_shape(self):
        return self.mask.shape

    @property
    def out_shape(self):
        return self.mask.shape + (2,)

    @property
    def is_complex(self):
        return True

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        _check_trailing("FourierMask.apply", x, self.in_shape)
        c = self.mask * np.fft.fft2(x, norm="ortho")
        return np.stack([c.real, c.imag], axis=-1)

    def adjoint(self, u):
        u = np.asarray(u, dtype=np.float64)
        _check_trailing("FourierMask.adjoint", u, self.out_shape)
        c = u[..., 0] + 1j * u[..., 1]
        return np.real(np.fft.ifft2(np.conj(self.mask) * c, norm="ortho"))

    def lipschitz(self):
        # exact for Hermitian-symmetric masks, an upper bound otherwise
        return float(np.abs(self.mask).max())

    def gram_eigs(self):
        # A^T A = Re(F^H |m|^2 F) acts on real images through the symmetrised spectrum
        g = np.abs(self.mask) ** 2
        return 0.5 * (g + np.roll(g[::-1, ::-1], 1, axis=(0, 1)))


@dataclass(frozen=True, eq=False)
class Dense(LinearOperator):
    matrix: np.ndarray

    def __post_init__(self):
        M = as_tensor(self.matrix, "matrix")
        if M.ndim != 2:
            raise ValueError(f"dense operator needs a matrix, got shape {M.shape}")
        object.__setattr__(self, "matrix", M)

    @property
    def in_shape(self):
        return (self.matrix.shape[1],)

    @property
    def out_shape(self):
        return (self.matrix.shape[0],)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        _check_trailing("Dense.apply", x, self.in_shape)
        return x @ self.matrix.T

    def adjoint(self, u):
        u = np.asarray(u, dtype=np.float64)
        _check_trailing("Dense.adjoint", u, self.out_shape)
        return u @ self.matrix

    def lipschitz(self, max_iter: int = 100, tol: float = 1e-10) -> float:
        M = self.matrix
        v = np.random.default_rng(0).standard_normal(M.shape[1])
        v /= np.linalg.norm(v)
        est = 0.0
        for _ in range(max_iter):
            w = M.T @ (M @ v)
            rayleigh = float(v @ w)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                return 0.0
            v = w / norm
            converged = abs(rayleigh - est) <= tol * rayleigh
            est = rayleigh
            if converged:
                break
        return float(np.sqrt(est))

    def to_dense(self):
        return self.matrix.copy()


def apply(op: LinearOperator, x):
    return op.apply(x)


def adjoint(op: LinearOperator, u):
    return op.adjoint(u)


def lipschitz(op: LinearOperator) -> float:
    return op.lipschitz()


@dataclass(frozen=True)
class GaussianLikelihood:
    """p(y|x) = N(y; A x, sigma_y^2).

    For complex measurements the noise is circular complex Gaussian with total
    variance ``sigma_y**2`` per entry, i.e. ``sigma_y**2 / 2`` per stored real
    component; :attr:`variance` is the per-component value.
    """

    operator: LinearOperator
    sigma_y: float

    def __post_init__(self):
        if not self.sigma_y > 0:
            raise ValueError(f"sigma_y must be positive, got {self.sigma_y}")

    @property
    def variance(self) -> float:
        v = float(self.sigma_y) ** 2
        return v / 2.0 if self.operator.is_complex else v

    def nll(self, x, y) -> np.ndarray:
        r = self.operator.apply(x) - y
        axes = tuple(range(r.ndim - len(self.operator.out_shape), r.ndim))
        return np.sum(r * r, axis=axes) / (2.0 * self.variance)


def conjugate_gradient(matvec, b: np.ndarray, tol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Solve a symmetric positive definite system to relative residual ``tol``."""
    x = np.zeros_like(b)
    r = b - matvec(x)
    p = r.copy()
    rs = float(r @ r)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x
    max_iter = 10 * b.size if max_iter is None else max_iter
    for _ in range(max_iter):
        if np.sqrt(rs) <= tol * bnorm:
            return x
        Ap = matvec(p)
        alpha = rs / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    if np.sqrt(rs) <= tol * bnorm:
        return x
    raise ConvergenceError(f"conjugate gradient stalled with residual norm {np.sqrt(rs):.3e}")


def prox_gaussian_nll(lik: GaussianLikelihood, y, gamma: float, v) -> np.ndarray:
    """argmin_x ||A x - y||^2 / (2 var) + ||x - v||^2 / (2 gamma).

    Solves (I + c A^T A) x = v + c A^T y with c = gamma / var.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    op = lik.operator
    v = np.asarray(v, dtype=np.float64)
    c = gamma / lik.variance
    rhs = v + c * op.adjoint(y)
    if op.basis == "pixel":
        return rhs / (1.0 + c * op.gram_eigs())
    if op.basis == "fourier":
        return fourier_multiply(rhs, 1.0 / (1.0 + c * op.gram_eigs()))
    M = op.to_dense()
    d = M.shape[1]
    flat = rhs.reshape(-1, d)
    out = np.empty_like(flat)
    for i, b in enumerate(flat):
        out[i] = conjugate_gradient(lambda u: u + c * (M.T @ (M @ u)), b, tol=1e-10, max_iter=10 * d)
    return out.reshape(rhs.shape)


def conditional_precision_eigs(lik: GaussianLikelihood, rho: float) -> np.ndarray:
    """Eigenvalues of A^T A / var + 1 / rho^2 in the operator's basis."""
    if lik.operator.basis is None:
        raise UnsupportedOperatorError(
            f"{type(lik.operator).__name__} has no diagonal basis; exact conditional sampling unsupported")
    return lik.operator.gram_eigs() / lik.variance + 1.0 / rho ** 2


def sample_gaussian_conditional(lik: GaussianLikelihood, y, rho: float, m, rng: np.random.Generator,
                                noise: np.ndarray | None = None) -> np.ndarray:
    """Exact draw from N(prox mean, (A^T A / var + rho^-2 I)^-1).

    The mean is ``prox_gaussian_nll(lik, y, rho**2, m)``; the covariance square
    root is applied as an elementwise inverse square root in the operator's
    diagonal basis. ``m`` may carry leading batch axes; ``y`` broadcasts.
    """
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    op = lik.operator
    prec = conditional_precision_eigs(lik, rho)
    m = np.asarray(m, dtype=np.float64)
    mean = prox_gaussian_nll(lik, y, rho ** 2, m)
    zeta = rng.standard_normal(mean.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    if op.basis == "pixel":
        return mean + zeta / np.sqrt(prec)
    return mean + fourier_multiply(zeta, 1.0 / np.sqrt(prec))

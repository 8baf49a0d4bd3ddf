"""Dense float64 tensors with a reverse-mode differentiation tape.

Every value lives in a :class:`Node`. Nodes built from inputs that require a
gradient keep references to their parents together with a vector-Jacobian
product (VJP) closure; the graph is therefore a DAG ordered by node id. The
VJP closures are themselves written with differentiable primitives, so
``backward(..., create_graph=True)`` produces gradients that can be
differentiated again (needed by the gradient penalty).

Non-smooth primitives use the zero subgradient at their kinks.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node", "Tape", "GradMap", "as_tensor", "const", "param", "no_grad",
    "track_kinks", "backward", "grad", "finite_diff_check",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "matvec",
    "transpose", "reshape", "getitem", "concat", "stack", "sum", "mean",
    "broadcast_to", "sum_to", "exp", "log", "sqrt", "power", "sigmoid",
    "tanh", "leaky_relu", "absolute", "clip", "soft_threshold", "l1_sum",
    "sq_l2_sum", "gaussian_reparam", "fourier_filter", "flip2",
]

_ids = itertools.count()
_state = threading.local()

# test hook used by the oracle negative control; multiplies every leaf gradient
_GRADIENT_CORRUPTION: float | None = None


def _recording() -> bool:
    return getattr(_state, "enabled", True)


def _kink_log() -> list | None:
    return getattr(_state, "kinks", None)


def as_tensor(data, name: str = "tensor") -> np.ndarray:
    """Validate external input as a contiguous float64 array with finite entries."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


class Node:
    """A value on the tape.

    ``parents`` is a tuple of ``(parent, vjp)`` pairs where ``vjp`` maps the
    upstream gradient (a Node shaped like ``self``) to the contribution for
    ``parent`` (a Node shaped like ``parent``).
    """

    __slots__ = ("id", "value", "parents", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.id = next(_ids)
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Node":
        return transpose(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node(id={self.id}{tag}, shape={self.shape}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class GradMap(dict):
    """Mapping node id -> gradient; also indexable by the Node itself."""

    def __getitem__(self, key):
        if isinstance(key, Node):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Node):
            key = key.id
        return super().__contains__(key)


def const(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=np.float64))


def param(value, name: str | None = None) -> Node:
    """A trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else const(x)


@contextlib.contextmanager
def no_grad():
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def track_kinks():
    """Collect the distance of every non-smooth primitive input to its kink."""
    prev = _kink_log()
    log: list[float] = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def _note_kink(distance: np.ndarray) -> None:
    log = _kink_log()
    if log is not None and distance.size:
        log.append(float(np.min(distance)))


def _make(value: np.ndarray, parents: Sequence[tuple[Node, Callable]]) -> Node:
    if not _recording():
        return Node(value)
    live = tuple((p, f) for p, f in parents if p.requires_grad)
    if not live:
        return Node(value)
    return Node(value, live, requires_grad=True)


class Tape:
    """Per-evaluation container for trainable leaves.

    A fresh tape is built for each loss evaluation; it only owns the leaves it
    created, while the graph itself hangs off parent links.
    """

    def __init__(self):
        self.leaves: list[Node] = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def param(self, value, name: str | None = None) -> Node:
        node = param(value, name)
        self.leaves.append(node)
        return node

    def bind(self, params: dict[str, np.ndarray], trainable: bool = True) -> dict[str, Node]:
        if trainable:
            return {k: self.param(v, k) for k, v in params.items()}
        return {k: const(v) for k, v in params.items()}

    def backward(self, root: Node, create_graph: bool = False) -> GradMap:
        return backward(root, create_graph=create_graph)


# ---------------------------------------------------------------------------
# shape helpers


def _check_broadcast(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch between operands {a.shape} and {b.shape}") from None


def sum_to(x, shape: tuple) -> Node:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = _wrap(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    v = x.value
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and v.shape[i + lead] != 1
    )
    out = v.sum(axis=axes, keepdims=True).reshape(shape) if axes else v.reshape(shape)
    src_shape = x.shape
    return _make(out, [(x, lambda g: broadcast_to(g, src_shape))])


def broadcast_to(x, shape: tuple) -> Node:
    x = _wrap(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    out = np.ascontiguousarray(np.broadcast_to(x.value, shape))
    src_shape = x.shape
    return _make(out, [(x, lambda g: sum_to(g, src_shape))])


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    return _make(a.value + b.value, [
        (a, lambda g: sum_to(g, a.shape)),
        (b, lambda g: sum_to(g, b.shape)),
    ])


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("subtract", a, b)
    return _make(a.value - b.value, [
        (a, lambda g: sum_to(g, a.shape)),
        (b, lambda g: sum_to(neg(g), b.shape)),
    ])


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("multiply", a, b)
    return _make(a.value * b.value, [
        (a, lambda g: sum_to(mul(g, b), a.shape)),
        (b, lambda g: sum_to(mul(g, a), b.shape)),
    ])


def div(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("divide", a, b)
    return _make(a.value / b.value, [
        (a, lambda g: sum_to(div(g, b), a.shape)),
        (b, lambda g: sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)),
    ])


def neg(a) -> Node:
    a = _wrap(a)
    return _make(-a.value, [(a, lambda g: neg(g))])


def scale(a, c: float) -> Node:
    a = _wrap(a)
    c = float(c)
    return _make(a.value * c, [(a, lambda g: scale(g, c))])


# ---------------------------------------------------------------------------
# linear algebra and structure


def transpose(a) -> Node:
    """Swap the last two axes."""
    a = _wrap(a)
    if a.ndim < 2:
        raise ValueError(f"transpose needs at least 2 dims, got shape {a.shape}")
    return _make(np.swapaxes(a.value, -1, -2), [(a, lambda g: transpose(g))])


def matmul(a, b) -> Node:
    """Matrix product with numpy batching rules; both operands need ndim >= 2."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible operands {a.shape} and {b.shape}")
    return _make(a.value @ b.value, [
        (a, lambda g: sum_to(matmul(g, transpose(b)), a.shape)),
        (b, lambda g: sum_to(matmul(transpose(a), g), b.shape)),
    ])


def matvec(A, x) -> Node:
    """Apply matrix ``A`` of shape (m, n) to the last axis of ``x`` (..., n)."""
    A, x = _wrap(A), _wrap(x)
    if A.ndim != 2 or x.ndim < 1 or A.shape[1] != x.shape[-1]:
        raise ValueError(f"matvec: matrix {A.shape} cannot act on vector {x.shape}")
    m, n = A.shape

    def vjp_A(g):
        return matmul(transpose(reshape(g, (-1, m))), reshape(x, (-1, n)))

    def vjp_x(g):
        return reshape(matmul(reshape(g, (-1, m)), A), x.shape)

    return _make(x.value @ A.value.T, [(A, vjp_A), (x, vjp_x)])


def reshape(a, shape) -> Node:
    a = _wrap(a)
    src = a.shape
    return _make(a.value.reshape(shape), [(a, lambda g: reshape(g, src))])


def _scatter(g, idx, shape) -> Node:
    g = _wrap(g)
    out = np.zeros(shape)
    np.add.at(out, idx, g.value)
    return _make(out, [(g, lambda u: getitem(u, idx))])


def getitem(a, idx) -> Node:
    a = _wrap(a)
    src = a.shape
    return _make(np.array(a.value[idx], dtype=np.float64), [(a, lambda g: _scatter(g, idx, src))])


def concat(parts: Sequence, axis: int = -1) -> Node:
    parts = [_wrap(p) for p in parts]
    values = [p.value for p in parts]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise ValueError("concat: shape mismatch among " + ", ".join(str(v.shape) for v in values)) from None
    ax = axis % out.ndim
    offsets = np.cumsum([0] + [v.shape[ax] for v in values])
    pairs = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        sl = tuple([slice(None)] * ax + [slice(int(lo), int(hi))])
        pairs.append((p, lambda g, sl=sl: getitem(g, sl)))
    return _make(out, pairs)


def stack(parts: Sequence, axis: int = 0) -> Node:
    parts = [_wrap(p) for p in parts]
    expanded = [reshape(p, p.shape[:axis % (p.ndim + 1)] + (1,) + p.shape[axis % (p.ndim + 1):]) for p in parts]
    return concat(expanded, axis=axis)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    src = a.shape
    out = np.asarray(a.value.sum(axis=axis, keepdims=keepdims))
    kd_shape = np.asarray(a.value.sum(axis=axis, keepdims=True)).shape

    def vjp(g):
        return broadcast_to(reshape(g, kd_shape), src)

    return _make(out, [(a, vjp)])


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _wrap(a)
    total = sum(a, axis=axis, keepdims=keepdims)
    count = a.size // max(total.size, 1)
    return scale(total, 1.0 / count)


# ---------------------------------------------------------------------------
# elementwise


def exp(a) -> Node:
    a = _wrap(a)
    out_v = np.exp(a.value)
    holder = {}
    node = _make(out_v, [(a, lambda g: mul(g, holder["out"]))])
    holder["out"] = node
    return node


def log(a) -> Node:
    a = _wrap(a)
    return _make(np.log(a.value), [(a, lambda g: div(g, a))])


def sqrt(a) -> Node:
    a = _wrap(a)
    holder = {}
    node = _make(np.sqrt(a.value), [(a, lambda g: div(scale(g, 0.5), holder["out"]))])
    holder["out"] = node
    return node


def power(a, p: float) -> Node:
    a = _wrap(a)
    p = float(p)
    return _make(a.value ** p, [(a, lambda g: mul(g, scale(power(a, p - 1.0), p)))])


def sigmoid(a) -> Node:
    a = _wrap(a)
    v = a.value
    out_v = np.empty_like(v)
    pos = v >= 0
    out_v[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_v[~pos] = ev / (1.0 + ev)
    holder = {}

    def vjp(g):
        s = holder["out"]
        return mul(g, mul(s, sub(1.0, s)))

    node = _make(out_v, [(a, vjp)])
    holder["out"] = node
    return node


def tanh(a) -> Node:
    a = _wrap(a)
    holder = {}

    def vjp(g):
        t = holder["out"]
        return mul(g, sub(1.0, mul(t, t)))

    node = _make(np.tanh(a.value), [(a, vjp)])
    holder["out"] = node
    return node


def leaky_relu(a, slope: float = 0.2) -> Node:
    a = _wrap(a)
    _note_kink(np.abs(a.value))
    factor = np.where(a.value > 0, 1.0, slope)
    return _make(a.value * factor, [(a, lambda g: mul(g, factor))])


def absolute(a) -> Node:
    a = _wrap(a)
    _note_kink(np.abs(a.value))
    sign = np.sign(a.value)
    return _make(np.abs(a.value), [(a, lambda g: mul(g, sign))])


def clip(a, lo: float, hi: float) -> Node:
    a = _wrap(a)
    _note_kink(np.minimum(np.abs(a.value - lo), np.abs(a.value - hi)))
    inside = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
    return _make(np.clip(a.value, lo, hi), [(a, lambda g: mul(g, inside))])


def soft_threshold(a, lam) -> Node:
    """sign(a) * max(|a| - lam, 0); ``lam`` may be a float or a scalar Node."""
    a, lam = _wrap(a), _wrap(lam)
    if lam.size != 1:
        raise ValueError(f"soft_threshold: threshold must be scalar, got shape {lam.shape}")
    lv = lam.value
    _note_kink(np.abs(np.abs(a.value) - lv))
    active = (np.abs(a.value) > lv).astype(np.float64)
    sign = np.sign(a.value)
    out = sign * np.maximum(np.abs(a.value) - lv, 0.0)
    return _make(out, [
        (a, lambda g: mul(g, active)),
        (lam, lambda g: sum_to(mul(g, -sign * active), lam.shape)),
    ])


def l1_sum(a) -> Node:
    a = _wrap(a)
    _note_kink(np.abs(a.value))
    sign = np.sign(a.value)
    src = a.shape
    return _make(np.asarray(np.abs(a.value).sum()), [(a, lambda g: mul(broadcast_to(g, src), sign))])


def sq_l2_sum(a) -> Node:
    a = _wrap(a)
    src = a.shape
    return _make(np.asarray(np.sum(a.value * a.value)),
                 [(a, lambda g: mul(broadcast_to(scale(g, 2.0), src), a))])


def gaussian_reparam(mu, sigma, zeta) -> Node:
    """mu + sigma * zeta with ``zeta`` held constant (reparameterisation trick)."""
    mu, sigma = _wrap(mu), _wrap(sigma)
    z = zeta.value if isinstance(zeta, Node) else np.asarray(zeta, dtype=np.float64)
    try:
        out = mu.value + sigma.value * z
    except ValueError:
        raise ValueError(f"gaussian_reparam: shape mismatch mu {mu.shape}, sigma {sigma.shape}, "
                         f"noise {z.shape}") from None
    zc = const(z)
    return _make(out, [
        (mu, lambda g: sum_to(g, mu.shape)),
        (sigma, lambda g: sum_to(mul(g, zc), sigma.shape)),
    ])


# ---------------------------------------------------------------------------
# Fourier-diagonal operators over the last two axes


def _flip2_array(h: np.ndarray) -> np.ndarray:
    """Index reversal k -> -k (mod n) on the last two axes."""
    return np.roll(np.flip(h, axis=(-2, -1)), 1, axis=(-2, -1))


def flip2(a) -> Node:
    a = _wrap(a)
    return _make(_flip2_array(a.value), [(a, lambda g: flip2(g))])


def _cross_spectrum(g, x) -> Node:
    # Re(conj(G) X) / N elementwise; the h-gradient of fourier_filter
    g, x = _wrap(g), _wrap(x)
    n = g.shape[-1] * g.shape[-2]
    G = np.fft.fft2(g.value)
    X = np.fft.fft2(x.value)
    out = np.real(np.conj(G) * X) / n
    return _make(out, [
        (g, lambda u: sum_to(fourier_filter(x, u), g.shape)),
        (x, lambda u: sum_to(fourier_filter(g, flip2(u)), x.shape)),
    ])


def fourier_filter(x, h) -> Node:
    """Re(ifft2(h * fft2(x))) over the last two axes for a real multiplier ``h``."""
    x, h = _wrap(x), _wrap(h)
    if x.ndim < 2:
        raise ValueError(f"fourier_filter needs a 2D field, got shape {x.shape}")
    try:
        out_shape = np.broadcast_shapes(x.shape, h.shape)
    except ValueError:
        raise ValueError(f"fourier_filter: multiplier {h.shape} does not fit field {x.shape}") from None
    if out_shape != x.shape:
        raise ValueError(f"fourier_filter: multiplier {h.shape} does not fit field {x.shape}")
    out = np.real(np.fft.ifft2(h.value * np.fft.fft2(x.value)))
    return _make(out, [
        (x, lambda g: fourier_filter(g, flip2(h))),
        (h, lambda g: sum_to(_cross_spectrum(g, x), h.shape)),
    ])


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Node) -> list[Node]:
    seen = {root.id: root}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        for parent, _ in node.parents:
            if parent.id not in seen:
                seen[parent.id] = parent
                stack_.append(parent)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(root: Node, create_graph: bool = False) -> GradMap:
    """Gradients of a scalar ``root`` with respect to every trainable leaf.

    With ``create_graph`` the returned gradients are Nodes that remain on the
    graph; otherwise they are plain arrays.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    grads: dict[int, Node] = {root.id: const(np.ones_like(root.value))}
    leaves = GradMap()
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in order:
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if not node.parents:
                if node.requires_grad:
                    if _GRADIENT_CORRUPTION is not None:
                        g = scale(g, _GRADIENT_CORRUPTION)
                    leaves[node.id] = g if create_graph else g.value
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                prev = grads.get(parent.id)
                grads[parent.id] = contrib if prev is None else add(prev, contrib)
    return leaves


def grad(root: Node, wrt: Iterable[Node], create_graph: bool = False) -> list:
    """Gradients of ``root`` for each node in ``wrt`` (zeros when unreachable)."""
    gm = backward(root, create_graph=create_graph)
    out = []
    for node in wrt:
        if node.id in gm:
            out.append(gm[node.id])
        else:
            zero = np.zeros_like(node.value)
            out.append(const(zero) if create_graph else zero)
    return out


def finite_diff_check(f: Callable[[Node], Node], x, h: float = 1e-6) -> float:
    """Max relative error between the tape gradient and central differences.

    The relative error of coordinate i is |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    x = np.array(x, dtype=np.float64)
    leaf = param(x)
    (analytic,) = grad(f(leaf), [leaf])
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    # no_grad is not used here: f may take inner gradients itself
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(const(xp.reshape(x.shape))).item()
        fm = f(const(xm.reshape(x.shape))).item()
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0

"""Reverse-mode automatic differentiation over dense numpy arrays.

Every trainable component in this package is built on the `Tensor` type
defined here. A Tensor wraps a row-major float32/float64 ndarray; applying
an operation to tensors that require gradients records a node in an
implicit acyclic graph (parent links plus a backward closure). Calling
`backward` on a scalar loss walks that graph once in reverse topological
order and accumulates gradients additively into `.grad`.

Values are treated as immutable after creation: no operation mutates an
input array, and a graph can only be walked once (a second `backward`
through the same nodes raises `GraphConsumedError`).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "backward",
    "grad_check",
    "GradCheckReport",
    "primitive_forward",
    "set_finite_checks",
    "no_grad",
    "ShapeError",
    "UnknownOpError",
    "NonFiniteError",
    "GraphConsumedError",
    "PRIMITIVES",
]

FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are not conformable for the requested op."""


class UnknownOpError(KeyError):
    """Op id is not one of the registered primitives."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while finite checks were enabled."""


class GraphConsumedError(RuntimeError):
    """backward() was called through nodes that were already freed."""


_finite_checks = True
_grad_enabled = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf screening of op outputs; returns the previous value."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


@contextmanager
def no_grad():
    """Suppress graph recording; forward values are computed identically."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._done = False

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph ------------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))


def tensor(data, dtype=np.float32) -> Tensor:
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not _finite_checks or arr.size == 0:
        return
    # min+max is NaN or Inf iff the array holds one; avoids a bool temporary
    probe = float(arr.min()) + float(arr.max())
    if not np.isfinite(probe):
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Wrap an op result; records the node only if a parent needs grads."""
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # grads are only ever rebound (never mutated in place), so the first
    # contribution can be stored without a defensive copy
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, params=None):
    """Backpropagate from a scalar loss.

    Gradients accumulate on every requires_grad tensor reachable from
    `loss`. When `params` is given, returns the list of their gradients,
    substituting zeros for parameters that did not participate.
    """
    if loss.size != 1:
        raise ShapeError("backward expects a scalar loss")
    if loss._done:
        raise GraphConsumedError("this graph was already walked")
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            if node._done:
                raise GraphConsumedError("this graph was already walked")
            node._backward(node.grad)
            node._backward = None
            node._parents = ()
        node._done = True
    if params is not None:
        return [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
        ]
    return None


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), back, "mul")


def neg(a: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _node(-a.data, (a,), back, "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * s)

    return _node(a.data * a.data.dtype.type(s), (a,), back, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def back(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            elif b.ndim == 1:
                gb = (np.swapaxes(a.data, -1, -2) @ g[..., None])[..., 0]
                gb = _unbroadcast(gb, b.shape)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _node(data, (a, b), back, "matmul")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _node(data, (a,), back, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), back, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), back, "transpose")


def concat(parts, axis: int) -> Tensor:
    parts = tuple(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                _accumulate(p, piece)

    return _node(data, parts, back, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), back, "broadcast_to")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accumulate(a, full)

    return _node(a.data[index].copy(), (a,), back, "slice_axis")


def take_rows(mat: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; gradients scatter-add back into rows."""
    if mat.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    idx = np.asarray(indices)
    data = mat.data[idx]

    def back(g):
        if mat.requires_grad:
            gm = np.zeros_like(mat.data)
            np.add.at(gm, idx.reshape(-1), g.reshape(-1, mat.shape[1]))
            _accumulate(mat, gm)

    return _node(data, (mat,), back, "take_rows")


def index_select_last(a: Tensor, perm: np.ndarray) -> Tensor:
    """Permute the last axis; `perm` must be a permutation."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g[..., inv])

    return _node(a.data[..., perm].copy(), (a,), back, "index_select_last")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - y * y))

    return _node(y, (a,), back, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * y * (1.0 - y))

    return _node(y, (a,), back, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * _sigmoid(x))

    return _node(y, (a,), back, "softplus")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * cdf

    def back(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            _accumulate(a, g * (cdf + x * pdf))

    return _node(y, (a,), back, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accumulate(a, (g - dot) * y)

    return _node(y, (a,), back, "softmax")


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (g - gm - y * gy))

    return _node(y, (a,), back, "layernorm")


def l2_normalize(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale vectors along the last axis to unit norm, guarded by eps."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    inv = 1.0 / (n + eps)
    y = x * inv

    def back(g):
        if a.requires_grad:
            n_safe = np.maximum(n, np.finfo(x.dtype).tiny)
            coef = (g * x).sum(axis=-1, keepdims=True) * inv * inv / n_safe
            _accumulate(a, g * inv - x * coef)

    return _node(y, (a,), back, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine of the angle between paired vectors along the last axis."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: {a.shape} vs {b.shape}")
    xa, xb = a.data, b.data
    na = np.sqrt((xa * xa).sum(axis=-1, keepdims=True)) + eps
    nb = np.sqrt((xb * xb).sum(axis=-1, keepdims=True)) + eps
    dot = (xa * xb).sum(axis=-1, keepdims=True)
    y = (dot / (na * nb))[..., 0]

    def back(g):
        gk = g[..., None]
        if a.requires_grad:
            _accumulate(a, gk * (xb / (na * nb) - xa * (dot / (na * na * na * nb))))
        if b.requires_grad:
            _accumulate(b, gk * (xa / (na * nb) - xb * (dot / (na * nb * nb * nb))))

    return _node(y, (a, b), back, "cosine_similarity")


def cross_entropy_soft(logits: Tensor, targets: Tensor) -> Tensor:
    """Per-row cross entropy between a soft target and softmax(logits).

    Targets are treated as constants; each row of `targets` must sum to 1.
    Returns one loss value per leading index of `logits`.
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"cross_entropy_soft: {logits.shape} vs {targets.shape}")
    x = logits.data
    q = targets.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + m
    y = (q * (lse - x)).sum(axis=-1)

    def back(g):
        if logits.requires_grad:
            p = np.exp(x - lse)
            _accumulate(logits, g[..., None] * (p - q))

    return _node(y, (logits, targets), back, "cross_entropy_soft")


def cast(a: Tensor, dtype) -> Tensor:
    """Change dtype; gradients are cast back to the input dtype."""
    dtype = np.dtype(dtype)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g.astype(a.data.dtype))

    return _node(a.data.astype(dtype), (a,), back, "cast")


def cross_entropy_indices(logits: Tensor, indices: np.ndarray) -> Tensor:
    """Per-row cross entropy against integer class targets.

    Equivalent to cross_entropy_soft with one-hot targets but never
    materializes the one-hot array, which matters for large vocabularies.
    """
    idx = np.asarray(indices)
    if idx.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {idx.shape} vs logits {logits.shape}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(x, idx[..., None].astype(np.int64), axis=-1)
    y = (lse - picked)[..., 0]

    def back(g):
        if logits.requires_grad:
            grad = np.exp(x - lse) * g[..., None]
            np.add.at(
                grad.reshape(-1, x.shape[-1]),
                (np.arange(idx.size), idx.reshape(-1).astype(np.int64)),
                -g.reshape(-1),
            )
            _accumulate(logits, grad)

    return _node(y, (logits,), back, "cross_entropy_indices")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Scalar mean of elementwise squared differences."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    y = np.asarray((diff * diff).mean(), dtype=a.dtype)
    c = 2.0 / max(diff.size, 1)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * c * diff)
        if b.requires_grad:
            _accumulate(b, -g * c * diff)

    return _node(y, (a, b), back, "mse")


# ---------------------------------------------------------------------------
# spatial primitives (NHWC layout)
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution; x is (B, H, W, Cin), w is (kh, kw, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x (B,H,W,Cin) and w (kh,kw,Cin,Cout)")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d channels: x has {x.shape[3]}, w wants {w.shape[2]}")
    b, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.empty((b, ho, wo, kh * kw * cin), dtype=x.dtype)
    k = 0
    for dy in range(kh):
        for dx in range(kw):
            cols[..., k * cin : (k + 1) * cin] = xp[
                :, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride, :
            ]
            k += 1
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat

    def back(g):
        if w.requires_grad:
            gw = cols.reshape(-1, kh * kw * cin).T @ g.reshape(-1, cout)
            _accumulate(w, gw.reshape(w.shape))
        if x.requires_grad:
            gcols = g @ wmat.T
            gxp = np.zeros_like(xp)
            k2 = 0
            for dy in range(kh):
                for dx in range(kw):
                    gxp[
                        :,
                        dy : dy + ho * stride : stride,
                        dx : dx + wo * stride : stride,
                        :,
                    ] += gcols[..., k2 * cin : (k2 + 1) * cin]
                    k2 += 1
            gx = gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp
            _accumulate(x, gx)

    return _node(out, (x, w), back, "conv2d")


def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Per-axis resampling matrix (n_out, n_in), rows summing to 1.

    Upsampling interpolates bilinearly at half-pixel centers; downsampling
    averages with exact fractional cell coverage so that shrinking to a
    single cell is the plain mean.
    """
    w = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out >= n_in:
        for i in range(n_out):
            src = (i + 0.5) * n_in / n_out - 0.5
            j0 = int(np.floor(src))
            frac = src - j0
            j0c = min(max(j0, 0), n_in - 1)
            j1c = min(max(j0 + 1, 0), n_in - 1)
            w[i, j0c] += 1.0 - frac
            w[i, j1c] += frac
    else:
        ratio = n_in / n_out
        for i in range(n_out):
            lo = i * ratio
            hi = (i + 1) * ratio
            j = int(np.floor(lo))
            while j < hi and j < n_in:
                cover = min(hi, j + 1) - max(lo, j)
                if cover > 0:
                    w[i, j] += cover / ratio
                j += 1
    return w


_resize_cache: dict = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).name)
    m = _resize_cache.get(key)
    if m is None:
        m = _resize_weights(n_in, n_out).astype(dtype)
        _resize_cache[key] = m
    return m


def bilinear_resize(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Resample the two spatial axes of (..., H, W, C) to (h_out, w_out)."""
    if x.ndim < 3:
        raise ShapeError("bilinear_resize expects (..., H, W, C)")
    h, w, _ = x.shape[-3:]
    if (h, w) == (h_out, w_out):
        return x
    mh = _resize_matrix(h, h_out, x.dtype)
    mw = _resize_matrix(w, w_out, x.dtype)
    data = np.einsum("oh,...hwc->...owc", mh, x.data)
    data = np.einsum("ow,...hwc->...hoc", mw, data)

    def back(g):
        if x.requires_grad:
            gx = np.einsum("ow,...hoc->...hwc", mw, g)
            gx = np.einsum("oh,...owc->...hwc", mh, gx)
            _accumulate(x, gx)

    return _node(np.ascontiguousarray(data), (x,), back, "bilinear_resize")


# ---------------------------------------------------------------------------
# op registry and generic dispatch
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "gelu": gelu,
    "layernorm": layernorm,
    "softmax": softmax,
    "conv2d": conv2d,
    "bilinear_resize": bilinear_resize,
    "l2_normalize": l2_normalize,
    "cosine_similarity": cosine_similarity,
    "cross_entropy_soft": cross_entropy_soft,
    "cross_entropy_indices": cross_entropy_indices,
    "mse": mse,
    "cast": cast,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "broadcast_to": broadcast_to,
    "slice_axis": slice_axis,
    "take_rows": take_rows,
    "index_select_last": index_select_last,
}


def primitive_forward(op_id: str, inputs, attrs: dict | None = None) -> Tensor:
    """Apply a primitive by name to already-constructed tensors."""
    try:
        fn = PRIMITIVES[op_id]
    except KeyError:
        raise UnknownOpError(op_id) from None
    attrs = attrs or {}
    if op_id == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(fn, point, tol: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central
    finite differences at a given point.

    `point` is a sequence of float64 arrays; `fn` receives one Tensor per
    array and must return a scalar Tensor. Relative error per element is
    |a - n| / max(|a|, |n|, 1).
    """
    arrays = [np.asarray(p, dtype=np.float64) for p in point]
    inputs = [parameter(a.copy()) for a in arrays]
    out = fn(*inputs)
    if out.size != 1:
        raise ShapeError("grad_check requires a scalar-valued fn")
    analytic = backward(out, inputs)

    def value_at(idx, flat):
        probe = [
            Tensor(flat.reshape(arrays[i].shape)) if i == idx else Tensor(arrays[i])
            for i in range(len(arrays))
        ]
        return float(fn(*probe).data)

    errs = []
    for i, a in enumerate(arrays):
        num = np.zeros(a.size, dtype=np.float64)
        base = a.reshape(-1)
        for j in range(a.size):
            fplus = base.copy()
            fplus[j] += h
            fminus = base.copy()
            fminus[j] -= h
            num[j] = (value_at(i, fplus) - value_at(i, fminus)) / (2.0 * h)
        ana = analytic[i].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1.0)
        errs.append(float(np.max(np.abs(ana - num) / denom)) if a.size else 0.0)
    worst = max(errs) if errs else 0.0
    return GradCheckReport(max_rel_err=worst, tol=tol, per_input=errs)

"""Neural-network building blocks on top of the autodiff engine.

Spatial data uses channels-last layout throughout: token grids are
(H, W, C) and batches of them (B, H, W, C); token sequences are (B, T, C).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class providing parameter discovery and (de)serialization.

    Subclasses assign Tensors, Modules, or lists of either to attributes;
    discovery walks attributes in definition order, so parameter order is
    deterministic for a fixed architecture.
    """

    def named_params(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield key, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def params(self):
        return [p for _, p in self.named_params()]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_modules(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{key}.{i}.")

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_params())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def set_trainable(self, flag: bool) -> None:
        for _, p in _all_tensors(self):
            p.requires_grad = flag

    def to_dtype(self, dtype) -> "Module":
        for _, p in _all_tensors(self):
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for _, p in _all_tensors(self):
            p.grad = None


def _all_tensors(module: Module, prefix: str = ""):
    """Like named_params but includes frozen tensors."""
    for name, value in vars(module).items():
        key = f"{prefix}{name}"
        if isinstance(value, Tensor):
            yield key, value
        elif isinstance(value, Module):
            yield from _all_tensors(value, f"{key}.")
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield from _all_tensors(item, f"{key}.{i}.")
                elif isinstance(item, Tensor):
                    yield f"{key}.{i}", item


class Linear(Module):
    def __init__(self, d_in, d_out, rng, std=None, bias=True, zero_init=False, dtype=np.float32):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            if std is None:
                std = 1.0 / np.sqrt(d_in)
            w = rng.normal(0.0, std, size=(d_in, d_out))
        self.weight = ad.parameter(w.astype(dtype))
        self.bias = ad.parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.gamma = ad.parameter(np.ones(dim, dtype=dtype))
        self.beta = ad.parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layernorm(x, eps=self.eps), self.gamma), self.beta)


class Conv2d(Module):
    """Channels-last convolution with square kernel."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, pad=0, identity_init=False, dtype=np.float32):
        if identity_init:
            if c_in != c_out:
                raise ValueError("identity init needs matching channels")
            w = np.zeros((kernel, kernel, c_in, c_out))
            w[kernel // 2, kernel // 2] = np.eye(c_in)
        else:
            std = 1.0 / np.sqrt(kernel * kernel * c_in)
            w = rng.normal(0.0, std, size=(kernel, kernel, c_in, c_out))
        self.weight = ad.parameter(w.astype(dtype))
        self.bias = ad.parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.conv2d(x, self.weight, stride=self.stride, pad=self.pad), self.bias)


# ---------------------------------------------------------------------------
# rotary position tables for 2-D coordinates
# ---------------------------------------------------------------------------


def rope2d_tables(coords: np.ndarray, head_dim: int, base: float = 10000.0, dtype=np.float32):
    """Per-position rotation tables for 2-D rotary embedding.

    The head dimension is split in half: the first half rotates with the
    first coordinate, the second half with the second. Within each half,
    consecutive pairs rotate at geometrically spaced frequencies. Returns
    (cos, sin, perm, sign) where cos/sin have shape coords.shape[:-1] +
    (head_dim,), and `perm`/`sign` implement the pair rotation
    x * cos + sign * x[..., perm] * sin.
    """
    if head_dim % 4 != 0:
        raise ad.ShapeError("rope2d needs head_dim divisible by 4")
    coords = np.asarray(coords, dtype=np.float64)
    quarter = head_dim // 4
    freqs = base ** (-np.arange(quarter, dtype=np.float64) / quarter)
    ang_r = coords[..., 0:1] * freqs
    ang_c = coords[..., 1:2] * freqs
    angles = np.concatenate([ang_r, ang_c], axis=-1)
    cos = np.repeat(np.cos(angles), 2, axis=-1).astype(dtype)
    sin = np.repeat(np.sin(angles), 2, axis=-1).astype(dtype)
    perm = np.arange(head_dim)
    perm = perm.reshape(-1, 2)[:, ::-1].reshape(-1)
    sign = np.tile([-1.0, 1.0], head_dim // 2).astype(dtype)
    return cos, sin, perm, sign


def rope2d_rotate(x: Tensor, tables) -> Tensor:
    cos, sin, perm, sign = tables
    rotated = ad.mul(ad.index_select_last(x, perm), Tensor(sign * sin))
    return ad.add(ad.mul(x, Tensor(cos)), rotated)


class Attention(Module):
    """Multi-head self-attention with optional 2-D rotary positions."""

    def __init__(self, width, heads, rng, dtype=np.float32):
        if width % heads != 0:
            raise ValueError("width must divide evenly into heads")
        self.wq = Linear(width, width, rng, dtype=dtype)
        self.wk = Linear(width, width, rng, dtype=dtype)
        self.wv = Linear(width, width, rng, dtype=dtype)
        self.proj = Linear(width, width, rng, dtype=dtype)
        self.heads = heads
        self.head_dim = width // heads

    def __call__(self, x: Tensor, rope_tables=None) -> Tensor:
        b, t, w = x.shape

        def split(h: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(h, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        if rope_tables is not None:
            q = rope2d_rotate(q, rope_tables)
            k = rope2d_rotate(k, rope_tables)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        return self.proj(ad.reshape(ctx, (b, t, w)))


class Mlp(Module):
    def __init__(self, width, rng, expand=4, dtype=np.float32):
        self.fc1 = Linear(width, expand * width, rng, dtype=dtype)
        self.fc2 = Linear(expand * width, width, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, width, heads, rng, dtype=np.float32):
        self.ln1 = LayerNorm(width, dtype=dtype)
        self.attn = Attention(width, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(width, dtype=dtype)
        self.mlp = Mlp(width, rng, dtype=dtype)

    def __call__(self, x: Tensor, rope_tables=None) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x), rope_tables))
        return ad.add(x, self.mlp(self.ln2(x)))

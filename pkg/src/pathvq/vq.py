"""Single-scale vector quantization of spatial tokens.

The codec maps each token grid through a small MLP encoder into a
low-dimensional latent, snaps every latent to its nearest codebook entry
under l2-normalized Euclidean distance, and reconstructs the original
tokens from the selected code vectors with a transformer decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rng_mod
from .autodiff import Tensor
from .layers import Linear, Module, TransformerBlock

L2_EPS = 1e-8


def l2n(x: np.ndarray, eps: float = L2_EPS) -> np.ndarray:
    """Plain-array counterpart of the l2_normalize primitive."""
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / (n + eps)


class Codebook(Module):
    """C learnable code vectors of dimension d with usage tracking.

    `usage` counts assignments since the last reset; `ema` keeps an
    exponential moving average of per-step assignment counts and is what
    dead-code reinitialization looks at.
    """

    def __init__(self, size: int, dim: int, rng, ema_decay: float = 0.99, dtype=np.float32):
        if size < 1:
            raise ValueError("codebook must have at least one entry")
        if size > 65536:
            raise ValueError("codebook indices must fit in u16")
        self.vectors = ad.parameter(
            rng.normal(0.0, 1.0 / np.sqrt(dim), size=(size, dim)).astype(dtype)
        )
        self.usage = np.zeros(size, dtype=np.int64)
        self.ema = np.zeros(size, dtype=np.float64)
        self.ema_decay = ema_decay
        self._recent = np.zeros((0, dim), dtype=dtype)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def reset_usage(self) -> None:
        self.usage[:] = 0

    def update_ema(self, counts: np.ndarray) -> None:
        self.ema *= self.ema_decay
        self.ema += (1.0 - self.ema_decay) * counts

    def observe_latents(self, latents: np.ndarray, cap: int = 4096) -> None:
        """Keep a rolling pool of recent raw latents for dead-code reinit."""
        flat = latents.reshape(-1, self.dim).astype(self.vectors.dtype)
        if len(flat) >= cap:
            self._recent = flat[-cap:].copy()
        else:
            self._recent = np.concatenate([self._recent, flat])[-cap:]

    def lookup(self, indices: np.ndarray) -> np.ndarray:
        """Raw code vectors for an index grid; output shape idx.shape + (d,)."""
        idx = np.asarray(indices)
        if idx.size and int(idx.max()) >= self.size:
            raise IndexError(f"code index {int(idx.max())} out of range (C={self.size})")
        return self.vectors.data[idx.astype(np.int64)]


def quantize(codebook: Codebook, latents, update_usage: bool = True) -> np.ndarray:
    """Assign each latent vector to its nearest l2-normalized code.

    Squared Euclidean distances between the normalized vectors are
    evaluated in float64 via |e|^2 - 2 e.v + |v|^2; ties break toward the
    lowest index (numpy argmin keeps the first minimum). Returns uint16
    indices shaped like the latent grid.
    """
    arr = latents.data if isinstance(latents, Tensor) else np.asarray(latents)
    if arr.shape[-1] != codebook.dim:
        raise ad.ShapeError(f"latent dim {arr.shape[-1]} != codebook dim {codebook.dim}")
    flat = l2n(arr.reshape(-1, codebook.dim).astype(np.float64))
    codes = l2n(codebook.vectors.data.astype(np.float64))
    x2 = (flat * flat).sum(axis=1)[:, None]
    v2 = (codes * codes).sum(axis=1)[None, :]
    out = np.empty(len(flat), dtype=np.int64)
    chunk = max(1, int(4_000_000 // max(codebook.size, 1)))
    for start in range(0, len(flat), chunk):
        block = slice(start, start + len(flat[start : start + chunk]))
        d2 = x2[block] + v2 - 2.0 * (flat[block] @ codes.T)
        out[block] = d2.argmin(axis=1)
    if update_usage and out.size:
        np.add.at(codebook.usage, out, 1)
    return out.astype(np.uint16).reshape(arr.shape[:-1])


def nearest_code_distances(codebook: Codebook, latents) -> np.ndarray:
    """Distance from each normalized latent to its assigned code."""
    arr = latents.data if isinstance(latents, Tensor) else np.asarray(latents)
    flat = l2n(arr.reshape(-1, codebook.dim).astype(np.float64))
    codes = l2n(codebook.vectors.data.astype(np.float64))
    idx = quantize(codebook, arr, update_usage=False).reshape(-1).astype(np.int64)
    return np.sqrt(((flat - codes[idx]) ** 2).sum(axis=-1))


class VqEncoder(Module):
    """Two linear layers with tanh in between, mapping tokens from D to d."""

    def __init__(self, dim: int, hidden: int, code_dim: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, code_dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.tanh(self.fc1(x)))


class VqDecoder(Module):
    """Transformer decoder from code-space grids back to token grids.

    The stem lifts code vectors to the working width, learned row/column
    position embeddings break the permutation symmetry of the blocks, and
    a linear head projects back to the original token dimension.
    """

    def __init__(self, code_dim, dim, grid, rng, width=768, blocks=3, heads=12, dtype=np.float32):
        self.stem = Linear(code_dim, width, rng, dtype=dtype)
        self.pos_row = ad.parameter(rng.normal(0.0, 0.02, size=(grid, 1, width)).astype(dtype))
        self.pos_col = ad.parameter(rng.normal(0.0, 0.02, size=(1, grid, width)).astype(dtype))
        self.blocks = [TransformerBlock(width, heads, rng, dtype=dtype) for _ in range(blocks)]
        self.head = Linear(width, dim, rng, dtype=dtype)
        self.grid = grid
        self.width = width

    def __call__(self, latents: Tensor) -> Tensor:
        b, p, _, _ = latents.shape
        x = self.stem(latents)
        x = ad.add(x, ad.add(self.pos_row, self.pos_col))
        x = ad.reshape(x, (b, p * p, self.width))
        for block in self.blocks:
            x = block(x)
        x = self.head(x)
        return ad.reshape(x, (b, p, p, x.shape[-1]))


def decode_indices(decoder: VqDecoder, codebook: Codebook, indices: np.ndarray) -> np.ndarray:
    """Frozen decode of a (B, p, p) index grid to (B, p, p, D) tokens."""
    codes = codebook.lookup(indices)
    with ad.no_grad():
        return decoder(Tensor(codes)).data


@dataclass
class CodebookStats:
    perplexity: float
    dead_count: int
    usage: np.ndarray


def codebook_stats(codebook: Codebook) -> CodebookStats:
    total = int(codebook.usage.sum())
    if total == 0:
        raise ValueError("no assignments since the last usage reset")
    probs = codebook.usage / total
    nz = probs[probs > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return CodebookStats(
        perplexity=float(np.exp(entropy)),
        dead_count=int((codebook.usage == 0).sum()),
        usage=codebook.usage.copy(),
    )


def reinit_dead_codes(codebook: Codebook, recent_latents, rng, threshold: float | None = None) -> int:
    """Replace codes whose EMA usage fell below threshold with recent latents.

    The default threshold is 1% of the mean EMA count (with a tiny
    absolute floor so a never-used codebook counts as fully dead).
    """
    if threshold is None:
        threshold = max(0.01 * float(codebook.ema.mean()), 1e-8)
    recent = np.asarray(recent_latents, dtype=codebook.vectors.dtype).reshape(-1, codebook.dim)
    dead = np.flatnonzero(codebook.ema < threshold)
    if dead.size == 0 or len(recent) == 0:
        return 0
    picks = rng.integers(0, len(recent), size=dead.size)
    vectors = codebook.vectors.data.copy()
    vectors[dead] = recent[picks]
    codebook.vectors.data = vectors
    codebook.ema[dead] = float(codebook.ema.mean()) if codebook.ema.max() > 0 else 1.0
    return int(dead.size)


def make_rng(seed: int, *stream):
    return rng_mod.generator(seed, *stream)

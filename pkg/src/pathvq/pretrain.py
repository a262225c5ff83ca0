"""Slide-level self-supervised pretraining against a frozen tokenizer.

Two objectives over 16 x 16 tile regions:

* token-frequency matching: a gated-attention MIL model predicts the
  normalized histogram of the region's tile-level tokens (soft-target
  cross entropy);
* masked tile modeling: a transformer with 2-D rotary positions sees a
  region whose masked tiles are replaced by a learned embedding and
  classifies each masked tile's token index.

Both consume per-tile features produced by the tokenizer's convolutional
adapter from dequantized latents; the tokenizer itself stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rng_mod
from .autodiff import Tensor
from .layers import LayerNorm, Linear, Module, TransformerBlock, rope2d_rotate, rope2d_tables
from .msvq import Tokenizer, tile_tokens
from .optim import AdamW, WarmupCosine

REGION_SIDE = 16
REGION_TILES = REGION_SIDE * REGION_SIDE


# ---------------------------------------------------------------------------
# region bags and targets
# ---------------------------------------------------------------------------


@dataclass
class RegionBag:
    """One region's per-tile features, grid coords, and token targets."""

    features: np.ndarray  # (256, F)
    coords: np.ndarray  # (256, 2) row, col
    tile_tokens: np.ndarray  # (256,) uint16

    def __post_init__(self):
        if len(self.features) != REGION_TILES:
            raise ValueError(f"a region holds {REGION_TILES} tiles, got {len(self.features)}")
        coords = np.asarray(self.coords)
        if len(np.unique(coords, axis=0)) != REGION_TILES:
            raise ValueError("region coords must be unique")
        self.coords = coords


def region_soft_target(tile_token_ids: np.ndarray, vocab: int) -> np.ndarray:
    """Normalized token histogram of a region, a length-C probability vector."""
    ids = np.asarray(tile_token_ids).reshape(-1)
    if ids.size == 0:
        raise ValueError("region has no tile tokens")
    return np.bincount(ids.astype(np.int64), minlength=vocab) / ids.size


@dataclass
class MaskSpec:
    positions: np.ndarray  # distinct tile slots
    n_tiles: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if len(np.unique(self.positions)) != len(self.positions):
            raise ValueError("mask positions must be distinct")

    def bool_mask(self) -> np.ndarray:
        m = np.zeros(self.n_tiles, dtype=bool)
        m[self.positions] = True
        return m


def sample_mask(rng, n_tiles: int = REGION_TILES, n_masked: int = 96) -> MaskSpec:
    """Uniform without-replacement mask over tile slots."""
    if n_masked > n_tiles:
        raise ValueError(f"cannot mask {n_masked} of {n_tiles} tiles")
    return MaskSpec(positions=rng.choice(n_tiles, size=n_masked, replace=False), n_tiles=n_tiles)


def rope2d_apply(x, coords, base: float = 10000.0):
    """Rotate vectors by angles proportional to their 2-D coordinates.

    `x` is (..., T, dim) with dim divisible by 4; `coords` is (T, 2).
    Relative attention scores <rope(q, m), rope(k, n)> depend only on
    m - n, and the rotation preserves vector norms.
    """
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    tables = rope2d_tables(coords, t.shape[-1], base=base, dtype=t.dtype)
    return rope2d_rotate(t, tables)


# ---------------------------------------------------------------------------
# gated-attention MIL
# ---------------------------------------------------------------------------


class AbmilModel(Module):
    """Gated attention pooling over a bag, then a linear classifier.

    Internals run in float64 and the returned probabilities are rounded
    to float32, so reordering the bag cannot perturb the output: the
    permutation-induced rounding noise is far below float32 resolution.
    """

    def __init__(self, in_dim: int, n_out: int, attn_hidden: int = 128, seed: int = 0):
        rng = rng_mod.generator(seed, "abmil")
        dt = np.float64
        self.gate_v = Linear(in_dim, attn_hidden, rng, dtype=dt)
        self.gate_u = Linear(in_dim, attn_hidden, rng, dtype=dt)
        self.score = Linear(attn_hidden, 1, rng, bias=False, dtype=dt)
        self.classifier = Linear(in_dim, n_out, rng, zero_init=True, dtype=dt)
        self.in_dim = in_dim
        self.n_out = n_out

    def logits(self, bags: Tensor):
        """bags: (B, N, F) float64. Returns (logits (B, C), attention (B, N))."""
        if bags.ndim != 3:
            raise ad.ShapeError("expected (B, N, F) bag features")
        if bags.shape[1] == 0:
            raise ValueError("empty bag")
        gates = ad.mul(ad.tanh(self.gate_v(bags)), ad.sigmoid(self.gate_u(bags)))
        scores = ad.transpose(self.score(gates), (0, 2, 1))  # (B, 1, N)
        attn = ad.softmax(scores, axis=-1)
        pooled = ad.reshape(ad.matmul(attn, bags), (bags.shape[0], self.in_dim))
        return self.classifier(pooled), ad.reshape(attn, (bags.shape[0], bags.shape[1]))

    def __call__(self, features: np.ndarray):
        """Frozen forward: probabilities (float32) and attention weights."""
        arr = np.asarray(features, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        with ad.no_grad():
            logits, attn = self.logits(Tensor(arr))
            probs = ad.softmax(logits, axis=-1)
        return probs.data.astype(np.float32), attn.data.astype(np.float32)


def abmil_forward(model: AbmilModel, region_features: np.ndarray):
    probs, attn = model(region_features)
    if np.asarray(region_features).ndim == 2:
        return probs[0], attn[0]
    return probs, attn


def abmil_ssl_step(model: AbmilModel, features: np.ndarray, soft_targets: np.ndarray, opt: AdamW) -> float:
    """Soft-target cross entropy on a batch of regions; returns mean loss."""
    x = Tensor(np.asarray(features, dtype=np.float64))
    q = Tensor(np.asarray(soft_targets, dtype=np.float64))
    logits, _ = model.logits(x)
    loss = ad.reduce_mean(ad.cross_entropy_soft(logits, q))
    if not np.isfinite(loss.data):
        raise ad.NonFiniteError("SSL loss is not finite")
    opt.zero_grad()
    grads = ad.backward(loss, opt.params)
    opt.step(grads)
    return float(loss.data)


# ---------------------------------------------------------------------------
# masked tile modeling
# ---------------------------------------------------------------------------


class WsiTransformer(Module):
    """Transformer over tile features with 2-D rotary positions.

    Carries a learned mask embedding for corrupted inputs and a class
    token for bag-level readout; the classifier head is zero-initialized
    so an untrained model scores every vocabulary entry equally.
    """

    def __init__(
        self,
        in_dim: int,
        n_out: int,
        width: int = 512,
        heads: int = 8,
        depth: int = 6,
        seed: int = 0,
        rope_base: float = 100.0,
        dtype=np.float32,
    ):
        rng = rng_mod.generator(seed, "wsi-transformer")
        self.in_proj = Linear(in_dim, width, rng, dtype=dtype)
        self.mask_embed = ad.parameter(rng.normal(0.0, 0.02, size=(width,)).astype(dtype))
        self.cls_token = ad.parameter(rng.normal(0.0, 0.02, size=(1, 1, width)).astype(dtype))
        self.blocks = [TransformerBlock(width, heads, rng, dtype=dtype) for _ in range(depth)]
        self.ln_f = LayerNorm(width, dtype=dtype)
        self.head = Linear(width, n_out, rng, zero_init=True, dtype=dtype)
        self.width = width
        self.heads = heads
        self.in_dim = in_dim
        self.n_out = n_out
        self.rope_base = rope_base
        self.dtype = np.dtype(dtype)

    def _tables(self, coords: np.ndarray):
        return rope2d_tables(
            np.asarray(coords, dtype=np.float64),
            self.width // self.heads,
            base=self.rope_base,
            dtype=self.dtype,
        )

    def token_logits(self, features: Tensor, coords: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Per-tile logits (B, T, n_out); masked slots use the mask embedding."""
        x = self.in_proj(features)
        if mask is not None:
            keep = Tensor((~mask[..., None]).astype(self.dtype))
            drop = Tensor(mask[..., None].astype(self.dtype))
            x = ad.add(ad.mul(x, keep), ad.mul(ad.broadcast_to(self.mask_embed, x.shape), drop))
        tables = self._tables(coords)
        for block in self.blocks:
            x = block(x, tables)
        return self.head(self.ln_f(x))

    def bag_logits(self, features: Tensor, coords: np.ndarray) -> Tensor:
        """Class-token readout for bag-level prediction, (B, n_out)."""
        b = features.shape[0]
        x = self.in_proj(features)
        cls = ad.broadcast_to(self.cls_token, (b, 1, self.width))
        x = ad.concat([cls, x], axis=1)
        coords_full = np.concatenate([np.zeros((1, 2)), np.asarray(coords, dtype=np.float64)])
        tables = self._tables(coords_full)
        for block in self.blocks:
            x = block(x, tables)
        readout = ad.reshape(slice_first(x), (b, self.width))
        return self.head(self.ln_f(readout))


def slice_first(x: Tensor) -> Tensor:
    return ad.slice_axis(x, 1, 0, 1)


@dataclass
class MimStepStats:
    loss: float
    masked_accuracy: float


def mim_loss(model: WsiTransformer, features, coords, targets, masks):
    """Cross entropy over the vocabulary at masked positions only.

    `masks` is a (B, T) boolean array; unmasked positions contribute
    nothing, so their logits receive exactly zero gradient.
    """
    feats = Tensor(np.asarray(features, dtype=model.dtype))
    masks = np.asarray(masks, dtype=bool)
    n_masked = int(masks.sum())
    logits = model.token_logits(feats, coords, mask=masks)
    if n_masked == 0:
        return ad.scale(ad.reduce_sum(logits), 0.0), logits, 0.0
    ce = ad.cross_entropy_indices(logits, np.asarray(targets, dtype=np.int64))
    loss = ad.scale(ad.reduce_sum(ad.mul(ce, Tensor(masks.astype(model.dtype)))), 1.0 / n_masked)
    pred = logits.data.argmax(axis=-1)
    acc = float((pred[masks] == np.asarray(targets)[masks]).mean())
    return loss, logits, acc


def mim_ssl_step(model: WsiTransformer, features, coords, targets, masks, opt: AdamW) -> MimStepStats:
    loss, _, acc = mim_loss(model, features, coords, targets, masks)
    if not np.isfinite(loss.data):
        raise ad.NonFiniteError("masked-modeling loss is not finite")
    if float(loss.data) != 0.0 or np.asarray(masks).sum() > 0:
        opt.zero_grad()
        grads = ad.backward(loss, opt.params)
        opt.step(grads)
    return MimStepStats(loss=float(loss.data), masked_accuracy=acc)


# ---------------------------------------------------------------------------
# dataset assembly and epoch loops
# ---------------------------------------------------------------------------


@dataclass
class RegionDataset:
    features: np.ndarray  # (R, 256, F)
    coords: np.ndarray  # (256, 2) shared grid coords
    tile_targets: np.ndarray  # (R, 256) int64
    soft_targets: np.ndarray  # (R, C) float64
    vocab: int


def grid_coords(side: int = REGION_SIDE) -> np.ndarray:
    rows, cols = np.mgrid[0:side, 0:side]
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1).astype(np.int64)


def build_region_dataset(tok: Tokenizer, stream, target_scale: str = "tile") -> RegionDataset:
    """Re-embed a compressed stream into SSL training arrays.

    The stream must hold whole regions: consecutive blocks of 256 tiles.
    Targets come from the coarsest scale ("tile", default) or from the
    normalized histogram of finest-scale indices ("patch", soft targets
    only).
    """
    if tok.adapter is None:
        raise ValueError("tokenizer has no aligned adapter; run adapter alignment first")
    n = len(stream)
    if n == 0 or n % REGION_TILES:
        raise ValueError(f"stream length {n} is not a whole number of {REGION_TILES}-tile regions")
    if target_scale not in ("tile", "patch"):
        raise ValueError(f"unknown target scale {target_scale!r}")
    vocab = tok.cfg.codebook_size
    regions = n // REGION_TILES
    feats = []
    tile_t = np.zeros((regions, REGION_TILES), dtype=np.int64)
    soft = np.zeros((regions, vocab), dtype=np.float64)
    for r in range(regions):
        sel = slice(r * REGION_TILES, (r + 1) * REGION_TILES)
        maps = stream.token_maps(sel)
        latents = tok.reconstruct_latent(maps)
        with ad.no_grad():
            feats.append(tok.adapter(Tensor(latents)).data)
        tile_t[r] = tile_tokens(maps).astype(np.int64)
        if target_scale == "tile":
            soft[r] = region_soft_target(tile_t[r], vocab)
        else:
            soft[r] = region_soft_target(maps.maps[-1].reshape(-1), vocab)
    return RegionDataset(
        features=np.stack(feats),
        coords=grid_coords(),
        tile_targets=tile_t,
        soft_targets=soft,
        vocab=vocab,
    )


@dataclass
class SslTrainerConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-4
    warmup_epochs: int = 2
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.98)
    mask_count: int = 96
    seed: int = 0


def _make_optimizer(params, cfg: SslTrainerConfig, steps_per_epoch: int) -> AdamW:
    schedule = WarmupCosine(
        peak=cfg.lr,
        total_steps=cfg.epochs * steps_per_epoch,
        warmup_steps=cfg.warmup_epochs * steps_per_epoch,
        floor=cfg.min_lr,
    )
    return AdamW(params, lr=schedule, betas=cfg.betas, weight_decay=cfg.weight_decay)


def train_abmil_ssl(model: AbmilModel, data: RegionDataset, cfg: SslTrainerConfig, log=None) -> list:
    n = len(data.features)
    steps = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    opt = _make_optimizer(model.params(), cfg, steps)
    q = data.soft_targets
    nz_entropy = np.array([-(row[row > 0] * np.log(row[row > 0])).sum() for row in q])
    history = []
    for epoch in range(cfg.epochs):
        order = rng_mod.generator(cfg.seed, "abmil-order", epoch).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            losses.append(abmil_ssl_step(model, data.features[sel], q[sel], opt))
        with ad.no_grad():
            _, attn = model(data.features[: min(n, 64)].astype(np.float64))
        att_entropy = float(-(attn * np.log(np.maximum(attn, 1e-12))).sum(axis=-1).mean())
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "entropy_gap": float(np.mean(losses) - nz_entropy.mean()),
            "attention_entropy": att_entropy,
        }
        history.append(row)
        if log:
            log(row)
    return history


def train_mim(model: WsiTransformer, data: RegionDataset, cfg: SslTrainerConfig, log=None) -> list:
    n = len(data.features)
    steps = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    opt = _make_optimizer(model.params(), cfg, steps)
    history = []
    for epoch in range(cfg.epochs):
        gen = rng_mod.generator(cfg.seed, "mim-order", epoch)
        order = gen.permutation(n)
        stats = []
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            masks = np.stack(
                [
                    sample_mask(
                        rng_mod.generator(cfg.seed, "mask", epoch, int(r)), REGION_TILES, cfg.mask_count
                    ).bool_mask()
                    for r in sel
                ]
            )
            stats.append(
                mim_ssl_step(model, data.features[sel], data.coords, data.tile_targets[sel], masks, opt)
            )
        row = {
            "epoch": epoch,
            "loss": float(np.mean([s.loss for s in stats])),
            "masked_accuracy": float(np.mean([s.masked_accuracy for s in stats])),
        }
        history.append(row)
        if log:
            log(row)
    return history

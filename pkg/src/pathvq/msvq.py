"""Multi-scale residual vector quantization over a shared codebook.

A tile's encoder latent is quantized at a ladder of grid resolutions.
At each scale the current residual is resampled down, snapped to the
shared codebook, the selected codes are resampled back up to the full
grid, passed through a learnable 3x3 smoothing convolution, and
subtracted from the residual before the next scale. A one-entry ladder
at full resolution therefore reduces to plain per-token VQ, and a
one-entry ladder at 1x1 quantizes the mean-pooled latent.

The smoother of the full-resolution scale is fixed to the identity: that
scale involves no resampling, so there are no artifacts to repair, and
keeping it fixed makes the single-scale ladder behave exactly like the
plain quantizer during training as well.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import rng as rng_mod
from .autodiff import Tensor
from .layers import Conv2d, Module
from .optim import AdamW, WarmupCosine
from .tiles import TileST
from .vq import Codebook, VqDecoder, VqEncoder, l2n, quantize, reinit_dead_codes


@dataclass(frozen=True)
class TokenizerConfig:
    """Geometry and architecture of a tokenizer; defaults are full scale."""

    dim: int = 1024
    grid: int = 14
    code_dim: int = 16
    codebook_size: int = 8192
    enc_hidden: int = 512
    dec_width: int = 768
    dec_blocks: int = 3
    dec_heads: int = 12
    scales: tuple = (1, 2, 4, 7, 14)
    beta: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        areas = [s * s for s in self.scales]
        if any(b <= a for a, b in zip(areas, areas[1:])):
            raise ValueError(f"scale areas must strictly increase: {self.scales}")
        if self.scales[-1] != self.grid:
            raise ValueError(f"final scale {self.scales[-1]} must equal grid {self.grid}")

    @property
    def schedule(self) -> tuple:
        return tuple((s, s) for s in self.scales)

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    def single_scale(self) -> "TokenizerConfig":
        return replace(self, scales=(self.grid,))


@dataclass
class TokenMaps:
    """Per-scale index grids for one batch of tiles (coarsest first)."""

    maps: list
    schedule: tuple

    def __post_init__(self):
        if len(self.maps) != len(self.schedule):
            raise ValueError("one index map per scheduled scale required")
        for m, (h, w) in zip(self.maps, self.schedule):
            if m.shape[-2:] != (h, w):
                raise ValueError(f"map shape {m.shape} does not fit scale ({h},{w})")

    @property
    def batch(self) -> int:
        return self.maps[0].shape[0]


def tile_tokens(maps: TokenMaps) -> np.ndarray:
    """The single coarsest-scale index per tile, shape (B,)."""
    if maps.schedule[0] != (1, 1):
        raise ValueError("schedule has no 1x1 tile-level scale")
    return maps.maps[0][:, 0, 0]


def patch_tokens(maps: TokenMaps) -> np.ndarray:
    """The full-resolution index grid per tile, shape (B, p, p)."""
    h, w = maps.schedule[-1]
    if h == 1 and w == 1 and len(maps.schedule) > 1:
        raise ValueError("schedule has no full-resolution scale")
    return maps.maps[-1]


class Tokenizer(Module):
    """Encoder + shared codebook + scale smoothers + decoder, as one unit."""

    def __init__(self, cfg: TokenizerConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.encoder = VqEncoder(
            cfg.dim, cfg.enc_hidden, cfg.code_dim, rng_mod.generator(seed, "encoder"), dtype=dtype
        )
        self.codebook = Codebook(
            cfg.codebook_size, cfg.code_dim, rng_mod.generator(seed, "codebook"), dtype=dtype
        )
        self.decoder = VqDecoder(
            cfg.code_dim,
            cfg.dim,
            cfg.grid,
            rng_mod.generator(seed, "decoder"),
            width=cfg.dec_width,
            blocks=cfg.dec_blocks,
            heads=cfg.dec_heads,
            dtype=dtype,
        )
        self.smoothers = [
            None
            if (h, w) == (cfg.grid, cfg.grid)
            else Conv2d(
                cfg.code_dim,
                cfg.code_dim,
                3,
                rng_mod.generator(seed, "smoother", k),
                stride=1,
                pad=1,
                identity_init=True,
                dtype=dtype,
            )
            for k, (h, w) in enumerate(cfg.schedule)
        ]
        self.adapter = None  # optional; attached after alignment pretraining

    # -- frozen paths -------------------------------------------------------

    def _smooth(self, k: int, x: Tensor) -> Tensor:
        conv = self.smoothers[k]
        return x if conv is None else conv(x)

    def encode_latent(self, grids: np.ndarray) -> Tensor:
        with ad.no_grad():
            return self.encoder(Tensor(np.asarray(grids, dtype=self.encoder.fc1.weight.dtype)))

    def encode_grids(self, grids: np.ndarray, update_usage: bool = True) -> TokenMaps:
        """Multi-scale encode of (B, p, p, D) token grids (no gradients)."""
        p = self.cfg.grid
        with ad.no_grad():
            residual = self.encode_latent(grids)
            maps = []
            for k, (h, w) in enumerate(self.cfg.schedule):
                down = ad.bilinear_resize(residual, h, w)
                idx = quantize(self.codebook, down.data, update_usage=update_usage)
                maps.append(idx)
                if k + 1 == len(self.cfg.schedule):
                    break
                codes = Tensor(self.codebook.lookup(idx))
                up = ad.bilinear_resize(codes, p, p)
                residual = ad.sub(residual, self._smooth(k, up))
        return TokenMaps(maps=maps, schedule=self.cfg.schedule)

    def encode_tiles(self, tiles) -> TokenMaps:
        grids = np.stack([t.grid for t in tiles])
        return self.encode_grids(grids)

    def reconstruct_latent(self, maps: TokenMaps, num_scales: int | None = None) -> np.ndarray:
        """Sum of smoothed, upsampled code grids; (B, p, p, d)."""
        if not maps.maps:
            raise ValueError("empty token maps")
        p = self.cfg.grid
        take = len(maps.maps) if num_scales is None else num_scales
        with ad.no_grad():
            total = None
            for k in range(take):
                codes = Tensor(self.codebook.lookup(maps.maps[k]))
                up = ad.bilinear_resize(codes, p, p)
                part = self._smooth(k, up)
                total = part if total is None else ad.add(total, part)
            return total.data

    def decode_maps(self, maps: TokenMaps) -> np.ndarray:
        """Frozen reconstruction of token grids, (B, p, p, D)."""
        latent = self.reconstruct_latent(maps)
        with ad.no_grad():
            return self.decoder(Tensor(latent)).data

    def tile_feature(self, maps: TokenMaps) -> np.ndarray:
        """Tile-level decoded feature: patch mean of the reconstruction."""
        recon = self.decode_maps(maps)
        return recon.reshape(recon.shape[0], -1, recon.shape[-1]).mean(axis=1)


def encode_tile(tok: Tokenizer, tile: TileST) -> TokenMaps:
    return tok.encode_grids(tile.grid[None])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class VqLossReport:
    cosine: float
    commitment: float
    total: float
    mean_code_distance: float
    perplexity: float


@dataclass
class StepInternals:
    encoder_out: Tensor
    decoder_in: Tensor
    recon: Tensor
    maps: TokenMaps
    counts: np.ndarray
    latent: np.ndarray


def _sq_dist_mean(a: Tensor, target: np.ndarray) -> Tensor:
    diff = ad.sub(a, Tensor(target))
    return ad.reduce_mean(ad.reduce_sum(ad.mul(diff, diff), axis=-1))


def training_forward(tok: Tokenizer, grids: np.ndarray, commitment: bool = True):
    """Build the training loss for one batch of (B, p, p, D) grids.

    Returns (total, report, internals). The decoder consumes the summed
    multi-scale reconstruction with gradients copied straight through to
    the encoder output; per-scale commitment pulls encoder and smoother
    outputs toward the selected codes while the mirrored term pulls the
    codes toward the latents. Multi-scale ladders add a latent alignment
    pair that trains codes and smoothers to track the encoder latent (and
    the encoder to stay near the reconstruction), which keeps the
    residual ladder contractive; a one-rung ladder omits it so plain VQ
    training is exactly the two-term objective. Minimizing `total`
    maximizes reconstruction cosine: total = -cosine + commitment.
    """

    cfg = tok.cfg
    p = cfg.grid
    x = np.asarray(grids, dtype=tok.encoder.fc1.weight.dtype)
    b = x.shape[0]
    if b == 0:
        raise ValueError("empty batch")

    f = tok.encoder(Tensor(x))
    residual = f
    fhat_parts = []
    maps = []
    commit_terms = []
    dist_sum, dist_n = 0.0, 0
    counts = np.zeros(tok.codebook.size, dtype=np.int64)

    for k, (h, w) in enumerate(cfg.schedule):
        down = ad.bilinear_resize(residual, h, w)
        idx = quantize(tok.codebook, down.data)
        maps.append(idx)
        flat_idx = idx.reshape(-1).astype(np.int64)
        counts += np.bincount(flat_idx, minlength=tok.codebook.size)

        picked = ad.reshape(
            ad.take_rows(tok.codebook.vectors, flat_idx), idx.shape + (cfg.code_dim,)
        )
        norm_codes = l2n(picked.data.astype(np.float64)).astype(x.dtype)
        norm_down = l2n(down.data.astype(np.float64)).astype(x.dtype)
        dist_sum += float(np.sqrt(((norm_down - norm_codes) ** 2).sum(-1)).sum())
        dist_n += flat_idx.size
        if commitment:
            enc_side = ad.scale(_sq_dist_mean(ad.l2_normalize(down), norm_codes), cfg.beta)
            cb_side = _sq_dist_mean(ad.l2_normalize(picked), norm_down)
            commit_terms.append(ad.add(enc_side, cb_side))

        sub_k = tok._smooth(k, ad.bilinear_resize(picked, p, p))
        fhat_parts.append(sub_k)
        if k + 1 < len(cfg.schedule):
            residual = ad.sub(residual, Tensor(sub_k.data))

    fhat = fhat_parts[0]
    for part in fhat_parts[1:]:
        fhat = ad.add(fhat, part)
    if commitment and len(cfg.schedule) > 1:
        ladder_side = _sq_dist_mean(fhat, f.data)
        enc_hold = ad.scale(_sq_dist_mean(f, fhat.data), cfg.beta)
        commit_terms.append(ad.add(enc_hold, ladder_side))

    dec_in = ad.add(f, Tensor(fhat.data - f.data))
    recon = tok.decoder(dec_in)
    cosine = ad.reduce_mean(ad.cosine_similarity(recon, Tensor(x)))
    if commit_terms:
        commit = commit_terms[0]
        for term in commit_terms[1:]:
            commit = ad.add(commit, term)
        commit = ad.scale(commit, 1.0 / len(commit_terms))
    else:
        commit = Tensor(np.zeros((), dtype=x.dtype))
    total = ad.add(ad.neg(cosine), commit)

    probs = counts[counts > 0] / counts.sum()
    report = VqLossReport(
        cosine=float(cosine.data),
        commitment=float(commit.data),
        total=float(total.data),
        mean_code_distance=dist_sum / max(dist_n, 1),
        perplexity=float(np.exp(-(probs * np.log(probs)).sum())),
    )
    internals = StepInternals(
        encoder_out=f,
        decoder_in=dec_in,
        recon=recon,
        maps=TokenMaps(maps=maps, schedule=cfg.schedule),
        counts=counts,
        latent=f.data,
    )
    return total, report, internals


def train_step(tok: Tokenizer, grids: np.ndarray, opt: AdamW) -> VqLossReport:
    """One optimization step over a batch; aborts on a non-finite loss."""
    total, report, internals = training_forward(tok, grids)
    if not np.isfinite(total.data):
        raise ad.NonFiniteError(f"training loss is not finite: {float(total.data)}")
    opt.zero_grad()
    grads = ad.backward(total, opt.params)
    opt.step(grads)
    tok.codebook.update_ema(internals.counts)
    tok.codebook.observe_latents(internals.latent)
    return report


# Single-scale flavor: the same step on a tokenizer whose ladder is one
# full-resolution rung. Kept as a named entry point because several
# callers train plain VQ without caring about schedules.
vq_train_step = train_step


@dataclass
class TrainerConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 2e-4
    warmup_epochs: int = 5
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.99)
    seed: int = 0
    reinit_dead_every: int = 1
    reinit_threshold: float | None = None


def train_tokenizer(tok: Tokenizer, grids: np.ndarray, tcfg: TrainerConfig, log=None) -> list:
    """Epoch loop over an in-memory tile set; returns per-epoch records."""
    n = len(grids)
    steps_per_epoch = max(1, (n + tcfg.batch_size - 1) // tcfg.batch_size)
    schedule = WarmupCosine(
        peak=tcfg.lr,
        total_steps=tcfg.epochs * steps_per_epoch,
        warmup_steps=tcfg.warmup_epochs * steps_per_epoch,
        floor=tcfg.min_lr,
    )
    opt = AdamW(
        tok.params(), lr=schedule, betas=tcfg.betas, weight_decay=tcfg.weight_decay
    )
    history = []
    for epoch in range(tcfg.epochs):
        tok.codebook.reset_usage()
        order = rng_mod.generator(tcfg.seed, "batch-order", epoch).permutation(n)
        reports = []
        for start in range(0, n, tcfg.batch_size):
            batch = grids[order[start : start + tcfg.batch_size]]
            reports.append(train_step(tok, batch, opt))
        row = {
            "epoch": epoch,
            "loss": float(np.mean([r.total for r in reports])),
            "cosine": float(np.mean([r.cosine for r in reports])),
            "commitment": float(np.mean([r.commitment for r in reports])),
            "perplexity": float(np.mean([r.perplexity for r in reports])),
            "dead_codes": int((tok.codebook.usage == 0).sum()),
            "lr": opt.schedule(opt.step_count - 1),
        }
        if tcfg.reinit_dead_every and (epoch + 1) % tcfg.reinit_dead_every == 0:
            row["reinitialized"] = reinit_dead_codes(
                tok.codebook,
                tok.codebook._recent,
                rng_mod.generator(tcfg.seed, "reinit", epoch),
                threshold=tcfg.reinit_threshold,
            )
        history.append(row)
        if log:
            log(row)
    return history


@dataclass
class FidelityCurves:
    """Per-epoch held-out reconstruction cosine for two decoding paths."""

    vq: list
    cls: list


def cls_baseline_recon(
    train_tiles,
    eval_tiles,
    cfg: TokenizerConfig,
    tcfg: TrainerConfig,
    seed: int = 0,
) -> FidelityCurves:
    """Train matched-capacity reconstructors from quantized tokens and
    from the summary vector alone, tracking fidelity per epoch.

    The summary path feeds each tile's single summary vector, broadcast
    across all grid positions, through a decoder with the same trunk as
    the quantized path; both train for the same number of steps on the
    same batches. Returns mean per-token cosine on the held-out tiles.
    """
    for t in train_tiles + eval_tiles:
        if t.cls is None:
            raise ValueError("summary-path comparison needs tiles with a cls vector")
    train_grids = np.stack([t.grid for t in train_tiles])
    eval_grids = np.stack([t.grid for t in eval_tiles])
    train_cls = np.stack([t.cls for t in train_tiles])
    eval_cls = np.stack([t.cls for t in eval_tiles])

    tok = Tokenizer(cfg.single_scale(), seed=seed)
    cls_dec = VqDecoder(
        cfg.dim,
        cfg.dim,
        cfg.grid,
        rng_mod.generator(seed, "cls-decoder"),
        width=cfg.dec_width,
        blocks=cfg.dec_blocks,
        heads=cfg.dec_heads,
    )

    n = len(train_grids)
    steps_per_epoch = max(1, (n + tcfg.batch_size - 1) // tcfg.batch_size)
    total = tcfg.epochs * steps_per_epoch
    warm = tcfg.warmup_epochs * steps_per_epoch

    def make_opt(params):
        return AdamW(
            params,
            lr=WarmupCosine(tcfg.lr, total, warm, tcfg.min_lr),
            betas=tcfg.betas,
            weight_decay=tcfg.weight_decay,
        )

    opt_vq = make_opt(tok.params())
    opt_cls = make_opt(cls_dec.params())

    def cls_inputs(cls_batch: np.ndarray) -> np.ndarray:
        return np.broadcast_to(
            cls_batch[:, None, None, :], (len(cls_batch), cfg.grid, cfg.grid, cfg.dim)
        ).copy()

    curves = FidelityCurves(vq=[], cls=[])
    for epoch in range(tcfg.epochs):
        order = rng_mod.generator(seed, "fig-order", epoch).permutation(n)
        for start in range(0, n, tcfg.batch_size):
            sel = order[start : start + tcfg.batch_size]
            train_step(tok, train_grids[sel], opt_vq)
            rec = cls_dec(Tensor(cls_inputs(train_cls[sel])))
            loss = ad.neg(ad.reduce_mean(ad.cosine_similarity(rec, Tensor(train_grids[sel]))))
            opt_cls.zero_grad()
            opt_cls.step(ad.backward(loss, opt_cls.params))
        curves.vq.append(eval_reconstruction_cosine(tok, eval_grids))
        with ad.no_grad():
            rec = cls_dec(Tensor(cls_inputs(eval_cls)))
            cos = ad.reduce_mean(ad.cosine_similarity(rec, Tensor(eval_grids)))
        curves.cls.append(float(cos.data))
    return curves


def eval_reconstruction_cosine(tok: Tokenizer, grids: np.ndarray, batch_size: int = 64) -> float:
    """Mean per-token cosine between frozen reconstructions and inputs."""
    total, count = 0.0, 0
    for start in range(0, len(grids), batch_size):
        chunk = np.asarray(grids[start : start + batch_size], dtype=np.float32)
        maps = tok.encode_grids(chunk, update_usage=False)
        recon = tok.decode_maps(maps)
        a = l2n(recon.reshape(-1, tok.cfg.dim).astype(np.float64))
        b = l2n(chunk.reshape(-1, tok.cfg.dim).astype(np.float64))
        total += float((a * b).sum())
        count += len(a)
    return total / max(count, 1)

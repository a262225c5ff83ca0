"""Deterministic synthetic feature backbone.

Stands in for a frozen tile encoder: every tile is a smooth convex
mixture of a fixed set of prototype vectors that span a low-dimensional
subspace, plus isotropic noise. Regions share one mixture field across a
16 x 16 tile grid, so neighboring tiles are correlated. Generation is a
pure function of (config, id); the same inputs always produce the same
bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rng as rng_mod
from .tiles import TileST

REGION_SIDE = 16
REGION_TILES = REGION_SIDE * REGION_SIDE


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    dim: int = 64
    grid: int = 14
    prototypes: int = 8
    smoothness: float = 2.0
    noise: float = 0.01
    intrinsic_dim: int = 16
    sharpness: float = 6.0  # softmax gain on the blurred assignment field

    def validate(self) -> "SynthConfig":
        if self.intrinsic_dim > self.dim:
            raise ValueError("intrinsic_dim cannot exceed dim")
        if self.prototypes < 1:
            raise ValueError("need at least one prototype")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.grid < 1 or self.dim < 1:
            raise ValueError("grid and dim must be positive")
        return self


def _prototype_bank(cfg: SynthConfig) -> np.ndarray:
    """(M, D) prototypes spanning an intrinsic_dim-dimensional subspace."""
    gen = rng_mod.generator(cfg.seed, "prototype-basis")
    basis = np.linalg.qr(gen.normal(size=(cfg.dim, cfg.intrinsic_dim)))[0].T
    coeffs = rng_mod.generator(cfg.seed, "prototype-coeffs").normal(
        size=(cfg.prototypes, cfg.intrinsic_dim)
    )
    return coeffs @ basis


def _summary_map(cfg: SynthConfig) -> np.ndarray:
    gen = rng_mod.generator(cfg.seed, "summary-map")
    return np.eye(cfg.dim) + gen.normal(0.0, 1.0 / np.sqrt(cfg.dim), size=(cfg.dim, cfg.dim))


def _mixture_weights(cfg: SynthConfig, noise_field: np.ndarray) -> np.ndarray:
    """Softmax over prototypes of a blurred noise field, (M, H, W)."""
    smoothed = gaussian_filter(noise_field, sigma=(0.0, cfg.smoothness, cfg.smoothness))
    logits = cfg.sharpness * smoothed
    logits -= logits.max(axis=0, keepdims=True)
    expd = np.exp(logits)
    return expd / expd.sum(axis=0, keepdims=True)


def _assemble(cfg: SynthConfig, weights: np.ndarray, protos: np.ndarray, noise: np.ndarray) -> np.ndarray:
    tokens = np.einsum("mhw,md->hwd", weights, protos)
    if cfg.noise > 0:
        tokens = tokens + cfg.noise * noise
    return tokens.astype(np.float32)


def _summary(cfg: SynthConfig, grid: np.ndarray, smap: np.ndarray) -> np.ndarray:
    pooled = grid.reshape(-1, cfg.dim).mean(axis=0).astype(np.float64)
    return (pooled @ smap).astype(np.float32)


def generate_tile(cfg: SynthConfig, tile_id) -> TileST:
    cfg.validate()
    protos = _prototype_bank(cfg)
    field = rng_mod.generator(cfg.seed, "tile-field", tile_id).normal(
        size=(cfg.prototypes, cfg.grid, cfg.grid)
    )
    noise = rng_mod.generator(cfg.seed, "tile-noise", tile_id).normal(
        size=(cfg.grid, cfg.grid, cfg.dim)
    )
    grid = _assemble(cfg, _mixture_weights(cfg, field), protos, noise)
    return TileST(
        grid=grid,
        cls=_summary(cfg, grid, _summary_map(cfg)),
        tile_id=str(tile_id),
        coords=(0, 0),
    )


def _slide_tiles(cfg: SynthConfig, stream_tag: str, slide_id, n_tiles: int, carrier_mask, proto_idx: int, gain: float) -> list:
    protos = _prototype_bank(cfg)
    smap = _summary_map(cfg)
    side = int(np.ceil(np.sqrt(n_tiles)))
    tiles = []
    for i in range(n_tiles):
        field = rng_mod.generator(cfg.seed, stream_tag, slide_id, "field", i).normal(
            size=(cfg.prototypes, cfg.grid, cfg.grid)
        )
        smoothed = gaussian_filter(field, sigma=(0.0, cfg.smoothness, cfg.smoothness))
        logits = cfg.sharpness * smoothed
        if carrier_mask[i]:
            logits[proto_idx] += gain
        logits -= logits.max(axis=0, keepdims=True)
        expd = np.exp(logits)
        weights = expd / expd.sum(axis=0, keepdims=True)
        noise = rng_mod.generator(cfg.seed, stream_tag, slide_id, "noise", i).normal(
            size=(cfg.grid, cfg.grid, cfg.dim)
        )
        grid = _assemble(cfg, weights, protos, noise)
        tiles.append(
            TileST(
                grid=grid,
                cls=_summary(cfg, grid, smap),
                tile_id=f"{slide_id}:{i}",
                coords=(i % side, i // side),
            )
        )
    return tiles


def generate_labeled_slide(
    cfg: SynthConfig,
    slide_id,
    label: int,
    n_tiles: int = 32,
    signal_fraction: float = 0.35,
    signal_gain: float = 4.0,
) -> list:
    """A slide whose class plants one prototype into a fraction of tiles."""
    cfg.validate()
    gen = rng_mod.generator(cfg.seed, "slide-carriers", slide_id)
    carriers = gen.random(n_tiles) < signal_fraction
    if not carriers.any():
        carriers[0] = True
    return _slide_tiles(cfg, "slide", slide_id, n_tiles, carriers, int(label) % cfg.prototypes, signal_gain)


def generate_survival_slide(
    cfg: SynthConfig,
    slide_id,
    risk: float,
    n_tiles: int = 32,
    signal_gain: float = 4.0,
    base_time: float = 10.0,
) -> tuple:
    """A slide whose event time shortens with its planted-signal burden.

    Returns (tiles, time, event); `risk` in [0, 1] sets the fraction of
    tiles carrying the aggressive prototype.
    """
    cfg.validate()
    gen = rng_mod.generator(cfg.seed, "surv-carriers", slide_id)
    carriers = gen.random(n_tiles) < risk
    tiles = _slide_tiles(cfg, "surv", slide_id, n_tiles, carriers, 0, signal_gain)
    clock = rng_mod.generator(cfg.seed, "surv-clock", slide_id)
    time = float(base_time * np.exp(-2.0 * risk) * np.exp(0.15 * clock.normal()))
    event = int(clock.random() < 0.8)
    return tiles, time, event


def generate_region(cfg: SynthConfig, region_id) -> list:
    """256 tiles on a 16 x 16 grid sharing one smooth prototype field."""
    cfg.validate()
    protos = _prototype_bank(cfg)
    smap = _summary_map(cfg)
    side = REGION_SIDE * cfg.grid
    field = rng_mod.generator(cfg.seed, "region-field", region_id).normal(
        size=(cfg.prototypes, side, side)
    )
    weights = _mixture_weights(cfg, field)
    noise = rng_mod.generator(cfg.seed, "region-noise", region_id).standard_normal(
        size=(side, side, cfg.dim), dtype=np.float32
    )
    full = _assemble(cfg, weights, protos, noise)
    tiles = []
    for row in range(REGION_SIDE):
        for col in range(REGION_SIDE):
            block = full[
                row * cfg.grid : (row + 1) * cfg.grid,
                col * cfg.grid : (col + 1) * cfg.grid,
            ]
            tiles.append(
                TileST(
                    grid=block,
                    cls=_summary(cfg, block, smap),
                    tile_id=f"{region_id}:{row * REGION_SIDE + col}",
                    coords=(col, row),
                )
            )
    return tiles

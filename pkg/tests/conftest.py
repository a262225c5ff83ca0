"""Shared fixtures: trained toy tokenizers and region datasets.

Training runs are session-scoped because several test modules check
properties of the same standard toy artifacts.
"""

import numpy as np
import pytest

from pathvq import downstream, msvq, pretrain, synth
from pathvq.codec import compress_tiles

# standard desk-scale data: low intrinsic dimension, sharp assignment
# fields so per-token structure dominates the tile mean
FIG_SYNTH = dict(
    seed=7, dim=64, grid=14, prototypes=24, smoothness=1.0,
    noise=0.01, intrinsic_dim=16, sharpness=12.0,
)

FIG_TOK = dict(
    dim=64, grid=14, code_dim=16, codebook_size=512, enc_hidden=128,
    dec_width=128, dec_blocks=3, dec_heads=4,
)

# smaller geometry for the SSL and downstream pipelines
SSL_SYNTH = dict(
    seed=11, dim=64, grid=7, prototypes=12, smoothness=2.0,
    noise=0.01, intrinsic_dim=16, sharpness=8.0,
)

SSL_TOK = dict(
    dim=64, grid=7, code_dim=16, codebook_size=512, enc_hidden=96,
    dec_width=96, dec_blocks=2, dec_heads=4, scales=(1, 2, 4, 7),
)


@pytest.fixture(scope="session")
def fig_synth_cfg():
    return synth.SynthConfig(**FIG_SYNTH)


@pytest.fixture(scope="session")
def fig_tiles(fig_synth_cfg):
    return [synth.generate_tile(fig_synth_cfg, i) for i in range(300)]


@pytest.fixture(scope="session")
def trained_tok(fig_tiles):
    """A 5-scale tokenizer trained enough for structural properties."""
    cfg = msvq.TokenizerConfig(scales=(1, 2, 4, 7, 14), **FIG_TOK)
    tok = msvq.Tokenizer(cfg, seed=3)
    grids = np.stack([t.grid for t in fig_tiles[:256]])
    tcfg = msvq.TrainerConfig(
        epochs=8, batch_size=32, lr=1.5e-3, warmup_epochs=1,
        min_lr=1e-5, weight_decay=1e-4, betas=(0.9, 0.99), seed=3,
    )
    msvq.train_tokenizer(tok, grids, tcfg)
    return tok


@pytest.fixture(scope="session")
def ssl_synth_cfg():
    return synth.SynthConfig(**SSL_SYNTH)


@pytest.fixture(scope="session")
def ssl_tok(ssl_synth_cfg):
    """Small-grid tokenizer with an aligned adapter, trained on region tiles."""
    region_tiles = []
    for r in range(3):
        region_tiles += synth.generate_region(ssl_synth_cfg, 9000 + r)
    grids = np.stack([t.grid for t in region_tiles])
    cfg = msvq.TokenizerConfig(**SSL_TOK)
    tok = msvq.Tokenizer(cfg, seed=5)
    tcfg = msvq.TrainerConfig(
        epochs=6, batch_size=64, lr=1.5e-3, warmup_epochs=1,
        min_lr=1e-5, weight_decay=1e-4, betas=(0.9, 0.99), seed=5,
    )
    msvq.train_tokenizer(tok, grids, tcfg)
    downstream.align_and_attach(
        tok, grids[:512], downstream.AlignConfig(epochs=10, batch_size=64, seed=5)
    )
    return tok


@pytest.fixture(scope="session")
def region_dataset(ssl_synth_cfg, ssl_tok):
    """200 smooth regions, compressed and re-embedded for SSL."""
    tiles = []
    for r in range(200):
        tiles += synth.generate_region(ssl_synth_cfg, r)
    stream = compress_tiles(ssl_tok, tiles)
    return pretrain.build_region_dataset(ssl_tok, stream)

"""Synthetic backbone: determinism, structure, and the PVQF format."""

import hashlib

import numpy as np
import pytest

from pathvq import synth, tiles
from pathvq.synth import SynthConfig, generate_region, generate_tile


def _cfg(**kw):
    base = dict(seed=0, dim=16, grid=4, prototypes=4, smoothness=2.0, noise=0.01, intrinsic_dim=8)
    base.update(kw)
    return SynthConfig(**base)


def test_degenerate_mixture_is_the_single_prototype():
    cfg = _cfg(noise=0.0, prototypes=1)
    tile = generate_tile(cfg, "x")
    tokens = tile.tokens()
    assert np.allclose(tokens, tokens[0], atol=1e-6)


def test_same_seed_gives_bit_identical_tiles():
    cfg = _cfg()
    a = generate_tile(cfg, 42)
    b = generate_tile(cfg, 42)
    assert np.array_equal(a.grid, b.grid)
    assert np.array_equal(a.cls, b.cls)
    c = generate_tile(cfg, 43)
    assert not np.array_equal(a.grid, c.grid)


def test_pca_recovers_intrinsic_dimension():
    cfg = SynthConfig(
        seed=1, dim=64, grid=14, prototypes=24, smoothness=2.0, noise=0.01, intrinsic_dim=16
    )
    tokens = np.concatenate([generate_tile(cfg, i).tokens() for i in range(52)])
    assert len(tokens) >= 10_000
    centered = tokens - tokens.mean(axis=0)
    var = np.linalg.svd(centered, compute_uv=False) ** 2
    assert var[:16].sum() / var.sum() >= 0.99


def test_region_has_256_tiles_on_a_grid():
    region = generate_region(_cfg(), 0)
    assert len(region) == 256
    coords = {t.coords for t in region}
    assert coords == {(c, r) for r in range(16) for c in range(16)}


def test_region_determinism():
    a = generate_region(_cfg(), 5)
    b = generate_region(_cfg(), 5)
    assert all(np.array_equal(x.grid, y.grid) for x, y in zip(a, b))


def test_infinite_smoothness_makes_tiles_near_identical():
    region = generate_region(_cfg(smoothness=50.0, noise=0.0), 1)
    reps = np.stack([t.grid.mean(axis=(0, 1)) for t in region])
    spread = np.abs(reps - reps.mean(axis=0)).max()
    scale = np.abs(reps).max()
    assert spread <= 0.05 * max(scale, 1e-9)


def test_adjacent_tiles_more_similar_than_distant():
    cfg = _cfg()
    adj, far = [], []
    for rid in range(100):
        region = generate_region(cfg, rid)
        reps = np.stack([t.grid.mean(axis=(0, 1)) for t in region]).reshape(16, 16, -1)
        reps = reps / (np.linalg.norm(reps, axis=-1, keepdims=True) + 1e-9)
        adj.append(np.einsum("rcd,rcd->rc", reps[:, :-1], reps[:, 1:]).mean())
        far.append(np.einsum("rcd,rcd->rc", reps[:8], reps[8:]).mean())
    assert np.mean(adj) > np.mean(far)


def test_within_tile_variation_decreases_with_smoothness():
    def roughness(sigma):
        vals = []
        for i in range(8):
            g = generate_tile(_cfg(smoothness=sigma, noise=0.0), i).grid
            vals.append(((g[1:] - g[:-1]) ** 2).mean() + ((g[:, 1:] - g[:, :-1]) ** 2).mean())
        return np.mean(vals)

    r1, r2, r4 = roughness(1.0), roughness(2.0), roughness(4.0)
    assert r1 > r2 > r4


def test_labeled_slides_separate_by_class():
    cfg = _cfg(sharpness=8.0)
    a = synth.generate_labeled_slide(cfg, "a", 0, n_tiles=12, signal_fraction=0.5)
    b = synth.generate_labeled_slide(cfg, "b", 1, n_tiles=12, signal_fraction=0.5)
    mean_a = np.stack([t.grid.mean(axis=(0, 1)) for t in a]).mean(axis=0)
    mean_b = np.stack([t.grid.mean(axis=(0, 1)) for t in b]).mean(axis=0)
    assert np.linalg.norm(mean_a - mean_b) > 0.1


def test_survival_times_shrink_with_risk():
    cfg = _cfg()
    risks = np.linspace(0.05, 0.95, 24)
    times = [synth.generate_survival_slide(cfg, f"s{i}", r, n_tiles=4)[1] for i, r in enumerate(risks)]
    assert np.corrcoef(risks, times)[0, 1] < -0.5


# ---------------------------------------------------------------------------
# PVQF format
# ---------------------------------------------------------------------------


def test_pvqf_round_trip_bit_identical(tmp_path):
    cfg = _cfg()
    tile_list = [generate_tile(cfg, i) for i in range(3)]
    path = tmp_path / "t.pvqf"
    tiles.write_feature_file(path, tile_list, dim=16, p=4, has_cls=True)
    back = list(tiles.read_feature_file(path))
    assert len(back) == 3
    for a, b in zip(tile_list, back):
        assert np.array_equal(a.grid, b.grid)
        assert np.array_equal(a.cls, b.cls)
        assert a.coords == b.coords


def test_pvqf_bad_magic(tmp_path):
    path = tmp_path / "bad.pvqf"
    path.write_bytes(b"XXXX" + b"\x00" * 30)
    with pytest.raises(tiles.FormatError, match="magic"):
        list(tiles.read_feature_file(path))


def test_pvqf_version_mismatch(tmp_path):
    cfg = _cfg()
    path = tmp_path / "v.pvqf"
    tiles.write_feature_file(path, [generate_tile(cfg, 0)], dim=16, p=4, has_cls=True)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(tiles.FormatError, match="version"):
        list(tiles.read_feature_file(path))


def test_pvqf_truncation_detected(tmp_path):
    cfg = _cfg()
    path = tmp_path / "t.pvqf"
    tiles.write_feature_file(path, [generate_tile(cfg, i) for i in range(2)], dim=16, p=4, has_cls=True)
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(tiles.FormatError, match="length|truncated"):
        list(tiles.read_feature_file(path))


def test_pvqf_thousand_tiles_read_deterministically(tmp_path):
    cfg = _cfg(dim=8, grid=2)
    path = tmp_path / "big.pvqf"
    tiles.write_feature_file(
        path, (generate_tile(cfg, i) for i in range(1000)), dim=8, p=2, has_cls=True
    )

    def digest():
        h = hashlib.sha256()
        for t in tiles.read_feature_file(path):
            h.update(t.grid.tobytes())
            h.update(t.cls.tobytes())
        return h.hexdigest()

    assert digest() == digest()


def test_pvqf_streaming_write_counts(tmp_path):
    cfg = _cfg()
    path = tmp_path / "c.pvqf"
    n = tiles.write_feature_file(path, (generate_tile(cfg, i) for i in range(7)), dim=16, p=4, has_cls=True)
    assert n == 7
    assert tiles.probe_feature_file(path).tile_count == 7


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(dim=8, intrinsic_dim=9).validate()
    with pytest.raises(ValueError):
        SynthConfig(noise=-1.0).validate()

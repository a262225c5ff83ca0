"""Single-scale VQ: quantizer exactness, training behavior, stats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathvq import autodiff as ad
from pathvq import msvq, rng, vq
from pathvq.autodiff import Tensor
from pathvq.optim import AdamW


def _codebook(vectors, **kw):
    cb = vq.Codebook(len(vectors), len(vectors[0]), rng.generator(0, "cb"), **kw)
    cb.vectors.data = np.asarray(vectors, dtype=np.float32)
    return cb


def brute_force_nearest(latents, codebook_vectors):
    """Independent oracle: per-row scan over squared distances."""
    lat = vq.l2n(np.asarray(latents, dtype=np.float64).reshape(-1, codebook_vectors.shape[1]))
    codes = vq.l2n(np.asarray(codebook_vectors, dtype=np.float64))
    out = np.empty(len(lat), dtype=np.int64)
    for i, row in enumerate(lat):
        d2 = ((row[None, :] - codes) ** 2).sum(axis=1)
        out[i] = int(d2.argmin())
    return out


def test_quantize_nearest_axis():
    cb = _codebook([[1, 0], [0, 1], [-1, 0]])
    idx = vq.quantize(cb, np.array([[2.0, 0.1]]))
    assert idx.tolist() == [0]


def test_quantize_symmetric_tie_takes_lowest_index():
    cb = _codebook([[1, 0], [0, 1]])
    idx = vq.quantize(cb, np.array([[1.0, 1.0]]))
    assert idx.tolist() == [0]


@pytest.mark.parametrize("size", [64, 512])
def test_quantize_matches_brute_force_oracle(size):
    gen = rng.generator(99, "oracle", size)
    cb = vq.Codebook(size, 16, rng.generator(3, "cbv"))
    latents = gen.normal(size=(2000, 16)).astype(np.float32)
    ours = vq.quantize(cb, latents, update_usage=False).reshape(-1).astype(np.int64)
    oracle = brute_force_nearest(latents, cb.vectors.data)
    assert np.array_equal(ours, oracle)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
def test_quantize_scale_invariance(lam, seed):
    gen = np.random.default_rng(seed)
    cb = _codebook(gen.normal(size=(17, 8)).astype(np.float32))
    e = gen.normal(size=(5, 8)).astype(np.float64)
    a = vq.quantize(cb, e, update_usage=False)
    b = vq.quantize(cb, lam * e, update_usage=False)
    assert np.array_equal(a, b)


def test_quantize_dim_mismatch():
    cb = _codebook([[1, 0], [0, 1]])
    with pytest.raises(ad.ShapeError):
        vq.quantize(cb, np.zeros((3, 5)))


def test_usage_counters_count_assignments_since_reset():
    cb = _codebook([[1, 0], [0, 1]])
    vq.quantize(cb, np.array([[2.0, 0.0], [0.0, 3.0], [5.0, 0.0]]))
    assert cb.usage.tolist() == [2, 1]
    cb.reset_usage()
    assert cb.usage.tolist() == [0, 0]


def test_encoder_zero_weights_zero_latents():
    enc = vq.VqEncoder(8, 6, 3, rng.generator(0, "e"))
    for p in enc.params():
        p.data = np.zeros_like(p.data)
    out = enc(Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 8)).astype(np.float32)))
    assert np.array_equal(out.data, np.zeros((2, 4, 4, 3), dtype=np.float32))


def test_encoder_shape_contract_at_paper_geometry():
    enc = vq.VqEncoder(1024, 64, 16, rng.generator(1, "e"))
    out = enc(Tensor(np.zeros((1, 14, 14, 1024), dtype=np.float32)))
    assert out.shape == (1, 14, 14, 16)
    assert 1024 // out.shape[-1] == 64


def test_decoder_shape_contract():
    dec = vq.VqDecoder(4, 16, 14, rng.generator(2, "d"), width=32, blocks=1, heads=2)
    out = dec(Tensor(np.zeros((2, 14, 14, 4), dtype=np.float32)))
    assert out.shape == (2, 14, 14, 16)


def test_decoder_constant_indices_identical_rows_before_positions():
    dec = vq.VqDecoder(4, 16, 4, rng.generator(2, "d"), width=32, blocks=1, heads=2)
    cb = vq.Codebook(8, 4, rng.generator(0, "cb"))
    codes = cb.lookup(np.full((1, 4, 4), 3, dtype=np.uint16))
    with ad.no_grad():
        stem = dec.stem(Tensor(codes)).data.reshape(-1, 32)
    assert np.allclose(stem, stem[0], atol=0)


def test_decode_out_of_range_index():
    cb = vq.Codebook(8, 4, rng.generator(0, "cb"))
    with pytest.raises(IndexError):
        cb.lookup(np.array([[9]], dtype=np.uint16))


def _tiny_tok(seed=0, dtype=np.float32, scales=(4,)):
    cfg = msvq.TokenizerConfig(
        dim=12, grid=4, code_dim=4, codebook_size=24, enc_hidden=10,
        dec_width=16, dec_blocks=1, dec_heads=2, scales=scales,
    )
    return msvq.Tokenizer(cfg, seed=seed, dtype=dtype)


def test_straight_through_grads_copy_exactly():
    tok = _tiny_tok()
    grids = np.random.default_rng(0).normal(size=(3, 4, 4, 12)).astype(np.float32)
    total, report, internals = msvq.training_forward(tok, grids, commitment=False)
    ad.backward(total)
    assert internals.encoder_out.grad is not None
    assert np.array_equal(internals.encoder_out.grad, internals.decoder_in.grad)
    assert np.any(internals.encoder_out.grad != 0)


def test_commitment_zero_when_codes_equal_latents():
    tok = _tiny_tok()
    grids = np.random.default_rng(1).normal(size=(2, 4, 4, 12)).astype(np.float32)
    with ad.no_grad():
        f = tok.encoder(Tensor(grids)).data
    flat = f.reshape(-1, 4)
    tok.cfg = tok.cfg  # geometry unchanged
    cb = vq.Codebook(len(flat), 4, rng.generator(0, "cb"))
    cb.vectors.data = flat.copy()
    tok.codebook = cb
    total, report, internals = msvq.training_forward(tok, grids)
    assert report.commitment == pytest.approx(0.0, abs=1e-10)
    assert report.mean_code_distance == pytest.approx(0.0, abs=1e-6)


def test_training_loss_decreases_on_toy_set():
    tok = _tiny_tok(seed=2)
    grids = np.random.default_rng(2).normal(size=(64, 4, 4, 12)).astype(np.float32)
    opt = AdamW(tok.params(), lr=2e-3, weight_decay=1e-4)
    losses = []
    for step in range(200):
        sel = np.random.default_rng(step).integers(0, 64, size=16)
        losses.append(msvq.train_step(tok, grids[sel], opt).total)
    assert losses[-1] < losses[0]
    assert np.median(losses[-20:]) < np.median(losses[:20])


def fixed_assignment_vq_loss(tok, grids, idx):
    """The undivided fixed-assignment VQ objective.

    Stop-gradients only split the commitment between encoder and
    codebook; finite differences can only see the undivided function, so
    the checkable loss keeps assignments frozen and drops the stops:
    -cos(dec(v_z), x) + (beta + 1) * mean |l2n(e) - l2n(v_z)|^2.
    """
    d = tok.cfg.code_dim
    f = tok.encoder(Tensor(grids))
    picked = ad.reshape(
        ad.take_rows(tok.codebook.vectors, idx.reshape(-1).astype(np.int64)), idx.shape + (d,)
    )
    rec = tok.decoder(picked)
    cos = ad.reduce_mean(ad.cosine_similarity(rec, Tensor(grids)))
    diff = ad.sub(ad.l2_normalize(f), ad.l2_normalize(picked))
    commit = ad.scale(
        ad.reduce_mean(ad.reduce_sum(ad.mul(diff, diff), axis=-1)), 1.0 + tok.cfg.beta
    )
    return ad.add(ad.neg(cos), commit)


def module_grad_check(params, loss_fn, tol=1e-4, h=1e-5, probe_limit=None, seed=0):
    """Finite-difference check against in-place module parameters."""
    analytic = ad.backward(loss_fn(), [p for _, p in params])
    worst = (0.0, "")
    gen = np.random.default_rng(seed)
    for (name, p), ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana = ana.reshape(-1)
        picks = range(flat.size)
        if probe_limit is not None and flat.size > probe_limit:
            picks = gen.choice(flat.size, size=probe_limit, replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            up = float(loss_fn().data)
            flat[j] = orig - h
            down = float(loss_fn().data)
            flat[j] = orig
            num = (up - down) / (2 * h)
            rel = abs(ana[j] - num) / max(abs(ana[j]), abs(num), 1.0)
            if rel > worst[0]:
                worst = (rel, f"{name}[{j}]")
    assert worst[0] <= tol, f"{worst[1]}: rel err {worst[0]:.2e}"
    return worst[0]


def test_grad_check_through_encode_decode_loss():
    tok = _tiny_tok(dtype=np.float64)
    grids = np.random.default_rng(3).normal(size=(2, 4, 4, 12))
    idx = vq.quantize(tok.codebook, tok.encoder(Tensor(grids)).data, update_usage=False)
    params = list(tok.encoder.named_params())
    params += [("codebook.vectors", tok.codebook.vectors)]
    params += [("decoder." + n, p) for n, p in tok.decoder.named_params()]
    module_grad_check(params, lambda: fixed_assignment_vq_loss(tok, grids, idx), probe_limit=40)


def test_codebook_stats_uniform_perplexity_is_C():
    cb = vq.Codebook(16, 4, rng.generator(0, "cb"))
    cb.usage[:] = 5
    stats = vq.codebook_stats(cb)
    assert stats.perplexity == pytest.approx(16.0, rel=1e-6)
    assert stats.dead_count == 0


def test_codebook_stats_single_code():
    cb = vq.Codebook(16, 4, rng.generator(0, "cb"))
    cb.usage[3] = 100
    stats = vq.codebook_stats(cb)
    assert stats.perplexity == pytest.approx(1.0)
    assert stats.dead_count == 15


def test_codebook_stats_requires_assignments():
    cb = vq.Codebook(16, 4, rng.generator(0, "cb"))
    with pytest.raises(ValueError):
        vq.codebook_stats(cb)


def test_codebook_stats_random_assignments_near_C():
    cb = vq.Codebook(512, 4, rng.generator(0, "cb"))
    draws = rng.generator(1, "draws").integers(0, 512, size=1_000_000)
    np.add.at(cb.usage, draws, 1)
    stats = vq.codebook_stats(cb)
    assert abs(stats.perplexity - 512) / 512 <= 0.02


def test_reinit_dead_codes_noop_when_all_alive():
    cb = vq.Codebook(8, 4, rng.generator(0, "cb"))
    cb.ema[:] = 1.0
    before = cb.vectors.data.copy()
    n = vq.reinit_dead_codes(cb, np.ones((10, 4)), rng.generator(0, "r"))
    assert n == 0
    assert np.array_equal(cb.vectors.data, before)


def test_reinit_dead_codes_replaces_all_when_all_dead():
    cb = vq.Codebook(8, 4, rng.generator(0, "cb"))
    recent = rng.generator(1, "lat").normal(size=(5, 4)).astype(np.float32)
    n = vq.reinit_dead_codes(cb, recent, rng.generator(0, "r"))
    assert n == 8
    for row in cb.vectors.data:
        assert any(np.allclose(row, r) for r in recent)


def test_reinit_improves_next_epoch_perplexity():
    """With ladder-heavy dead codes, reinit lifts usage diversity."""
    cfg = msvq.TokenizerConfig(
        dim=12, grid=4, code_dim=4, codebook_size=128, enc_hidden=10,
        dec_width=16, dec_blocks=1, dec_heads=2, scales=(4,),
    )
    tok = msvq.Tokenizer(cfg, seed=4)
    gen = np.random.default_rng(4)
    protos = gen.normal(size=(4, 12))
    grids = (protos[gen.integers(0, 4, size=(48, 4, 4))] + 0.05 * gen.normal(size=(48, 4, 4, 12))).astype(np.float32)
    tcfg = msvq.TrainerConfig(
        epochs=6, batch_size=16, lr=2e-3, warmup_epochs=1, min_lr=1e-5,
        weight_decay=1e-4, betas=(0.9, 0.99), seed=4, reinit_dead_every=1,
    )
    history = msvq.train_tokenizer(tok, grids, tcfg)
    boosts = [
        (history[i], history[i + 1])
        for i in range(len(history) - 1)
        if history[i].get("reinitialized", 0) > 0
    ]
    assert boosts, "expected at least one epoch with dead-code reinitialization"
    assert any(after["perplexity"] >= before["perplexity"] for before, after in boosts)

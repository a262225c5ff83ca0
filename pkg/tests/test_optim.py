"""Optimizer and schedule behavior."""

import numpy as np
import pytest

from pathvq import autodiff as ad
from pathvq.optim import AdamW, WarmupCosine


def test_zero_grads_zero_decay_leave_params_unchanged():
    p = ad.parameter(np.array([1.0, -2.0, 3.0], dtype=np.float32))
    before = p.data.copy()
    opt = AdamW([p], lr=1e-2, weight_decay=0.0)
    for _ in range(3):
        opt.step([np.zeros_like(p.data)])
    assert np.array_equal(p.data, before)


def test_weight_decay_is_decoupled():
    p = ad.parameter(np.array([10.0], dtype=np.float32))
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step([np.zeros_like(p.data)])
    # update is lr * wd * p with zero moments
    assert np.allclose(p.data, 10.0 - 0.1 * 0.5 * 10.0)


def test_warmup_starts_low_and_peaks():
    sched = WarmupCosine(peak=2e-4, total_steps=100, warmup_steps=10, floor=1e-5)
    assert sched(0) < sched(9)
    assert sched(9) == pytest.approx(2e-4)
    assert sched(0) == pytest.approx(2e-5)


def test_cosine_reaches_floor_at_final_step():
    sched = WarmupCosine(peak=2e-4, total_steps=50, warmup_steps=5, floor=1e-5)
    assert sched(49) == pytest.approx(1e-5, rel=1e-12)
    mid = sched(27)
    assert 1e-5 < mid < 2e-4


def test_schedule_is_monotone_after_warmup():
    sched = WarmupCosine(peak=1e-3, total_steps=40, warmup_steps=4, floor=1e-6)
    rates = [sched(t) for t in range(4, 40)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_grad_shape_mismatch_raises():
    p = ad.parameter(np.zeros((2, 2), dtype=np.float32))
    opt = AdamW([p], lr=1e-3)
    with pytest.raises(ad.ShapeError):
        opt.step([np.zeros(3, dtype=np.float32)])


def test_moments_shaped_like_params_and_step_increases():
    p = ad.parameter(np.zeros((3, 2), dtype=np.float32))
    opt = AdamW([p], lr=1e-3)
    assert opt._m[0].shape == p.data.shape
    opt.step([np.ones_like(p.data)])
    opt.step([np.ones_like(p.data)])
    assert opt.step_count == 2


def test_adamw_descends_on_quadratic():
    p = ad.parameter(np.array([5.0], dtype=np.float32))
    opt = AdamW([p], lr=0.05)
    for _ in range(200):
        loss = ad.reduce_sum(ad.mul(p, p))
        opt.zero_grad()
        grads = ad.backward(loss, [p])
        opt.step(grads)
    assert abs(float(p.data[0])) < 0.5

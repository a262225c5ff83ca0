"""Gradient and contract tests for the autodiff engine.

Every differentiable primitive is checked against central finite
differences in float64 at many random points; forward semantics are
pinned with hand-computable cases and independent oracles.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from pathvq import autodiff as ad
from pathvq.autodiff import Tensor

RNG = np.random.default_rng(1234)


def _pt(*shape):
    return RNG.normal(size=shape)


# fixed constants for cases whose fn must be deterministic across calls
_C43 = np.random.default_rng(9).normal(size=(4, 3))
_C24 = np.random.default_rng(10).normal(size=(2, 4))
_C35 = np.random.default_rng(11).normal(size=(3, 5))


# one entry per differentiable primitive: name -> (fn building a scalar, point builder)
CASES = {
    "matmul": (lambda a, b: ad.reduce_sum(ad.matmul(a, b)), lambda: [_pt(3, 4), _pt(4, 2)]),
    "matmul_batched": (
        lambda a, b: ad.reduce_sum(ad.matmul(a, b)),
        lambda: [_pt(2, 3, 4), _pt(2, 4, 2)],
    ),
    "add": (lambda a, b: ad.reduce_sum(ad.add(a, b)), lambda: [_pt(3, 4), _pt(4)]),
    "sub": (lambda a, b: ad.reduce_sum(ad.mul(ad.sub(a, b), ad.sub(a, b))), lambda: [_pt(3), _pt(3)]),
    "mul": (lambda a, b: ad.reduce_sum(ad.mul(a, b)), lambda: [_pt(2, 3), _pt(3)]),
    "neg": (lambda a: ad.reduce_sum(ad.mul(ad.neg(a), a)), lambda: [_pt(4)]),
    "scale": (lambda a: ad.reduce_sum(ad.scale(a, 2.5)), lambda: [_pt(3, 2)]),
    "tanh": (lambda a: ad.reduce_sum(ad.tanh(a)), lambda: [_pt(5)]),
    "sigmoid": (lambda a: ad.reduce_sum(ad.sigmoid(a)), lambda: [_pt(5)]),
    "softplus": (lambda a: ad.reduce_sum(ad.softplus(a)), lambda: [_pt(5)]),
    "gelu": (lambda a: ad.reduce_sum(ad.gelu(a)), lambda: [_pt(5)]),
    "softmax": (lambda a: ad.reduce_sum(ad.mul(ad.softmax(a), a)), lambda: [_pt(3, 4)]),
    "layernorm": (lambda a: ad.reduce_sum(ad.mul(ad.layernorm(a), a)), lambda: [_pt(3, 5)]),
    "l2_normalize": (lambda a: ad.reduce_sum(ad.mul(ad.l2_normalize(a), a)), lambda: [_pt(3, 4)]),
    "cosine_similarity": (
        lambda a, b: ad.reduce_sum(ad.cosine_similarity(a, b)),
        lambda: [_pt(3, 4), _pt(3, 4)],
    ),
    "cross_entropy_soft": (
        lambda a: ad.reduce_sum(ad.cross_entropy_soft(a, Tensor(_soft_target()))),
        lambda: [_pt(3, 4)],
    ),
    "cross_entropy_indices": (
        lambda a: ad.reduce_sum(ad.cross_entropy_indices(a, np.array([1, 3, 0]))),
        lambda: [_pt(3, 4)],
    ),
    "mse": (lambda a, b: ad.mse(a, b), lambda: [_pt(3, 4), _pt(3, 4)]),
    "conv2d": (
        lambda x, w: ad.reduce_sum(ad.mul(ad.conv2d(x, w, stride=2, pad=1), ad.conv2d(x, w, stride=2, pad=1))),
        lambda: [_pt(2, 5, 5, 3), _pt(3, 3, 3, 2)],
    ),
    "bilinear_resize_up": (
        lambda x: ad.reduce_sum(ad.mul(ad.bilinear_resize(x, 5, 7), ad.bilinear_resize(x, 5, 7))),
        lambda: [_pt(2, 3, 3, 2)],
    ),
    "bilinear_resize_down": (
        lambda x: ad.reduce_sum(ad.mul(ad.bilinear_resize(x, 2, 2), ad.bilinear_resize(x, 2, 2))),
        lambda: [_pt(2, 5, 5, 2)],
    ),
    "sum_axis": (lambda a: ad.reduce_sum(ad.mul(ad.reduce_sum(a, axis=1, keepdims=True), a)), lambda: [_pt(3, 4)]),
    "mean": (lambda a: ad.reduce_mean(ad.mul(a, a)), lambda: [_pt(3, 4)]),
    "reshape": (lambda a: ad.reduce_sum(ad.mul(ad.reshape(a, (2, 6)), ad.reshape(a, (2, 6)))), lambda: [_pt(3, 4)]),
    "transpose": (lambda a: ad.reduce_sum(ad.mul(ad.transpose(a, (1, 0, 2)), ad.transpose(a, (1, 0, 2)))), lambda: [_pt(2, 3, 4)]),
    "concat": (
        lambda a, b: ad.reduce_sum(ad.mul(ad.concat([a, b], axis=1), ad.concat([a, b], axis=1))),
        lambda: [_pt(2, 3), _pt(2, 2)],
    ),
    "broadcast_to": (lambda a: ad.reduce_sum(ad.mul(ad.broadcast_to(a, (4, 3)), Tensor(_C43))), lambda: [_pt(1, 3)]),
    "slice_axis": (lambda a: ad.reduce_sum(ad.mul(ad.slice_axis(a, 1, 1, 3), ad.slice_axis(a, 1, 1, 3))), lambda: [_pt(2, 4)]),
    "take_rows": (lambda m: ad.reduce_sum(ad.mul(ad.take_rows(m, np.array([0, 2, 2, 1])), Tensor(_C43))), lambda: [_pt(3, 3)]),
    "index_select_last": (
        lambda a: ad.reduce_sum(ad.mul(ad.index_select_last(a, np.array([2, 0, 1, 3])), Tensor(_C24))),
        lambda: [_pt(2, 4)],
    ),
    "cast": (lambda a: ad.reduce_sum(ad.mul(ad.cast(a, np.float64), a)), lambda: [_pt(3)]),
}


def _soft_target():
    x = np.random.default_rng(12).normal(size=(3, 4))
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_at_20_random_points(name):
    fn, pts = CASES[name]
    for _ in range(20):
        report = ad.grad_check(fn, pts(), tol=1e-4)
        assert report.passed, f"{name}: rel err {report.max_rel_err:.2e}"


def test_matmul_identity():
    a = RNG.normal(size=(3, 3))
    out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_softmax_uniform_on_equal_logits():
    out = ad.softmax(Tensor(np.zeros(3)))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-7)


def test_bilinear_resize_preserves_constants():
    c = 2.75
    out = ad.bilinear_resize(Tensor(np.full((14, 14, 3), c)), 4, 4)
    assert out.shape == (4, 4, 3)
    assert np.allclose(out.data, c, atol=1e-6)


def test_bilinear_resize_same_extent_is_identity():
    x = Tensor(RNG.normal(size=(5, 7, 2)).astype(np.float32))
    assert ad.bilinear_resize(x, 5, 7) is x


def test_bilinear_downsample_to_one_is_mean():
    x = RNG.normal(size=(1, 6, 6, 3)).astype(np.float64)
    out = ad.bilinear_resize(Tensor(x), 1, 1)
    assert np.allclose(out.data[0, 0, 0], x[0].mean(axis=(0, 1)), atol=1e-12)


def test_backward_quadratic():
    x = ad.parameter(np.array([1.0, 2.0]))
    loss = ad.reduce_sum(ad.mul(x, x))
    ad.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_self_cosine_is_flat():
    x = ad.parameter(RNG.normal(size=4))
    loss = ad.reduce_sum(ad.cosine_similarity(x, x))
    ad.backward(loss)
    assert np.all(np.abs(x.grad) <= 1e-6)


def test_backward_three_layer_mlp_matches_finite_differences():
    w1, w2, w3 = _pt(4, 6), _pt(6, 5), _pt(5, 1)
    x = _pt(3, 4)

    def fn(a, b, c, inp):
        h = ad.tanh(ad.matmul(inp, a))
        h = ad.gelu(ad.matmul(h, b))
        return ad.reduce_sum(ad.matmul(h, c))

    report = ad.grad_check(fn, [w1, w2, w3, x], tol=1e-4, h=1e-5)
    assert report.passed, report.max_rel_err


def test_backward_zero_for_nonparticipating_leaves():
    x = ad.parameter(np.ones(3))
    unused = ad.parameter(np.ones(2))
    loss = ad.reduce_sum(ad.mul(x, x))
    grads = ad.backward(loss, [x, unused])
    assert np.allclose(grads[0], 2.0)
    assert np.array_equal(grads[1], np.zeros(2))


def test_backward_requires_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.mul(x, x))


def test_backward_twice_raises_consumed():
    x = ad.parameter(np.ones(3))
    loss = ad.reduce_sum(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(ad.GraphConsumedError):
        ad.backward(loss)


def test_grad_check_layernorm_of_matmul_passes():
    def fn(x, w):
        return ad.reduce_sum(ad.mul(ad.layernorm(ad.matmul(x, w)), Tensor(_C35)))

    assert ad.grad_check(fn, [_pt(3, 4), _pt(4, 5)], tol=1e-4).passed


def test_grad_check_catches_a_wrong_tanh_derivative():
    def broken_tanh(x):
        y = np.tanh(x.data)

        def back(g):
            ad._accumulate(x, g * (1.0 - y * y) * 0.9)

        return ad._node(y, (x,), back, "tanh")

    def fn(x):
        return ad.reduce_sum(broken_tanh(x))

    assert not ad.grad_check(fn, [_pt(5)], tol=1e-4).passed


def test_grad_check_l2_normalize_at_zero_with_eps_guard():
    def fn(x):
        return ad.reduce_sum(ad.l2_normalize(x))

    report = ad.grad_check(fn, [np.zeros(4)], tol=1e-4, h=1e-13)
    assert report.passed, report.max_rel_err


def test_layernorm_moments():
    x = Tensor(RNG.normal(2.0, 3.0, size=(16, 32)))
    y = ad.layernorm(x).data
    assert np.all(np.abs(y.mean(axis=-1)) <= 1e-5)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    y = ad.softmax(Tensor(np.array(vals, dtype=np.float64))).data
    assert abs(y.sum() - 1.0) <= 1e-6
    assert np.all(y >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_l2_normalize_unit_norm(seed):
    x = np.random.default_rng(seed).normal(size=(4, 6)) * 10
    y = ad.l2_normalize(Tensor(x)).data
    assert np.allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-5)


def test_conv2d_matches_scipy_oracle():
    x = RNG.normal(size=(1, 6, 6, 2)).astype(np.float64)
    w = RNG.normal(size=(3, 3, 2, 4)).astype(np.float64)
    out = ad.conv2d(Tensor(x), Tensor(w), stride=1, pad=1).data
    for co in range(4):
        expect = np.zeros((6, 6))
        for ci in range(2):
            expect += correlate2d(x[0, :, :, ci], w[:, :, ci, co], mode="same")
        assert np.allclose(out[0, :, :, co], expect, atol=1e-10), co


def test_conv2d_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 2, 5))))


def test_matmul_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_nonfinite_output_is_an_error():
    big = Tensor(np.array([1e38], dtype=np.float32))
    with pytest.raises(ad.NonFiniteError):
        ad.mul(ad.parameter(np.array([1e38], dtype=np.float32)), big)


def test_finite_checks_toggle():
    prev = ad.set_finite_checks(False)
    try:
        out = ad.mul(
            ad.parameter(np.array([1e38], dtype=np.float32)),
            Tensor(np.array([1e38], dtype=np.float32)),
        )
        assert np.isinf(out.data[0])
    finally:
        ad.set_finite_checks(prev)


def test_primitive_forward_dispatch():
    out = ad.primitive_forward("softmax", [Tensor(np.zeros((2, 2)))])
    assert np.allclose(out.data, 0.25 * np.ones((2, 2)) * 2)
    out = ad.primitive_forward("bilinear_resize", [Tensor(np.ones((4, 4, 1)))], {"h_out": 2, "w_out": 2})
    assert out.shape == (2, 2, 1)
    with pytest.raises(ad.UnknownOpError):
        ad.primitive_forward("not_an_op", [])


def test_no_grad_suppresses_recording():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad and y._backward is None


def test_sanctioned_op_ids_are_registered():
    sanctioned = [
        "matmul", "add", "mul", "tanh", "gelu", "layernorm", "softmax",
        "conv2d", "bilinear_resize", "l2_normalize", "cosine_similarity",
        "cross_entropy_soft", "mse",
    ]
    for op in sanctioned:
        assert op in ad.PRIMITIVES

"""Engine verification: forward oracles and finite-difference gradients.

The convolution oracle below is a deliberately naive quadruple loop with no
shared code (no im2col, no striding tricks) so that agreement actually means
something.
"""

import itertools

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, assume, settings
from hypothesis import strategies as st

from denet import autodiff as ad
from denet import gradcheck as gc
from denet.autodiff import ConvSpec, Tensor
from denet.errors import InvalidSpecError, ShapeError, TapeError


def conv_oracle(x, w, b, stride=1, dilation=1, padding=0):
    """Direct sliding-window summation. (C_in,H,W) x (C_out,C_in,kh,kw)."""
    c_out, c_in, kh, kw = w.shape
    _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for co in range(c_out):
        for oy in range(oh):
            for ox in range(ow):
                acc = b[co]
                for ci in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[co, ci, i, j] * xp[
                                ci, oy * stride + i * dilation, ox * stride + j * dilation
                            ]
                out[co, oy, ox] = acc
    return out


def make_spec(w_shape, stride=1, dilation=1, padding=0):
    c_out, c_in, kh, kw = w_shape
    return ConvSpec(kernel_h=kh, kernel_w=kw, stride=stride, dilation=dilation,
                    padding=padding, channels_in=c_in, channels_out=c_out)


# ---------------------------------------------------------------- conv2d

def test_conv2d_1x1_identity():
    x = Tensor(np.arange(12.0).reshape(1, 3, 4))
    w = Tensor(np.ones((1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    out = ad.conv2d(x, w, b, make_spec((1, 1, 1, 1)))
    npt.assert_array_equal(out.data, x.data)


def test_conv2d_3x3_ones_hand_sum():
    # sum of 1..9 is 45
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 3, 3))
    w = Tensor(np.ones((1, 1, 3, 3)))
    b = Tensor(np.zeros(1))
    out = ad.conv2d(x, w, b, make_spec((1, 1, 3, 3)))
    assert out.data.shape == (1, 1, 1)
    assert out.item() == 45.0


def test_conv2d_dilation2_pad2_preserves_extents():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 11, 7)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    out = ad.conv2d(x, w, b, make_spec((3, 2, 3, 3), dilation=2, padding=2))
    assert out.data.shape == (3, 11, 7)


@pytest.mark.parametrize("stride,dilation,padding", [
    (1, 1, 0), (1, 1, 2), (2, 1, 1), (1, 2, 2), (2, 2, 3), (3, 1, 2),
])
def test_conv2d_matches_quadruple_loop(stride, dilation, padding):
    rng = np.random.default_rng(hash((stride, dilation, padding)) % 2**32)
    for _ in range(3):
        c_in = int(rng.integers(1, 5))
        c_out = int(rng.integers(1, 4))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(dilation * (kh - 1) + 1, 17))
        wd = int(rng.integers(dilation * (kw - 1) + 1, 17))
        x = rng.standard_normal((c_in, h, wd))
        w = rng.standard_normal((c_out, c_in, kh, kw))
        b = rng.standard_normal(c_out)
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b),
                        make_spec(w.shape, stride, dilation, padding))
        want = conv_oracle(x, w, b, stride, dilation, padding)
        assert got.data.shape == want.shape
        npt.assert_allclose(got.data, want, atol=1e-12, rtol=0)
        assert np.all(np.isfinite(got.data))


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(1, 24), w=st.integers(1, 24), k=st.integers(1, 5),
    stride=st.integers(1, 3), dilation=st.integers(1, 3), padding=st.integers(0, 3),
)
def test_conv2d_extent_formula(h, w, k, stride, dilation, padding):
    spec = ConvSpec(kernel_h=k, kernel_w=k, stride=stride, dilation=dilation,
                    padding=padding, channels_in=1, channels_out=1)
    oh = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    assume(oh >= 1 and ow >= 1)
    out = ad.conv2d(Tensor(np.zeros((1, h, w))), Tensor(np.zeros((1, 1, k, k))),
                    Tensor(np.zeros(1)), spec)
    assert out.data.shape == (1, oh, ow)


def test_conv2d_zero_size_output_rejected():
    spec = make_spec((1, 1, 5, 5))
    with pytest.raises(InvalidSpecError):
        ad.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))),
                  Tensor(np.zeros(1)), spec)


def test_conv2d_channel_mismatch_rejected():
    spec = make_spec((2, 3, 3, 3))
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((2, 3, 3, 3))),
                  Tensor(np.zeros(2)), spec)


def test_convspec_validation():
    with pytest.raises(InvalidSpecError):
        ConvSpec(kernel_h=0, kernel_w=3)
    with pytest.raises(InvalidSpecError):
        ConvSpec(kernel_h=3, kernel_w=3, padding=-1)


# ---------------------------------------------------- separable conv

def test_separable_single_channel_equals_composed_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 6, 6))
    dw = rng.standard_normal((1, 3, 3))
    pw = rng.standard_normal((1, 1, 1, 1))
    b = rng.standard_normal(1)
    spec = ConvSpec(3, 3, padding=1, channels_in=1, channels_out=1,
                    depthwise_separable=True)
    sep = ad.separable_conv2d(Tensor(x), Tensor(dw), Tensor(pw), Tensor(b), spec)
    composed = conv_oracle(x, pw[0, 0, 0, 0] * dw[None], b, padding=1)
    npt.assert_allclose(sep.data, composed, atol=1e-12, rtol=0)


def test_separable_zero_depthwise_gives_bias():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 5, 5))
    dw = np.zeros((3, 3, 3))
    pw = rng.standard_normal((2, 3, 1, 1))
    b = np.array([0.5, -1.5])
    spec = ConvSpec(3, 3, padding=1, channels_in=3, channels_out=2,
                    depthwise_separable=True)
    out = ad.separable_conv2d(Tensor(x), Tensor(dw), Tensor(pw), Tensor(b), spec)
    npt.assert_allclose(out.data, np.broadcast_to(b[:, None, None], (2, 5, 5)),
                        atol=0, rtol=0)


def test_separable_matches_two_stage_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 5))
    dw = rng.standard_normal((2, 3, 3))
    pw = rng.standard_normal((4, 2, 1, 1))
    b = rng.standard_normal(4)
    spec = ConvSpec(3, 3, padding=1, channels_in=2, channels_out=4,
                    depthwise_separable=True)
    got = ad.separable_conv2d(Tensor(x), Tensor(dw), Tensor(pw), Tensor(b), spec)

    # stage one: each channel convolved with its own kernel, no bias
    mid = np.stack([
        conv_oracle(x[c:c + 1], dw[c][None, None], np.zeros(1), padding=1)[0]
        for c in range(2)
    ])
    want = conv_oracle(mid, pw, b)
    npt.assert_allclose(got.data, want, atol=1e-12, rtol=0)


def test_separable_channel_mismatch_rejected():
    spec = ConvSpec(3, 3, padding=1, channels_in=3, channels_out=2,
                    depthwise_separable=True)
    with pytest.raises(ShapeError):
        ad.separable_conv2d(Tensor(np.zeros((3, 5, 5))), Tensor(np.zeros((2, 3, 3))),
                            Tensor(np.zeros((2, 3, 1, 1))), Tensor(np.zeros(2)), spec)


# ------------------------------------------------- transposed conv

def test_transposed_doubles_extents():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((3, 8, 8)))
    w = Tensor(rng.standard_normal((3, 2, 4, 4)))
    b = Tensor(rng.standard_normal(2))
    out = ad.transposed_conv2d(x, w, b, stride=2)
    assert out.data.shape == (2, 16, 16)


def test_transposed_impulse_stamps_kernel():
    rng = np.random.default_rng(5)
    x = np.zeros((1, 8, 8))
    x[0, 3, 3] = 1.0
    w = rng.standard_normal((1, 1, 4, 4))
    out = ad.transposed_conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), stride=2)
    want = np.zeros((1, 16, 16))
    want[0, 5:9, 5:9] = w[0, 0]  # 2*3 - padding(1) = 5
    npt.assert_allclose(out.data, want, atol=1e-15, rtol=0)


def test_transposed_triple_composition():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((1, 8, 8)))
    for i in range(3):
        w = Tensor(rng.standard_normal((1, 1, 4, 4)))
        x = ad.transposed_conv2d(x, w, Tensor(np.zeros(1)), stride=2)
    assert x.data.shape == (1, 64, 64)


@pytest.mark.parametrize("k", [2, 4, 6])
def test_transposed_adjoint_of_conv(k):
    # <conv(x), y> == <x, tconv(y)> with shared weights and no bias
    rng = np.random.default_rng(k)
    c1, c2, h = 3, 2, 8
    x = rng.standard_normal((c1, h, h))
    w = rng.standard_normal((c2, c1, k, k))
    y = rng.standard_normal((c2, h // 2, h // 2))
    spec = make_spec(w.shape, stride=2, padding=(k - 2) // 2)
    lhs = float(np.sum(ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(c2)), spec).data * y))
    rhs = float(np.sum(x * ad.transposed_conv2d(
        Tensor(y), Tensor(w), Tensor(np.zeros(c1)), stride=2).data))
    assert abs(lhs - rhs) <= 1e-10


def test_transposed_rejects_non_doubling_kernel():
    with pytest.raises(InvalidSpecError):
        ad.transposed_conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))),
                             Tensor(np.zeros(1)), stride=2)
    with pytest.raises(InvalidSpecError):
        ad.transposed_conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 4, 4))),
                             Tensor(np.zeros(1)), stride=3)


# ------------------------------------------------------ small ops

def test_relu_values():
    out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    npt.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_sum_all_quarter_grid():
    out = ad.sum_all(Tensor(np.full((2, 2), 0.25)))
    assert out.data.ndim == 0
    assert out.item() == 1.0


def test_max_pool_2x2():
    out = ad.max_pool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 2, 2)
    assert out.data.shape == (1, 1, 1)
    assert out.item() == 4.0


def test_max_pool_gradient_goes_to_argmax():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]), requires_grad=True)
    loss = ad.sum_all(ad.max_pool2d(x, 2, 2))
    ad.backward(loss)
    npt.assert_array_equal(x.grad, [[[0.0, 0.0], [0.0, 1.0]]])


def test_elementwise_shape_mismatch_rejected():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2)))
    for op in (ad.add, ad.sub, ad.mul):
        with pytest.raises(ShapeError):
            op(a, b)


# ------------------------------------------------------- backward

def test_bilinear_grad_w_equals_x():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((3, 4, 4)))
    w = Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True)
    loss = ad.sum_all(ad.mul(w, x))
    ad.backward(loss)
    npt.assert_array_equal(w.grad, x.data)


def test_conv_relu_sum_matches_finite_difference():
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(0.1, 1.0, (2, 6, 6)))
    w = Tensor(rng.uniform(-0.5, 0.5, (3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-0.5, 0.5, 3), requires_grad=True)
    spec = make_spec((3, 2, 3, 3), padding=1)

    def loss_fn():
        return ad.sum_all(ad.relu(ad.conv2d(x, w, b, spec)))

    loss = loss_fn()
    ad.backward(loss)
    for p in (w, b):
        fd = gc.fd_gradient(lambda: loss_fn().item(), p.data)
        assert gc.relative_error(p.grad, fd) < gc.OP_TOLERANCE


def test_every_op_matches_finite_difference():
    worst = gc.op_gradient_suite(seeds=range(10))
    assert set(worst) >= {"conv2d", "conv2d_strided", "conv2d_dilated",
                          "depthwise_conv2d", "separable_conv2d", "transposed_conv2d",
                          "relu", "max_pool2d", "add", "sub", "mul", "scale",
                          "add_const", "square", "sum_all"}
    for name, err in worst.items():
        assert err < gc.OP_TOLERANCE, f"{name}: {err}"


def test_gradient_accumulates_across_shared_use():
    # y = x + x doubles the upstream gradient
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.sum_all(ad.add(x, x))
    ad.backward(loss)
    npt.assert_array_equal(x.grad, [2.0])


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    y = ad.relu(x)
    with pytest.raises(TapeError):
        ad.backward(y)


def test_backward_twice_rejected():
    x = Tensor(np.array(1.0), requires_grad=True)
    loss = ad.square(x)
    ad.backward(loss)
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_backward_on_empty_tape_rejected():
    # no requires_grad anywhere -> nothing was recorded
    loss = ad.sum_all(Tensor(np.ones((2, 2))))
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_zero_grad_clears():
    x = Tensor(np.array(3.0), requires_grad=True)
    loss = ad.square(x)
    ad.backward(loss)
    assert x.grad is not None
    ad.zero_grad([x])
    assert x.grad is None or not np.any(x.grad)


def test_tensor_is_float64():
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float64
    assert Tensor(np.float32(1.5)).data.dtype == np.float64

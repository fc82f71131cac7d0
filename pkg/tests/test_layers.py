import numpy as np
import pytest

from ddcmseg.errors import ShapeError
from ddcmseg.layers import (BatchNormState, Conv2dSpec, PReluState, batch_norm,
                            conv2d, log_softmax_channels, max_pool, prelu, relu,
                            upsample_bilinear)
from ddcmseg.tensor import Tape, Tensor4, mul, sum_all

from _oracles import (assert_close_rel, central_difference, conv2d_standard,
                      sample_coords)


def t(arr, grad=False):
    return Tensor4(np.asarray(arr, np.float32), requires_grad=grad)


def projected_loss(forward):
    """float64 projection of a forward output against fixed weights."""
    out = forward()
    rng = np.random.default_rng(999)
    proj = rng.normal(0, 1, out.shape)
    return lambda: float((forward().data.astype(np.float64) * proj).sum()), proj


# -- convolution ---------------------------------------------------------------

def test_effective_kernel_formula():
    spec = Conv2dSpec(1, 1, kernel=3, dilation=2)
    assert spec.effective_kernel == 5
    assert Conv2dSpec(1, 1, kernel=3, dilation=1).effective_kernel == 3
    assert Conv2dSpec(1, 1, kernel=1, dilation=9).effective_kernel == 1


def test_conv_zero_input_zero_output():
    spec = Conv2dSpec.same(2, 3, 3, dilation=2)
    w = t(np.random.default_rng(0).normal(0, 1, spec.weight_shape()))
    out = conv2d(t(np.zeros((1, 2, 8, 8))), spec, w)
    assert not out.data.any()


def test_conv_impulse_dilation2():
    # 5x5 impulse at the center, all-ones 3x3 kernel, rate 2, same padding:
    # taps land exactly on the even grid positions
    x = np.zeros((1, 1, 5, 5), np.float32)
    x[0, 0, 2, 2] = 1.0
    spec = Conv2dSpec.same(1, 1, 3, dilation=2)
    out = conv2d(t(x), spec, t(np.ones((1, 1, 3, 3)))).data[0, 0]
    expected = np.zeros((5, 5), np.float32)
    for i in (0, 2, 4):
        for j in (0, 2, 4):
            expected[i, j] = 1.0
    assert np.array_equal(out, expected)


def test_conv_channel_mismatch_names_axis():
    spec = Conv2dSpec(3, 4, 3)
    w = t(np.zeros(spec.weight_shape()))
    with pytest.raises(ShapeError, match="channel"):
        conv2d(t(np.zeros((1, 2, 8, 8))), spec, w)


def test_conv_empty_output_is_error():
    spec = Conv2dSpec(1, 1, kernel=3, dilation=4)  # effective 9 > 8
    w = t(np.zeros(spec.weight_shape()))
    with pytest.raises(ShapeError, match="empty"):
        conv2d(t(np.zeros((1, 1, 8, 8))), spec, w)


@pytest.mark.parametrize("case", range(10))
def test_conv_dilation1_bitwise_vs_standard_oracle(case):
    rng = np.random.default_rng(100 + case)
    n, c, oc = (int(v) for v in rng.integers(1, 3, 3))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    h = int(rng.integers(k + 2, k + 8))
    w = int(rng.integers(k + 2, k + 8))
    x = rng.integers(-4, 5, (n, c, h, w)).astype(np.float32)
    wt = rng.integers(-3, 4, (oc, c, k, k)).astype(np.float32)
    b = rng.integers(-2, 3, oc).astype(np.float32)
    spec = Conv2dSpec(c, oc, k, 1, stride, padding, bias=True)
    got = conv2d(t(x), spec, t(wt), t(b.reshape(1, oc, 1, 1))).data
    want = conv2d_standard(x, wt, b, stride, padding)
    assert got.tobytes() == want.tobytes()


def test_effective_kernel_law_by_impulse_support():
    # impulse response support width equals k + (k-1)(r-1)
    for k in (1, 3):
        for r in range(1, 10):
            spec = Conv2dSpec.same(1, 1, k, dilation=r)
            e = spec.effective_kernel
            size = e + 8
            x = np.zeros((1, 1, size, size), np.float32)
            x[0, 0, size // 2, size // 2] = 1.0
            out = conv2d(t(x), spec, t(np.ones((1, 1, k, k)))).data[0, 0]
            rows = np.flatnonzero(out.any(axis=1))
            cols = np.flatnonzero(out.any(axis=0))
            assert rows[-1] - rows[0] + 1 == e
            assert cols[-1] - cols[0] + 1 == e


def test_conv_shape_law():
    rng = np.random.default_rng(3)
    for _ in range(30):
        k = int(rng.choice([1, 3]))
        r = int(rng.integers(1, 10))
        stride = int(rng.integers(1, 4))
        p = int(rng.integers(0, 5))
        e = k + (k - 1) * (r - 1)
        h = int(rng.integers(max(1, e - 2 * p), e - 2 * p + 12))
        w = int(rng.integers(max(1, e - 2 * p), e - 2 * p + 12))
        spec = Conv2dSpec(1, 1, k, r, stride, p)
        try:
            oh, ow = spec.output_hw(h, w)
        except ShapeError:
            assert (h + 2 * p - e) // stride + 1 < 1 or (w + 2 * p - e) // stride + 1 < 1
            continue
        out = conv2d(t(rng.normal(0, 1, (1, 1, h, w))), spec, t(np.ones((1, 1, k, k))))
        assert out.shape[2:] == (oh, ow) == ((h + 2 * p - e) // stride + 1,
                                             (w + 2 * p - e) // stride + 1)


def test_conv_gradients_match_central_differences():
    rng = np.random.default_rng(17)
    x = t(rng.normal(0, 1, (2, 3, 6, 6)), grad=True)
    spec = Conv2dSpec.same(3, 4, 3, dilation=2)
    w = t(rng.normal(0, 0.5, spec.weight_shape()), grad=True)
    proj = rng.normal(0, 1, (2, 4, 6, 6)).astype(np.float32)

    with Tape() as tape:
        loss = sum_all(mul(conv2d(x, spec, w), Tensor4(np.broadcast_to(proj, (2, 4, 6, 6)))))
    tape.backward(loss)

    def loss_fn():
        return float((conv2d(x, spec, w).data.astype(np.float64) * proj).sum())

    for tensor in (x, w):
        coords = sample_coords(tensor.shape, 5, rng)
        numeric = central_difference(loss_fn, tensor.data, coords)
        analytic = np.array([tensor.grad[c] for c in coords])
        assert_close_rel(analytic, numeric, 1e-3)


# -- batch norm -----------------------------------------------------------------

def test_batch_norm_train_standardizes():
    rng = np.random.default_rng(5)
    state = BatchNormState.create(3)
    x = t(rng.normal(3.0, 2.0, (4, 3, 8, 8)))
    out = batch_norm(x, state).data  # gamma=1, beta=0: output is the standardized map
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-4
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4


def test_batch_norm_eval_identity_with_default_stats():
    state = BatchNormState.create(2)
    state.mode = "eval"
    x = t(np.random.default_rng(1).normal(0, 1, (2, 2, 4, 4)))
    out = batch_norm(x, state).data
    assert np.allclose(out, x.data, atol=1e-5)


def test_batch_norm_running_stats_update():
    state = BatchNormState.create(1, momentum=0.1)
    x = t(np.full((1, 1, 2, 2), 4.0))
    batch_norm(x, state)
    assert np.isclose(state.running_mean.data[0, 0, 0, 0], 0.9 * 0 + 0.1 * 4.0)
    assert np.isclose(state.running_var.data[0, 0, 0, 0], 0.9 * 1 + 0.1 * 0.0)


def test_batch_norm_single_value_train_error():
    state = BatchNormState.create(3)
    with pytest.raises(ShapeError, match="variance"):
        batch_norm(t(np.zeros((1, 3, 1, 1))), state)


def test_batch_norm_channel_mismatch():
    state = BatchNormState.create(3)
    with pytest.raises(ShapeError, match="channel"):
        batch_norm(t(np.zeros((1, 2, 4, 4))), state)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gamma_gradient_matches_fd(mode):
    rng = np.random.default_rng(23)
    state = BatchNormState.create(3)
    state.gamma.data[:] = rng.normal(1, 0.2, state.gamma.shape).astype(np.float32)
    state.mode = mode
    x = t(rng.normal(0, 1.5, (3, 3, 5, 5)), grad=True)
    proj = rng.normal(0, 1, x.shape).astype(np.float32)

    def forward():
        state.mode = mode
        return batch_norm(x, state)

    with Tape() as tape:
        loss = sum_all(mul(forward(), Tensor4(proj)))
    tape.backward(loss)

    def loss_fn():
        return float((forward().data.astype(np.float64) * proj).sum())

    for tensor in (state.gamma, state.beta, x):
        coords = sample_coords(tensor.shape, 5, rng)
        numeric = central_difference(loss_fn, tensor.data, coords, step=1e-2)
        analytic = np.array([tensor.grad[c] for c in coords])
        assert_close_rel(analytic, numeric, 1e-2)


# -- prelu / relu ----------------------------------------------------------------

def test_prelu_positive_passthrough_any_slope():
    state = PReluState.create(2, init=0.7)
    x = t(np.abs(np.random.default_rng(2).normal(0, 1, (1, 2, 4, 4))))
    assert np.array_equal(prelu(x, state).data, x.data)


def test_prelu_negative_scaling_and_grads():
    state = PReluState.create(1, init=0.25)
    x = t([[[[-2.0, 3.0], [-4.0, 1.0]]]], grad=True)
    with Tape() as tape:
        loss = sum_all(prelu(x, state))
    tape.backward(loss)
    assert np.allclose(x.grad, [[[[0.25, 1.0], [0.25, 1.0]]]])
    assert np.isclose(state.slope.grad[0, 0, 0, 0], -2.0 + -4.0)


def test_prelu_gradient_matches_fd():
    rng = np.random.default_rng(31)
    state = PReluState.create(4)
    x = t(rng.normal(0, 1, (2, 4, 5, 5)), grad=True)
    proj = rng.normal(0, 1, x.shape).astype(np.float32)
    with Tape() as tape:
        loss = sum_all(mul(prelu(x, state), Tensor4(proj)))
    tape.backward(loss)

    def loss_fn():
        return float((prelu(x, state).data.astype(np.float64) * proj).sum())

    for tensor in (x, state.slope):
        coords = sample_coords(tensor.shape, 5, rng)
        numeric = central_difference(loss_fn, tensor.data, coords)
        analytic = np.array([tensor.grad[c] for c in coords])
        assert_close_rel(analytic, numeric, 1e-3)


def test_relu_gradient():
    x = t([[[[-1.0, 2.0], [3.0, -4.0]]]], grad=True)
    with Tape() as tape:
        loss = sum_all(relu(x))
    tape.backward(loss)
    assert np.array_equal(x.grad, [[[[0, 1], [1, 0]]]])


# -- pooling ----------------------------------------------------------------------

def test_max_pool_constant_image():
    x = t(np.full((1, 2, 8, 8), 3.5))
    out = max_pool(x, 2)
    assert out.shape == (1, 2, 4, 4)
    assert np.all(out.data == np.float32(3.5))
    padded = max_pool(t(np.full((1, 1, 7, 7), -1.0)), 3, stride=2, padding=1)
    assert np.all(padded.data == np.float32(-1.0))


def test_max_pool_window_too_large():
    with pytest.raises(ShapeError, match="larger"):
        max_pool(t(np.zeros((1, 1, 3, 3))), 4)


def test_max_pool_gradient_goes_to_first_argmax():
    x = t([[[[1.0, 1.0], [0.0, 1.0]]]], grad=True)  # tie: first-found wins
    with Tape() as tape:
        loss = sum_all(max_pool(x, 2))
    tape.backward(loss)
    assert np.array_equal(x.grad, [[[[1, 0], [0, 0]]]])


def test_max_pool_overlapping_gradient_matches_fd():
    rng = np.random.default_rng(37)
    x = t(rng.normal(0, 1, (2, 2, 7, 7)), grad=True)
    proj = rng.normal(0, 1, (2, 2, 4, 4)).astype(np.float32)
    with Tape() as tape:
        loss = sum_all(mul(max_pool(x, 3, stride=2, padding=1), Tensor4(proj)))
    tape.backward(loss)

    def loss_fn():
        return float((max_pool(x, 3, stride=2, padding=1).data.astype(np.float64) * proj).sum())

    coords = sample_coords(x.shape, 8, rng)
    numeric = central_difference(loss_fn, x.data, coords)
    analytic = np.array([x.grad[c] for c in coords])
    assert_close_rel(analytic, numeric, 1e-3)


# -- upsampling --------------------------------------------------------------------

def test_upsample_constant_preserved():
    x = t(np.full((1, 3, 4, 4), 2.25))
    out = upsample_bilinear(x, 4)
    assert out.shape == (1, 3, 16, 16)
    assert np.allclose(out.data, 2.25)


def test_upsample_factor_validation():
    with pytest.raises(ShapeError, match="factor"):
        upsample_bilinear(t(np.zeros((1, 1, 2, 2))), 0)


def test_upsample_linear_ramp_midpoints():
    x = t(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    out = upsample_bilinear(x, 2).data[0, 0, 0]
    assert np.allclose(out, [0.0, 0.25, 0.75, 1.0])


def test_upsample_gradient_matches_fd():
    rng = np.random.default_rng(41)
    x = t(rng.normal(0, 1, (1, 2, 3, 5)), grad=True)
    proj = rng.normal(0, 1, (1, 2, 6, 10)).astype(np.float32)
    with Tape() as tape:
        loss = sum_all(mul(upsample_bilinear(x, 2), Tensor4(proj)))
    tape.backward(loss)

    def loss_fn():
        return float((upsample_bilinear(x, 2).data.astype(np.float64) * proj).sum())

    coords = sample_coords(x.shape, 6, rng)
    numeric = central_difference(loss_fn, x.data, coords, step=1e-2)
    analytic = np.array([x.grad[c] for c in coords])
    assert_close_rel(analytic, numeric, 1e-3)


# -- log softmax ---------------------------------------------------------------------

def test_log_softmax_normalizes_channels():
    rng = np.random.default_rng(43)
    x = t(rng.normal(0, 3, (2, 6, 5, 5)))
    out = log_softmax_channels(x).data
    sums = np.exp(out).sum(axis=1)
    assert np.abs(sums - 1).max() < 1e-5


def test_log_softmax_gradient_matches_fd():
    rng = np.random.default_rng(47)
    x = t(rng.normal(0, 1, (1, 4, 3, 3)), grad=True)
    proj = rng.normal(0, 1, x.shape).astype(np.float32)
    with Tape() as tape:
        loss = sum_all(mul(log_softmax_channels(x), Tensor4(proj)))
    tape.backward(loss)

    def loss_fn():
        return float((log_softmax_channels(x).data.astype(np.float64) * proj).sum())

    coords = sample_coords(x.shape, 6, rng)
    numeric = central_difference(loss_fn, x.data, coords, step=1e-2)
    analytic = np.array([x.grad[c] for c in coords])
    assert_close_rel(analytic, numeric, 1e-3)

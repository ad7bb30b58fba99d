import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sacnn import layers as L
from sacnn.errors import ShapeError


def direct_conv(x, w, b):
    """Six nested loops over (n, o, y, x, c, ky, kx) with zero padding."""
    n_, c_in, H, W = x.shape
    c_out, _, k, _ = w.shape
    p = (k - 1) // 2
    out = np.zeros((n_, c_out, H, W))
    for n in range(n_):
        for o in range(c_out):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(c_in):
                        for a in range(k):
                            for d in range(k):
                                y, z = i + a - p, j + d - p
                                if 0 <= y < H and 0 <= z < W:
                                    acc += x[n, c, y, z] * w[o, c, a, d]
                    out[n, o, i, j] = acc
    return out


def brute_pool2(x):
    n_, c_, H, W = x.shape
    out = np.empty((n_, c_, H // 2, W // 2))
    for n in range(n_):
        for c in range(c_):
            for i in range(H // 2):
                for j in range(W // 2):
                    out[n, c, i, j] = max(x[n, c, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1))
    return out


def stride2_conv_matrix(w, h, wd):
    """Dense matrix of the stride-2 2x2 convolution y (c_out,2h,2w) -> (c_in,h,w), built by loops."""
    c_in, c_out = w.shape[:2]
    A = np.zeros((c_in * h * wd, c_out * 4 * h * wd))
    for c in range(c_in):
        for i in range(h):
            for j in range(wd):
                row = (c * h + i) * wd + j
                for o in range(c_out):
                    for a in (0, 1):
                        for b in (0, 1):
                            A[row, (o * 2 * h + 2 * i + a) * 2 * wd + 2 * j + b] = w[c, o, a, b]
    return A


# -- convolution ------------------------------------------------------------


def test_conv_zero_weights_gives_bias():
    layer = L.ConvLayer(np.zeros((2, 3, 3, 3)), np.array([1.5, -2.0]))
    out = L.conv_forward(np.ones((1, 3, 4, 5)), layer)
    assert np.all(out[:, 0] == 1.5) and np.all(out[:, 1] == -2.0)


def test_conv_identity_1x1(rng):
    layer = L.ConvLayer(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    x = rng.standard_normal((1, 3, 4, 4))
    np.testing.assert_array_equal(L.conv_forward(x, layer), x)


def test_conv_matches_direct_loops(rng):
    x = rng.standard_normal((1, 3, 5, 5))
    layer = L.ConvLayer(rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2))
    np.testing.assert_allclose(L.conv_forward(x, layer), direct_conv(x, layer.weight, layer.bias), atol=1e-12, rtol=0)


def test_conv_channel_mismatch():
    layer = L.ConvLayer(np.zeros((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        L.conv_forward(np.zeros((1, 2, 4, 4)), layer)


def test_conv_layer_rejects_even_kernel():
    with pytest.raises(ShapeError):
        L.ConvLayer(np.zeros((1, 1, 2, 2)), np.zeros(1))


def test_conv_backward_zero_grad(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    layer = L.ConvLayer(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    g = L.conv_backward(x, layer, np.zeros((1, 3, 4, 4)))
    assert not g.grad_input.any() and not g.grad_weights.any() and not g.grad_bias.any()


def test_conv_backward_bias_is_channel_sum(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    layer = L.ConvLayer(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    go = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(L.conv_backward(x, layer, go).grad_bias, go.sum(axis=(0, 2, 3)))


def test_conv_backward_shape_error(rng):
    layer = L.ConvLayer(rng.standard_normal((3, 2, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        L.conv_backward(np.zeros((1, 2, 4, 4)), layer, np.zeros((1, 3, 4, 5)))


@pytest.mark.parametrize("k", [1, 3])
def test_conv_gradcheck(rng, k):
    layer = L.ConvLayer(rng.standard_normal((3, 2, k, k)), rng.standard_normal(3))
    assert L.grad_check(layer, rng.standard_normal((1, 2, 5, 5)), 1e-5, rng) < 1e-6


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(seed, alpha, beta):
    r = np.random.default_rng(seed)
    layer = L.ConvLayer(r.standard_normal((2, 3, 3, 3)), np.zeros(2))
    x, y = r.standard_normal((2, 1, 3, 4, 4))
    lhs = L.conv_forward(alpha * x + beta * y, layer)
    rhs = alpha * L.conv_forward(x, layer) + beta * L.conv_forward(y, layer)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=0)


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3]))
def test_conv_adjoint(seed, k):
    r = np.random.default_rng(seed)
    layer = L.ConvLayer(r.standard_normal((2, 3, k, k)), np.zeros(2))
    x = r.standard_normal((1, 3, 5, 4))
    g = r.standard_normal((1, 2, 5, 4))
    lhs = np.sum(L.conv_forward(x, layer) * g)
    rhs = np.sum(x * L.conv_backward(x, layer, g).grad_input)
    assert lhs == pytest.approx(rhs, abs=1e-10)


# -- max pooling ------------------------------------------------------------


def test_maxpool_block():
    out, _ = L.maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), L.MaxPoolLayer(2))
    assert out.shape == (1, 1, 1, 1) and out.item() == 4


def test_maxpool_stride1_constant():
    out, _ = L.maxpool_forward(np.full((1, 2, 5, 3), 7.0), L.MaxPoolLayer(1))
    assert out.shape == (1, 2, 5, 3) and np.all(out == 7.0)


def test_maxpool_matches_brute_force(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    out, _ = L.maxpool_forward(x, L.MaxPoolLayer(2))
    np.testing.assert_array_equal(out, brute_pool2(x))


def test_maxpool_stride1_brute_force(rng):
    x = rng.standard_normal((1, 2, 4, 5))
    out, _ = L.maxpool_forward(x, L.MaxPoolLayer(1))
    padded = np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 1)), constant_values=-np.inf)
    for i in range(4):
        for j in range(5):
            np.testing.assert_array_equal(out[:, :, i, j], padded[:, :, i : i + 2, j : j + 2].max(axis=(2, 3)))


def test_maxpool_odd_dims_rejected():
    with pytest.raises(ShapeError):
        L.maxpool_forward(np.zeros((1, 1, 5, 4)), L.MaxPoolLayer(2))


def test_maxpool_invalid_stride():
    with pytest.raises(ValueError):
        L.MaxPoolLayer(3)


def test_maxpool_tie_breaks_first_in_scan_order():
    x = np.full((1, 1, 2, 2), 1.0)
    _, ctx = L.maxpool_forward(x, L.MaxPoolLayer(2))
    g = L.maxpool_backward(ctx, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


def test_maxpool_backward_one_per_window(rng):
    x = rng.permutation(36).astype(float).reshape(1, 1, 6, 6)
    out, ctx = L.maxpool_forward(x, L.MaxPoolLayer(2))
    g = L.maxpool_backward(ctx, np.ones_like(out))
    blocks = (g != 0).reshape(1, 1, 3, 2, 3, 2).sum(axis=(3, 5))
    assert np.all(blocks == 1)


def test_maxpool_backward_zero(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    out, ctx = L.maxpool_forward(x, L.MaxPoolLayer(1))
    assert not L.maxpool_backward(ctx, np.zeros_like(out)).any()


@pytest.mark.parametrize("stride,shape", [(1, (1, 1, 5, 5)), (2, (1, 2, 6, 6))])
def test_maxpool_gradcheck(rng, stride, shape):
    x = rng.permutation(int(np.prod(shape))).astype(float).reshape(shape)
    assert L.grad_check(L.MaxPoolLayer(stride), x, 1e-5, rng) < 1e-6


@given(st.floats(-100, 100), st.integers(1, 4), st.integers(1, 4))
def test_pool_then_nearest_upsample_idempotent_on_constants(v, h, w):
    x = np.full((1, 1, 2 * h, 2 * w), v)
    out, _ = L.maxpool_forward(x, L.MaxPoolLayer(2))
    up = out.repeat(2, axis=2).repeat(2, axis=3)
    np.testing.assert_array_equal(up, x)


# -- deconvolution ----------------------------------------------------------


def test_deconv_single_pixel():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    layer = L.DeconvLayer(np.array([[[[a, b], [c, d]]]]))
    out = L.deconv_forward(np.full((1, 1, 1, 1), 2.5), layer)
    np.testing.assert_array_equal(out[0, 0], [[2.5 * a, 2.5 * b], [2.5 * c, 2.5 * d]])


def test_deconv_shape(rng):
    layer = L.DeconvLayer(rng.standard_normal((3, 2, 2, 2)))
    assert L.deconv_forward(rng.standard_normal((1, 3, 4, 4)), layer).shape == (1, 2, 8, 8)


def test_deconv_is_adjoint_of_stride2_conv(rng):
    w = rng.standard_normal((2, 3, 2, 2))
    x = rng.standard_normal((1, 2, 3, 4))
    A = stride2_conv_matrix(w, 3, 4)
    expected = (A.T @ x.reshape(-1)).reshape(1, 3, 6, 8)
    np.testing.assert_allclose(L.deconv_forward(x, L.DeconvLayer(w)), expected, atol=1e-12, rtol=0)


def test_deconv_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        L.deconv_forward(np.zeros((1, 3, 2, 2)), L.DeconvLayer(np.zeros((2, 1, 2, 2))))


def test_deconv_backward_zero(rng):
    layer = L.DeconvLayer(rng.standard_normal((2, 3, 2, 2)))
    g = L.deconv_backward(rng.standard_normal((1, 2, 3, 3)), layer, np.zeros((1, 3, 6, 6)))
    assert not g.grad_input.any() and not g.grad_weights.any()


def test_deconv_backward_ones_kernel_block_sums(rng):
    layer = L.DeconvLayer(np.ones((1, 1, 2, 2)))
    go = rng.standard_normal((1, 1, 6, 4))
    g = L.deconv_backward(np.zeros((1, 1, 3, 2)), layer, go)
    np.testing.assert_allclose(g.grad_input, go.reshape(1, 1, 3, 2, 2, 2).sum(axis=(3, 5)))


def test_deconv_gradcheck(rng):
    layer = L.DeconvLayer(rng.standard_normal((2, 3, 2, 2)))
    assert L.grad_check(layer, rng.standard_normal((1, 2, 3, 3)), 1e-5, rng) < 1e-6


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4))
def test_deconv_adjoint_and_shape(seed, h, w):
    r = np.random.default_rng(seed)
    layer = L.DeconvLayer(r.standard_normal((2, 3, 2, 2)))
    x = r.standard_normal((1, 2, h, w))
    out = L.deconv_forward(x, layer)
    assert out.shape == (1, 3, 2 * h, 2 * w)
    g = r.standard_normal(out.shape)
    assert np.sum(out * g) == pytest.approx(np.sum(x * L.deconv_backward(x, layer, g).grad_input), abs=1e-10)


# -- relu and concat ----------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(L.relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


def test_relu_backward_masks_nonpositive():
    np.testing.assert_array_equal(L.relu_backward(np.array([-1.0, 0.0, 2.0]), np.array([5.0, 5.0, 5.0])), [0, 0, 5])


@given(arrays(np.float64, (1, 1, 3, 3), elements=st.floats(-1e6, 1e6)))
def test_relu_idempotent(x):
    np.testing.assert_array_equal(L.relu_forward(L.relu_forward(x)), L.relu_forward(x))


def test_relu_gradcheck(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    assert L.grad_check("relu", x, 1e-5, rng) < 1e-6


def test_concat_shapes(rng):
    out = L.concat_channels(np.zeros((1, 2, 4, 4)), np.ones((1, 3, 4, 4)))
    assert out.shape == (1, 5, 4, 4)
    assert not out[:, :2].any() and out[:, 2:].all()


def test_concat_split_roundtrip(rng):
    a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
    a2, b2 = L.split_channels(L.concat_channels(a, b), 2)
    assert a2.tobytes() == a.tobytes() and b2.tobytes() == b.tobytes()


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        L.concat_channels(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 3, 4)))


# -- gradient checker itself --------------------------------------------------


def test_grad_check_catches_wrong_backward(rng, monkeypatch):
    layer = L.ConvLayer(rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2))
    good = L.conv_backward

    def bad(x, lyr, g):
        out = good(x, lyr, g)
        return L.LayerGrads(out.grad_input * 1.01, out.grad_weights, out.grad_bias)

    monkeypatch.setattr(L, "conv_backward", bad)
    assert L.grad_check(layer, rng.standard_normal((1, 2, 4, 4)), 1e-5, rng) > 1e-3

"""Conv / norm / activation / resample primitives against independent
oracles: scipy correlation, naive window loops, and hand matrices."""

import numpy as np
import pytest
from scipy.signal import correlate2d

from csdn.autodiff import AutodiffError, Tensor, backward, reduce_sum
from csdn.layers import (BatchNorm2d, Conv2d, PReLU, _batchnorm_train,
                         _out_size, batchnorm2d_infer, concat_channels,
                         conv2d, global_avg_pool, he_uniform, pixel_shuffle,
                         pixel_unshuffle, pool2d, prelu, resize, sigmoid)

F64 = np.float64


def t(rng, *shape, grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


# -- convolution --------------------------------------------------------------


def conv_oracle(x, w, b, stride, padding):
    # dense cross-correlation, nested loops over scipy 2-d correlate
    n, c, h, w_ = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = _out_size(h, kh, stride, padding)
    ow = _out_size(w_, kw, stride, padding)
    out = np.zeros((n, c_out, oh, ow))
    for i in range(n):
        for o in range(c_out):
            acc = np.zeros((h + 2 * padding - kh + 1, w_ + 2 * padding - kw + 1))
            for j in range(c):
                acc += correlate2d(xp[i, j], w[o, j], mode="valid")
            out[i, o] = acc[::stride, ::stride]
    if b is not None:
        out += b
    return out


def test_conv2d_matches_scipy():
    for seed in range(8):
        rng = np.random.Generator(np.random.PCG64(seed))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        k = int(rng.integers(1, 4))
        x = t(rng, 2, 3, 7, 8)
        w = t(rng, 4, 3, k, k)
        b = t(rng, 1, 4, 1, 1)
        got = conv2d(x, w, b, stride=stride, padding=padding)
        want = conv_oracle(x.data, w.data, b.data, stride, padding)
        assert got.shape == want.shape
        assert np.allclose(got.data, want, atol=1e-12)


def test_conv2d_depthwise_matches_per_channel_scipy():
    for seed in range(6):
        rng = np.random.Generator(np.random.PCG64(seed + 50))
        x = t(rng, 2, 5, 6, 6)
        w = t(rng, 5, 1, 3, 3)
        got = conv2d(x, w, None, stride=1, padding=1, groups=5)
        for j in range(5):
            xp = np.pad(x.data[:, j], ((0, 0), (1, 1), (1, 1)))
            for i in range(2):
                want = correlate2d(xp[i], w.data[j, 0], mode="valid")
                assert np.allclose(got.data[i, j], want, atol=1e-12)


def test_depthwise_channel_independence():
    rng = np.random.Generator(np.random.PCG64(3))
    x = rng.normal(size=(1, 6, 8, 8))
    w = Tensor(rng.normal(size=(6, 1, 3, 3)))
    base = conv2d(Tensor(x.copy()), w, None, padding=1, groups=6).data
    bumped = x.copy()
    bumped[:, 2] += 1.0
    out = conv2d(Tensor(bumped), w, None, padding=1, groups=6).data
    changed = [j for j in range(6)
               if not np.array_equal(out[:, j], base[:, j])]
    assert changed == [2]


def test_conv2d_shape_guards():
    x = Tensor.ones((1, 4, 8, 8))
    with pytest.raises(ValueError, match="groups"):
        conv2d(x, Tensor.ones((4, 2, 3, 3)), None, groups=2)
    with pytest.raises(ValueError, match="depthwise"):
        conv2d(x, Tensor.ones((8, 1, 3, 3)), None, groups=4)
    with pytest.raises(ValueError, match="input channels"):
        conv2d(x, Tensor.ones((2, 3, 3, 3)), None)
    with pytest.raises(ValueError, match="bias"):
        conv2d(x, Tensor.ones((2, 4, 3, 3)), Tensor.ones((1, 3, 1, 1)))


def test_conv2d_input_gradient_strided():
    # dL/dx for L = sum(conv(x)) equals correlation of ones with flipped kernel;
    # checked against a brute accumulation loop
    rng = np.random.Generator(np.random.PCG64(7))
    x = t(rng, 1, 2, 6, 6, grad=True)
    w = t(rng, 3, 2, 3, 3)
    out = conv2d(x, w, None, stride=2, padding=1)
    backward(reduce_sum(out))
    want = np.zeros_like(x.data)
    _, _, oh, ow = out.shape
    for o in range(3):
        for oy in range(oh):
            for ox in range(ow):
                for ky in range(3):
                    for kx in range(3):
                        iy, ix = 2 * oy + ky - 1, 2 * ox + kx - 1
                        if 0 <= iy < 6 and 0 <= ix < 6:
                            want[0, :, iy, ix] += w.data[o, :, ky, kx]
    assert np.allclose(x.grad, want, atol=1e-12)


# -- activations --------------------------------------------------------------


def test_prelu_values_and_alpha_guard():
    rng = np.random.Generator(np.random.PCG64(1))
    x = t(rng, 2, 3, 4, 4)
    alpha = Tensor(np.array([0.1, 0.5, -0.2]).reshape(1, 3, 1, 1))
    y = prelu(x, alpha).data
    want = np.where(x.data < 0, alpha.data * x.data, x.data)
    assert np.array_equal(y, want)
    with pytest.raises(ValueError, match="alpha"):
        prelu(x, Tensor.ones((1, 4, 1, 1), dtype=F64))


def test_sigmoid_values_and_saturation():
    rng = np.random.Generator(np.random.PCG64(2))
    x = t(rng, 1, 2, 3, 3)
    assert np.allclose(sigmoid(x).data, 1.0 / (1.0 + np.exp(-x.data)))
    ext = Tensor(np.array([-1000.0, 1000.0, 0.0, -40.0]).reshape(1, 1, 2, 2))
    y = sigmoid(ext).data.ravel()
    assert y[0] == 0.0 and y[1] == 1.0 and y[2] == 0.5
    assert 0.0 < y[3] < 1e-15


# -- pooling ------------------------------------------------------------------


def pool_oracle(kind, x, k, s, p):
    n, c, h, w = x.shape
    oh, ow = _out_size(h, k, s, p), _out_size(w, k, s, p)
    out = np.zeros((n, c, oh, ow))
    for oy in range(oh):
        for ox in range(ow):
            ys = [y for y in range(s * oy - p, s * oy - p + k) if 0 <= y < h]
            xs = [z for z in range(s * ox - p, s * ox - p + k) if 0 <= z < w]
            win = x[:, :, ys][:, :, :, xs]
            out[:, :, oy, ox] = (win.max(axis=(2, 3)) if kind == "max"
                                 else win.mean(axis=(2, 3)))
    return out


def test_pool2d_matches_window_loop():
    for seed in range(6):
        rng = np.random.Generator(np.random.PCG64(seed + 20))
        x = t(rng, 2, 3, 9, 7)
        for kind in ("max", "avg"):
            got = pool2d(kind, x, kernel=3, stride=2, padding=1)
            want = pool_oracle(kind, x.data, 3, 2, 1)
            assert np.allclose(got.data, want, atol=1e-12), (kind, seed)


def test_pool2d_kind_guard():
    with pytest.raises(ValueError, match="pool kind"):
        pool2d("median", Tensor.ones((1, 1, 4, 4)))


def test_max_pool_gradient_routes_to_argmax():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4), requires_grad=True)
    out = pool2d("max", x, kernel=2, stride=2, padding=0)
    backward(reduce_sum(out))
    want = np.zeros((1, 1, 4, 4))
    want[0, 0, 1::2, 1::2] = 1.0  # bottom-right of each 2x2 block is largest
    assert np.array_equal(x.grad, want)


def test_global_avg_pool():
    rng = np.random.Generator(np.random.PCG64(4))
    x = t(rng, 2, 3, 5, 7, grad=True)
    got = global_avg_pool(x)
    assert got.shape == (2, 3, 1, 1)
    assert np.allclose(got.data, x.data.mean(axis=(2, 3), keepdims=True))
    backward(reduce_sum(got))
    assert np.allclose(x.grad, np.full_like(x.data, 1.0 / 35.0))


# -- resize -------------------------------------------------------------------


def test_resize_identity_when_same_size():
    rng = np.random.Generator(np.random.PCG64(5))
    x = t(rng, 1, 2, 6, 6)
    for mode in ("nearest", "bilinear", "bicubic"):
        assert np.allclose(resize(x, 6, 6, mode).data, x.data, atol=1e-12)


def test_resize_bilinear_hand_case():
    # doubling [a, b] under the half-pixel convention:
    # [a, 0.75a+0.25b, 0.25a+0.75b, b]
    x = Tensor(np.array([2.0, 6.0]).reshape(1, 1, 1, 2))
    y = resize(x, 1, 4, "bilinear").data.ravel()
    assert np.allclose(y, [2.0, 3.0, 5.0, 6.0])


def test_resize_rows_are_convex_weights():
    # every output pixel of a constant image stays that constant
    c = Tensor(np.full((1, 1, 13, 9), 3.7))
    for mode in ("nearest", "bilinear", "bicubic"):
        for hw in ((26, 18), (7, 5), (64, 64)):
            out = resize(c, hw[0], hw[1], mode)
            assert np.allclose(out.data, 3.7, atol=1e-12), (mode, hw)


def test_resize_downsample_by_two_averages_pairs():
    # half-pixel bilinear x0.5 lands exactly between sample pairs
    x = Tensor(np.arange(8.0).reshape(1, 1, 1, 8))
    y = resize(x, 1, 4, "bilinear").data.ravel()
    assert np.allclose(y, [0.5, 2.5, 4.5, 6.5])


def test_resize_guards():
    x = Tensor.ones((1, 1, 4, 4))
    with pytest.raises(ValueError, match="resize target"):
        resize(x, 0, 4)
    with pytest.raises(ValueError, match="resize mode"):
        resize(x, 4, 4, "lanczos")


def test_resize_gradient_is_transpose():
    rng = np.random.Generator(np.random.PCG64(6))
    x = t(rng, 1, 1, 4, 4, grad=True)
    out = resize(x, 8, 8, "bicubic")
    backward(reduce_sum(out))
    # sum over a row-stochastic upsample distributes 4 units per source sample
    assert np.allclose(x.grad.sum(), 64.0, atol=1e-9)


# -- pixel shuffle ------------------------------------------------------------


def test_pixel_shuffle_roundtrip_bit_exact():
    for seed in range(10):
        rng = np.random.Generator(np.random.PCG64(seed + 30))
        for r in (2, 3, 4):
            x = t(rng, 2, 3, 4 * r, 3 * r)
            back = pixel_shuffle(pixel_unshuffle(x, r), r)
            assert np.array_equal(back.data, x.data)


def test_pixel_unshuffle_channel_layout():
    # paint each intra-block offset with a distinct constant; output channel
    # c*r*r + i*r + j must hold offset (i, j) of input channel c
    r = 2
    x = np.zeros((1, 2, 4, 4))
    for c in range(2):
        for i in range(r):
            for j in range(r):
                x[0, c, i::r, j::r] = 100 * c + 10 * i + j
    y = pixel_unshuffle(Tensor(x), r).data
    assert y.shape == (1, 8, 2, 2)
    for c in range(2):
        for i in range(r):
            for j in range(r):
                ch = c * r * r + i * r + j
                assert np.all(y[0, ch] == 100 * c + 10 * i + j)


def test_pixel_shuffle_guards():
    with pytest.raises(ValueError, match="not divisible"):
        pixel_unshuffle(Tensor.ones((1, 1, 5, 4)), 2)
    with pytest.raises(ValueError, match="not divisible"):
        pixel_shuffle(Tensor.ones((1, 6, 4, 4)), 2)


# -- concat -------------------------------------------------------------------


def test_concat_values_and_backward_split():
    rng = np.random.Generator(np.random.PCG64(8))
    a = t(rng, 2, 3, 4, 4, grad=True)
    b = t(rng, 2, 5, 4, 4, grad=True)
    out = concat_channels([a, b])
    assert out.shape == (2, 8, 4, 4)
    assert np.array_equal(out.data[:, :3], a.data)
    assert np.array_equal(out.data[:, 3:], b.data)
    weights = Tensor(np.arange(out.size(), dtype=F64).reshape(out.shape))
    backward(reduce_sum(out * weights))
    assert np.array_equal(a.grad, weights.data[:, :3])
    assert np.array_equal(b.grad, weights.data[:, 3:])


def test_concat_guards():
    with pytest.raises(ValueError, match="concat"):
        concat_channels([])
    with pytest.raises(ValueError, match="mismatch"):
        concat_channels([Tensor.ones((1, 2, 4, 4)), Tensor.ones((1, 2, 5, 4))])


# -- batch norm ---------------------------------------------------------------


def test_batchnorm_train_normalizes():
    for seed in range(5):
        rng = np.random.Generator(np.random.PCG64(seed + 40))
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 8, 8)))
        g = Tensor.ones((1, 3, 1, 1), dtype=F64, requires_grad=True)
        b = Tensor.zeros((1, 3, 1, 1), dtype=F64, requires_grad=True)
        y, mean, var = _batchnorm_train(x, g, b, 1e-5)
        assert np.allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        assert np.allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        assert np.allclose(mean, x.data.mean(axis=(0, 2, 3)))
        assert np.allclose(var, x.data.var(axis=(0, 2, 3)))  # biased


def test_batchnorm_train_needs_two_samples():
    with pytest.raises(ValueError, match="n\\*h\\*w >= 2"):
        _batchnorm_train(Tensor.ones((1, 3, 1, 1), dtype=F64),
                         Tensor.ones((1, 3, 1, 1), dtype=F64),
                         Tensor.zeros((1, 3, 1, 1), dtype=F64), 1e-5)


def test_batchnorm_module_running_stats():
    rng = np.random.Generator(np.random.PCG64(9))
    bn = BatchNorm2d(3, momentum=0.1)
    x = Tensor(rng.normal(2.0, 1.5, size=(4, 3, 8, 8)).astype(np.float32))
    bn(x)
    bm = x.data.mean(axis=(0, 2, 3))
    bv = x.data.var(axis=(0, 2, 3))
    assert np.allclose(bn.running_mean.data.ravel(), 0.1 * bm, atol=1e-6)
    assert np.allclose(bn.running_var.data.ravel(), 0.9 + 0.1 * bv, atol=1e-6)

    bn.eval()
    y = bn(x)
    rm = bn.running_mean.data
    rv = bn.running_var.data
    want = (x.data - rm) / np.sqrt(rv + bn.eps)
    assert np.allclose(y.data, want, atol=1e-6)


def test_batchnorm_eval_guards_running_var():
    bn = BatchNorm2d(2)
    bn.eval()
    bn.running_var.data[0, 1] = -1.0
    with pytest.raises(AutodiffError, match="running_var"):
        bn(Tensor.ones((1, 2, 4, 4)))


def test_batchnorm_infer_matches_formula():
    rng = np.random.Generator(np.random.PCG64(10))
    x = t(rng, 2, 3, 4, 4)
    g = t(rng, 1, 3, 1, 1)
    b = t(rng, 1, 3, 1, 1)
    mean = rng.normal(size=(1, 3, 1, 1))
    var = rng.uniform(0.5, 2.0, size=(1, 3, 1, 1))
    y = batchnorm2d_infer(x, g, b, mean, var, 1e-5)
    want = g.data * (x.data - mean) / np.sqrt(var + 1e-5) + b.data
    assert np.allclose(y.data, want, atol=1e-12)


# -- modules and init ---------------------------------------------------------


def test_he_uniform_bound_and_determinism():
    a = he_uniform(np.random.Generator(np.random.PCG64(11)), (64, 3, 3, 3),
                   27, np.float32)
    b = he_uniform(np.random.Generator(np.random.PCG64(11)), (64, 3, 3, 3),
                   27, np.float32)
    assert np.array_equal(a, b)
    bound = np.sqrt(6.0 / 27.0)
    assert np.abs(a).max() <= bound
    assert np.abs(a).max() > 0.8 * bound  # actually fills the range


def test_conv_module_parameters():
    conv = Conv2d(3, 8, kernel=3, padding=1,
                  rng=np.random.Generator(np.random.PCG64(12)))
    names = sorted(n for n, _ in conv.named_parameters())
    assert names == ["bias", "weight"]
    assert conv.weight.shape == (8, 3, 3, 3)
    assert np.all(conv.bias.data == 0.0)

    nobias = Conv2d(3, 8, bias=False)
    assert [n for n, _ in nobias.named_parameters()] == ["weight"]
    with pytest.raises(ValueError, match="groups"):
        Conv2d(3, 8, groups=2)


def test_prelu_module_init():
    act = PReLU(5)
    assert act.alpha.shape == (1, 5, 1, 1)
    assert np.all(act.alpha.data == 0.25)
    x = Tensor(-np.ones((1, 5, 2, 2), dtype=np.float32))
    assert np.allclose(act(x).data, -0.25)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import naive_conv, naive_pool
from ednet.tensor import (
    BatchNorm, ConvParams, avgpool2d, batchnorm_infer, concat_channels, conv2d, conv2d_direct,
    fold_bn_into_conv, maxpool2d, sigmoid, silu, split_channels, upsample_nearest2x,
)


def rand(rng, *shape):
    return rng.uniform(-1, 1, shape).astype(np.float32)


# -- conv2d ------------------------------------------------------------------------

def test_identity_1x1_kernel():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 1, 1), np.float32)
    for method in ("gemm", "direct"):
        assert np.array_equal(conv2d(x, w, method=method), x)


def test_stride2_conv_matches_naive_loop(rng):
    x, w, b = rand(rng, 2, 3, 8, 8), rand(rng, 5, 3, 3, 3), rand(rng, 5)
    p = ConvParams.make(3, 2, 1)
    ref = naive_conv(x, w, b, (2, 2), (1, 1))
    assert conv2d(x, w, b, p).shape == (2, 5, 4, 4)
    assert np.abs(conv2d(x, w, b, p) - ref).max() <= 1e-5
    assert np.abs(conv2d_direct(x, w, b, p) - ref).max() <= 1e-5


@st.composite
def conv_case(draw):
    g = draw(st.sampled_from([1, 1, 2, 4, "dw"]))
    base = draw(st.integers(1, 4))
    c = base * (4 if g == "dw" else (g if isinstance(g, int) else 1))
    groups = c if g == "dw" else g
    oc = c if g == "dw" else groups * draw(st.integers(1, 4))
    kh, kw = draw(st.sampled_from([(1, 1), (3, 3), (5, 5), (1, 3), (3, 1), (1, 5)]))
    s = draw(st.integers(1, 3))
    ph, pw = draw(st.integers(0, kh // 2)), draw(st.integers(0, kw // 2))
    h, w = draw(st.integers(kh, 12)), draw(st.integers(kw, 12))
    seed = draw(st.integers(0, 2 ** 31))
    return c, oc, groups, (kh, kw), s, (ph, pw), h, w, seed


@given(conv_case())
def test_gemm_matches_direct_property(case):
    c, oc, groups, k, s, pad, h, w, seed = case
    rng = np.random.default_rng(seed)
    x, wt, b = rand(rng, 2, c, h, w), rand(rng, oc, c // groups, *k), rand(rng, oc)
    p = ConvParams(k, (s, s), pad, groups)
    assert np.abs(conv2d(x, wt, b, p) - conv2d_direct(x, wt, b, p)).max() <= 1e-5


def test_strip_pair_equals_rank1_depthwise(rng):
    c, k = 6, 7
    x = rand(rng, 1, c, 15, 13)
    wr, wc = rand(rng, c, 1, 1, k), rand(rng, c, 1, k, 1)
    pair = conv2d(conv2d(x, wr, None, ConvParams((1, k), (1, 1), (0, k // 2), c)),
                  wc, None, ConvParams((k, 1), (1, 1), (k // 2, 0), c))
    full = np.einsum("cu,cv->cuv", wc[:, 0, :, 0], wr[:, 0, 0, :])[:, None]
    ref = naive_conv(x, full, None, (1, 1), (k // 2, k // 2), groups=c)
    assert np.abs(pair - ref).max() <= 1e-5


@pytest.mark.parametrize("wshape,groups,match", [
    ((4, 3, 3, 3), 1, "does not match input channels"),
    ((4, 2, 3, 3), 2, "divisible by groups"),
    ((4, 2, 3), 1, "must be 4-D"),
])
def test_conv_shape_errors_name_dims(wshape, groups, match):
    x = np.zeros((1, 2 if groups == 1 else 3, 8, 8), np.float32)
    with pytest.raises(ValueError, match=match):
        conv2d(x, np.zeros(wshape, np.float32), params=ConvParams.make(3, 1, 1, groups))


def test_conv_output_too_small():
    with pytest.raises(ValueError, match="output size"):
        conv2d(np.zeros((1, 1, 2, 2), np.float32), np.zeros((1, 1, 5, 5), np.float32), params=ConvParams.make(5, 1, 0))


def test_conv_is_pure(rng):
    x, w = rand(rng, 1, 4, 9, 9), rand(rng, 8, 4, 3, 3)
    p = ConvParams.make(3)
    assert np.array_equal(conv2d(x, w, None, p), conv2d(x, w, None, p))


# -- pooling -----------------------------------------------------------------------

def test_maxpool_constant():
    x = np.full((1, 2, 7, 7), 3.0, np.float32)
    assert np.array_equal(maxpool2d(x, 5, 1, 2), x)


def test_maxpool_monotone_raster_picks_bottom_right():
    x = np.arange(36, dtype=np.float32).reshape(1, 1, 6, 6)
    assert np.array_equal(maxpool2d(x, 2, 2, 0), x[:, :, 1::2, 1::2])


def test_maxpool_matches_naive(rng):
    x = rand(rng, 1, 2, 9, 9)
    assert np.array_equal(maxpool2d(x, 5, 1, 2), naive_pool(x, 5, 1, 2, "max").astype(np.float32))
    assert np.array_equal(maxpool2d(x, 3, 2, 1), naive_pool(x, 3, 2, 1, "max").astype(np.float32))


def test_maxpool_padding_never_wins():
    x = np.full((1, 1, 4, 4), -1e30, np.float32)
    assert (maxpool2d(x, 3, 1, 1) == np.float32(-1e30)).all()


@pytest.mark.parametrize("k", [0, -1])
def test_pool_rejects_nonpositive_kernel(k):
    with pytest.raises(ValueError, match="positive"):
        maxpool2d(np.zeros((1, 1, 4, 4), np.float32), k, 1, 0)
    with pytest.raises(ValueError, match="positive"):
        avgpool2d(np.zeros((1, 1, 4, 4), np.float32), k, 1, 0)


def test_avgpool_constant_and_count_include_pad():
    assert np.allclose(avgpool2d(np.full((1, 1, 5, 5), 2.0, np.float32), 3, 1, 0), 2.0)
    y = avgpool2d(np.ones((1, 1, 4, 4), np.float32), 3, 1, 1)[0, 0]
    assert y[0, 0] == pytest.approx(4 / 9) and y[0, 1] == pytest.approx(6 / 9) and y[1, 1] == pytest.approx(1.0)


def test_avgpool_matches_naive(rng):
    x = rand(rng, 2, 3, 11, 10)
    assert np.abs(avgpool2d(x, 7, 1, 3) - naive_pool(x, 7, 1, 3, "mean")).max() <= 1e-6
    assert np.abs(avgpool2d(x, 2, 2, 0) - naive_pool(x, 2, 2, 0, "mean")).max() <= 1e-6


# -- activations -------------------------------------------------------------------

def test_activation_values():
    assert silu(np.float32(0)) == 0 and sigmoid(np.float32(0)) == 0.5
    assert float(silu(np.float32(10))) == pytest.approx(10 / (1 + np.exp(-10)), abs=1e-5)
    assert float(silu(np.float32(10))) == pytest.approx(9.99954, abs=1e-5)


def test_activation_scan_bounds():
    x = np.arange(-20, 20.0005, 1e-3).astype(np.float32)
    s = sigmoid(x)
    assert (s > 0).all() and (s < 1).all()
    assert silu(x).min() >= -0.2785


@given(st.floats(-1e6, 1e6, allow_nan=False, width=32))
def test_sigmoid_never_nan(v):
    s = sigmoid(np.array([v], np.float32))
    assert np.isfinite(s).all() and 0 < s[0] < 1
    assert np.isfinite(silu(np.array([v], np.float32))).all()


# -- batchnorm ----------------------------------------------------------------------

def test_bn_identity_and_hand_case(rng):
    x = rand(rng, 1, 3, 4, 4)
    ident = BatchNorm(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), 0.0)
    assert np.allclose(batchnorm_infer(x, ident), x)
    bn = BatchNorm(np.array([2.0]), np.array([1.0]), np.array([3.0]), np.array([4.0]), 0.0)
    assert batchnorm_infer(np.full((1, 1, 1, 1), 5.0, np.float32), bn)[0, 0, 0, 0] == 3.0


def test_fold_matches_unfused(rng):
    x, w, b = rand(rng, 2, 4, 9, 9), rand(rng, 6, 4, 3, 3), rand(rng, 6)
    bn = BatchNorm(rng.uniform(0.5, 2, 6), rng.normal(0, 1, 6), rng.normal(0, 1, 6), rng.uniform(0.2, 3, 6), 1e-3)
    p = ConvParams.make(3)
    wf, bf = fold_bn_into_conv(w, b, bn)
    assert np.abs(conv2d(x, wf, bf, p) - batchnorm_infer(conv2d(x, w, b, p), bn)).max() <= 1e-5


def test_bn_length_mismatch():
    with pytest.raises(ValueError, match="shape"):
        BatchNorm(np.ones(3), np.zeros(2), np.zeros(3), np.ones(3))
    with pytest.raises(ValueError, match="channels"):
        batchnorm_infer(np.zeros((1, 4, 2, 2), np.float32), BatchNorm(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3)))


# -- resampling / concat -------------------------------------------------------------

def test_upsample_and_concat(rng):
    assert np.array_equal(upsample_nearest2x(np.full((1, 1, 1, 1), 7, np.float32)), np.full((1, 1, 2, 2), 7))
    a, b = rand(rng, 1, 3, 4, 4), rand(rng, 1, 5, 4, 4)
    cat = concat_channels(a, b)
    assert cat.shape == (1, 8, 4, 4) and np.array_equal(cat[:, :3], a)
    x = rand(rng, 2, 3, 5, 6)
    assert np.allclose(avgpool2d(upsample_nearest2x(x), 2, 2, 0), x, atol=1e-7)
    parts = split_channels(cat, [3, 5])
    assert np.array_equal(parts[1], b)


def test_concat_spatial_mismatch():
    with pytest.raises(ValueError, match="input 1"):
        concat_channels(np.zeros((1, 1, 4, 4), np.float32), np.zeros((1, 1, 4, 5), np.float32))

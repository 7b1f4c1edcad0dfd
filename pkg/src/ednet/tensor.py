"""Dense NCHW float32 kernels: convolution, pooling, activations, resampling.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 and rank 4
(batch, channels, rows, cols).  Every function here is pure: inputs are never
mutated and the same inputs always produce the same outputs.

Two convolution lowerings are provided.  ``conv2d_direct`` walks output pixels
one at a time and is kept deliberately simple so it can serve as the reference
for ``conv2d`` (im2col + GEMM, with dedicated 1x1 and depthwise fast paths).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

IntPair = Union[int, Tuple[int, int]]

FLOAT = np.float32
NEG_SENTINEL = np.finfo(np.float32).min


def _pair(v: IntPair) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def as_tensor(x, name: str = "input") -> np.ndarray:
    """Coerce ``x`` to a contiguous float32 NCHW array, validating the rank."""
    arr = np.ascontiguousarray(x, dtype=FLOAT)
    if arr.ndim != 4:
        raise ValueError(f"{name}: expected a 4-D NCHW tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name}: all dims must be >= 1, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvParams:
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    groups: int = 1

    @classmethod
    def make(cls, kernel: IntPair = 1, stride: IntPair = 1,
             padding: Optional[IntPair] = None, groups: int = 1) -> "ConvParams":
        """Build params; ``padding=None`` means 'same'-style ``k // 2``."""
        k = _pair(kernel)
        p = (k[0] // 2, k[1] // 2) if padding is None else _pair(padding)
        return cls(k, _pair(stride), p, int(groups))

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _check_conv(x: np.ndarray, weight: np.ndarray, bias, params: ConvParams) -> Tuple[int, int]:
    n, c, h, w = x.shape
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D [out_c, in_c/groups, k_h, k_w], got {weight.shape}")
    out_c, cpg, kh, kw = weight.shape
    g = params.groups
    if g < 1:
        raise ValueError(f"conv2d: groups must be positive, got {g}")
    if c % g or out_c % g:
        raise ValueError(f"conv2d: in_channels={c} and out_channels={out_c} must both be divisible by groups={g}")
    if cpg != c // g:
        raise ValueError(
            f"conv2d: weight in_c/groups={cpg} does not match input channels {c} / groups {g} = {c // g}")
    if (kh, kw) != params.kernel:
        raise ValueError(f"conv2d: weight kernel {(kh, kw)} does not match params.kernel {params.kernel}")
    if min(params.stride) < 1 or min(params.padding) < 0:
        raise ValueError(f"conv2d: invalid stride {params.stride} or padding {params.padding}")
    ho, wo = params.output_hw(h, w)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: output size {(ho, wo)} < 1 for input {(h, w)}, kernel {params.kernel}, "
            f"stride {params.stride}, padding {params.padding}")
    if bias is not None and np.shape(bias) != (out_c,):
        raise ValueError(f"conv2d: bias shape {np.shape(bias)} does not match out_channels {out_c}")
    return ho, wo


def _pad(x: np.ndarray, ph: int, pw: int, value=0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def conv2d_direct(x, weight, bias=None, params: ConvParams = ConvParams()) -> np.ndarray:
    """Reference convolution: one output pixel at a time, no lowering tricks."""
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=FLOAT)
    ho, wo = _check_conv(x, weight, bias, params)
    n, c, _, _ = x.shape
    out_c, cpg, kh, kw = weight.shape
    g = params.groups
    opg = out_c // g
    sh, sw = params.stride
    xp = _pad(x, *params.padding)
    out = np.zeros((n, out_c, ho, wo), dtype=FLOAT)
    for b in range(n):
        for gi in range(g):
            wg = weight[gi * opg:(gi + 1) * opg].reshape(opg, -1)
            xg = xp[b, gi * cpg:(gi + 1) * cpg]
            for i in range(ho):
                for j in range(wo):
                    patch = xg[:, i * sh:i * sh + kh, j * sw:j * sw + kw].reshape(-1)
                    out[b, gi * opg:(gi + 1) * opg, i, j] = wg @ patch
    if bias is not None:
        out += np.asarray(bias, dtype=FLOAT)[None, :, None, None]
    return out


def im2col(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Unfold ``x`` into columns of shape (n, c*k_h*k_w, h_out*w_out)."""
    n, c, _, _ = x.shape
    (kh, kw), (sh, sw) = params.kernel, params.stride
    xp = _pad(x, *params.padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _depthwise(x: np.ndarray, weight: np.ndarray, params: ConvParams, ho: int, wo: int) -> np.ndarray:
    # per-tap shifted multiply-accumulate; im2col would waste k*k memory per channel
    (kh, kw), (sh, sw) = params.kernel, params.stride
    xp = _pad(x, *params.padding)
    taps = weight[:, 0]
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=FLOAT)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u:u + sh * (ho - 1) + 1:sh, v:v + sw * (wo - 1) + 1:sw]
            out += sl * taps[None, :, u, v, None, None]
    return out


def conv2d(x, weight, bias=None, params: ConvParams = ConvParams(), method: str = "gemm") -> np.ndarray:
    """2-D cross-correlation with zero padding, float32 accumulation.

    ``method="gemm"`` uses im2col + matrix multiply (with 1x1 and depthwise
    fast paths); ``method="direct"`` delegates to :func:`conv2d_direct`.
    """
    if method == "direct":
        return conv2d_direct(x, weight, bias, params)
    if method != "gemm":
        raise ValueError(f"conv2d: unknown method {method!r}")
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=FLOAT)
    ho, wo = _check_conv(x, weight, bias, params)
    n, c, h, w = x.shape
    out_c, cpg, kh, kw = weight.shape
    g = params.groups

    if g == c and out_c == c and cpg == 1 and kh * kw > 1:
        out = _depthwise(x, weight, params, ho, wo)
    elif (kh, kw) == (1, 1) and params.padding == (0, 0) and g == 1:
        xs = x[:, :, ::params.stride[0], ::params.stride[1]]
        cols = xs.reshape(n, c, ho * wo)
        out = np.matmul(weight.reshape(out_c, c), cols).reshape(n, out_c, ho, wo)
    else:
        cols = im2col(x, params)
        opg = out_c // g
        kg = cpg * kh * kw
        wmat = weight.reshape(out_c, kg)
        if g == 1:
            out = np.matmul(wmat, cols)
        else:
            out = np.empty((n, out_c, ho * wo), dtype=FLOAT)
            for gi in range(g):
                out[:, gi * opg:(gi + 1) * opg] = np.matmul(
                    wmat[gi * opg:(gi + 1) * opg], cols[:, gi * kg:(gi + 1) * kg])
        out = out.reshape(n, out_c, ho, wo)
    if bias is not None:
        out = out + np.asarray(bias, dtype=FLOAT)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=FLOAT)


def _pool_check(k: int, stride: int, pad: int, h: int, w: int):
    if k <= 0:
        raise ValueError(f"pool: kernel size must be positive, got {k}")
    if stride <= 0 or pad < 0:
        raise ValueError(f"pool: invalid stride {stride} or pad {pad}")
    if pad > k // 2:
        raise ValueError(f"pool: pad {pad} exceeds half the kernel size {k}")
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"pool: window {k} does not fit padded input {(h, w)}")
    return ho, wo


def _pool_windows(x: np.ndarray, k: int, stride: int, pad: int, fill):
    xp = _pad(x, pad, pad, fill)
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def maxpool2d(x, k: int, stride: int, pad: int = 0) -> np.ndarray:
    """Window max; padded cells hold the most negative float and never win."""
    x = as_tensor(x)
    _pool_check(k, stride, pad, x.shape[2], x.shape[3])
    if stride == 1:
        # separable max: rows then columns
        xp = _pad(x, pad, pad, NEG_SENTINEL)
        rows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2).max(axis=-1)
        return np.ascontiguousarray(np.lib.stride_tricks.sliding_window_view(rows, k, axis=3).max(axis=-1))
    return np.ascontiguousarray(_pool_windows(x, k, stride, pad, NEG_SENTINEL).max(axis=(-2, -1)))


def avgpool2d(x, k: int, stride: int, pad: int = 0) -> np.ndarray:
    """Window mean with count-include-pad semantics (divisor is always k*k)."""
    x = as_tensor(x)
    ho, wo = _pool_check(k, stride, pad, x.shape[2], x.shape[3])
    xp = _pad(x, pad, pad, 0.0)
    # summed-area table keeps this O(1) per output regardless of k
    sat = np.zeros(xp.shape[:2] + (xp.shape[2] + 1, xp.shape[3] + 1), dtype=np.float64)
    sat[:, :, 1:, 1:] = xp.astype(np.float64).cumsum(2).cumsum(3)
    r0 = np.arange(ho) * stride
    c0 = np.arange(wo) * stride
    r1, c1 = r0 + k, c0 + k
    s = (sat[:, :, r1[:, None], c1[None, :]] - sat[:, :, r0[:, None], c1[None, :]]
         - sat[:, :, r1[:, None], c0[None, :]] + sat[:, :, r0[:, None], c0[None, :]])
    return (s / (k * k)).astype(FLOAT)


_SIG_LO = np.finfo(np.float32).tiny
_SIG_HI = np.nextafter(np.float32(1), np.float32(0))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=FLOAT)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # float32 rounds sigma(x > ~17) to exactly 1; keep the open interval (0, 1)
    return np.clip(out, _SIG_LO, _SIG_HI, out=out)


def silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=FLOAT)
    return x * sigmoid(x)


@dataclass(frozen=True)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        n = np.shape(self.gamma)
        for nm in ("beta", "mean", "var"):
            if np.shape(getattr(self, nm)) != n:
                raise ValueError(f"batchnorm: {nm} shape {np.shape(getattr(self, nm))} != gamma shape {n}")

    @property
    def channels(self) -> int:
        return int(np.shape(self.gamma)[0])


def batchnorm_infer(x, bn: BatchNorm) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != bn.channels:
        raise ValueError(f"batchnorm: input has {x.shape[1]} channels, parameters have {bn.channels}")
    g = np.asarray(bn.gamma, np.float64)
    inv = g / np.sqrt(np.asarray(bn.var, np.float64) + bn.eps)
    shift = np.asarray(bn.beta, np.float64) - np.asarray(bn.mean, np.float64) * inv
    return (x * inv.astype(FLOAT)[None, :, None, None] + shift.astype(FLOAT)[None, :, None, None]).astype(FLOAT)


def fold_bn_into_conv(weight, bias, bn: BatchNorm) -> Tuple[np.ndarray, np.ndarray]:
    """Return (weight', bias') such that conv(x, weight', bias') == bn(conv(x, weight, bias))."""
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape[0] != bn.channels:
        raise ValueError(f"fold_bn_into_conv: weight has {weight.shape[0]} output channels, bn has {bn.channels}")
    inv = np.asarray(bn.gamma, np.float64) / np.sqrt(np.asarray(bn.var, np.float64) + bn.eps)
    b = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, np.float64)
    w2 = weight * inv[:, None, None, None]
    b2 = (b - np.asarray(bn.mean, np.float64)) * inv + np.asarray(bn.beta, np.float64)
    return w2.astype(FLOAT), b2.astype(FLOAT)


def upsample_nearest2x(x) -> np.ndarray:
    x = as_tensor(x)
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3))


def concat_channels(*tensors) -> np.ndarray:
    if not tensors:
        raise ValueError("concat_channels: need at least one tensor")
    ts = [as_tensor(t, f"concat input {i}") for i, t in enumerate(tensors)]
    ref = ts[0].shape
    for i, t in enumerate(ts[1:], 1):
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(
                f"concat_channels: input {i} has (n, h, w)={(t.shape[0],) + t.shape[2:]}, "
                f"expected {(ref[0],) + ref[2:]}")
    return np.concatenate(ts, axis=1)


def split_channels(x: np.ndarray, sizes: Sequence[int]):
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split_channels: sizes {list(sizes)} do not sum to {x.shape[1]}")
    edges = np.cumsum(sizes)[:-1]
    return np.split(x, edges, axis=1)

"""Detector building blocks over named weight slots.

Each block has a ``*_schema`` function returning ``{slot_name: shape}`` and an
apply function taking ``(x, w, ...)``.  ``w`` is any mapping from slot name to
array; blocks wrap it in :class:`Scoped` so nested blocks address their own
slots by prefix.  All convolutions go through ``w.runner`` so the same block
code serves float inference, calibration, and the int8 path.

Slot naming: a conv+BN unit named ``p`` owns ``p.conv.weight`` plus
``p.bn.{weight,bias,running_mean,running_var}``; a bare conv named ``p`` owns
``p.weight`` and optionally ``p.bias``.
"""
from __future__ import annotations

import math
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from .tensor import (
    BatchNorm,
    ConvParams,
    avgpool2d,
    concat_channels,
    conv2d,
    fold_bn_into_conv,
    maxpool2d,
    sigmoid,
    silu,
    split_channels,
)

Schema = Dict[str, Tuple[int, ...]]

BN_EPS = 1e-3
BN_SLOTS = ("weight", "bias", "running_mean", "running_var")

# defaults; see arch.VariantConfig for the knobs that override them
CAA_KERNEL = 11
PARTIAL_RATIO = 0.25
FCA_EXPANSION = 4
CAA_GATES = ("ffn", "block")
REG_BINS = 16


class SchemaError(KeyError):
    """A weight slot is missing, mis-shaped, or unexpected."""

    def __init__(self, slot: str, message: str):
        super().__init__(message)
        self.slot = slot
        self.message = message

    def __str__(self):
        return self.message


class FloatRunner:
    """Executes conv units in float32 with BN folded into the weights."""

    quantized = False

    def conv(self, w: "Scoped", name: str, x: np.ndarray, params: ConvParams,
             act: bool, bn: bool, bias: bool) -> np.ndarray:
        weight, b = folded_conv(w, name, bn, bias)
        y = conv2d(x, weight, b, params)
        return silu(y) if act else y


DEFAULT_RUNNER = FloatRunner()


class Scoped(Mapping):
    """Read-only view of a flat weight dict under a name prefix."""

    def __init__(self, weights: Mapping, prefix: str = "", runner=None, validated: bool = False):
        self.weights = weights
        self.prefix = prefix
        self.runner = runner or DEFAULT_RUNNER
        self.validated = validated

    def __getitem__(self, key: str) -> np.ndarray:
        full = self.prefix + key
        try:
            return self.weights[full]
        except KeyError:
            raise SchemaError(full, f"missing weight slot {full!r}") from None

    def __iter__(self) -> Iterator[str]:
        n = len(self.prefix)
        return (k[n:] for k in self.weights if k.startswith(self.prefix))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def __contains__(self, key) -> bool:
        return (self.prefix + key) in self.weights

    def sub(self, name: str) -> "Scoped":
        return Scoped(self.weights, f"{self.prefix}{name}.", self.runner, self.validated)


def scoped(w, runner=None) -> Scoped:
    if isinstance(w, Scoped):
        return w
    return Scoped(w, "", runner)


def check_slots(w: Mapping, schema: Schema, exact: bool = False) -> None:
    """Raise :class:`SchemaError` naming the first missing or mis-shaped slot."""
    if isinstance(w, Scoped) and w.validated:
        return
    prefix = w.prefix if isinstance(w, Scoped) else ""
    for name, shape in schema.items():
        if name not in w:
            raise SchemaError(prefix + name, f"missing weight slot {prefix + name!r} (expected shape {shape})")
        got = tuple(np.shape(w[name]))
        if got != tuple(shape):
            raise SchemaError(prefix + name,
                              f"weight slot {prefix + name!r} has shape {got}, expected {tuple(shape)}")
    if exact:
        extra = sorted(set(w) - set(schema))
        if extra:
            raise SchemaError(prefix + extra[0], f"unexpected weight slot {prefix + extra[0]!r}")


def prefixed(prefix: str, schema: Schema) -> Schema:
    return {f"{prefix}.{k}": v for k, v in schema.items()}


# -- conv units ---------------------------------------------------------------

def conv_unit_schema(name: str, c1: int, c2: int, k=1, groups: int = 1,
                     bn: bool = True, bias: bool = False) -> Schema:
    kh, kw = (k, k) if isinstance(k, int) else k
    wshape = (c2, c1 // groups, kh, kw)
    if bn:
        s = {f"{name}.conv.weight": wshape}
        s.update({f"{name}.bn.{slot}": (c2,) for slot in BN_SLOTS})
        return s
    s = {f"{name}.weight": wshape}
    if bias:
        s[f"{name}.bias"] = (c2,)
    return s


def slot(name: str, suffix: str) -> str:
    """Join a unit name and a slot suffix; an empty unit name means the scope root."""
    return f"{name}.{suffix}" if name else suffix


def unit_bn(w: Mapping, name: str) -> BatchNorm:
    return BatchNorm(w[slot(name, "bn.weight")], w[slot(name, "bn.bias")],
                     w[slot(name, "bn.running_mean")], w[slot(name, "bn.running_var")], BN_EPS)


def folded_conv(w: Mapping, name: str, bn: bool, bias: bool):
    """Float (weight, bias) for a conv unit, BN folded in when present."""
    if bn:
        return fold_bn_into_conv(w[slot(name, "conv.weight")], None, unit_bn(w, name))
    return w[slot(name, "weight")], (w[slot(name, "bias")] if bias else None)


def run_conv(w: Scoped, name: str, x: np.ndarray, k=1, stride=1, groups: int = 1, padding=None,
             act: bool = True, bn: bool = True, bias: bool = False) -> np.ndarray:
    params = ConvParams.make(k, stride, padding, groups)
    return w.runner.conv(w, name, x, params, act, bn, bias)


# -- ConvBNSiLU ---------------------------------------------------------------

def conv_bn_silu_schema(c1: int, c2: int, k: int = 1, groups: int = 1) -> Schema:
    return {k_[len("u."):]: v for k_, v in conv_unit_schema("u", c1, c2, k, groups).items()}


def conv_bn_silu(x, w, k: int = 1, stride: int = 1, groups: int = 1, act: bool = True) -> np.ndarray:
    """Conv (same padding) -> BN -> SiLU, executed with BN folded into the conv."""
    w = scoped(w)
    c2 = np.shape(w["conv.weight"])[0]
    check_slots(w, conv_bn_silu_schema(x.shape[1], c2, k, groups))
    return run_conv(w, "", x, k, stride, groups, act=act)


def bn_unit_count(schema: Schema) -> Dict[str, int]:
    """Split a schema's element count into conv weights, learnable BN, and BN buffers."""
    out = {"weights": 0, "bn_affine": 0, "bn_stats": 0}
    for name, shape in schema.items():
        n = math.prod(shape)
        if ".bn.running_" in name or name.startswith("bn.running_"):
            out["bn_stats"] += n
        elif ".bn." in name or name.startswith("bn."):
            out["bn_affine"] += n
        else:
            out["weights"] += n
    return out


# -- SCDown -------------------------------------------------------------------

def scdown_schema(c_in: int, c_out: int, k: int = 3) -> Schema:
    return {**conv_unit_schema("cv1", c_in, c_out, 1), **conv_unit_schema("cv2", c_out, c_out, k, c_out)}


def scdown(x, w, c_out: Optional[int] = None, k: int = 3) -> np.ndarray:
    """1x1 channel projection then stride-2 depthwise downsample."""
    w = scoped(w)
    c_out = c_out if c_out is not None else np.shape(w["cv1.conv.weight"])[0]
    check_slots(w, scdown_schema(x.shape[1], c_out, k))
    y = run_conv(w, "cv1", x, 1, 1)
    return run_conv(w, "cv2", y, k, 2, groups=c_out, act=False)


# -- SPPF ---------------------------------------------------------------------

def sppf_schema(c_in: int, c_out: int) -> Schema:
    c = c_in // 2
    return {**conv_unit_schema("cv1", c_in, c, 1), **conv_unit_schema("cv2", 4 * c, c_out, 1)}


def sppf_pyramid(y: np.ndarray, k: int = 5):
    """[y, P(y), P(P(y)), P(P(P(y)))] for a stride-1 max-pool P of size k."""
    outs = [y]
    for _ in range(3):
        outs.append(maxpool2d(outs[-1], k, 1, k // 2))
    return outs


def sppf(x, w, c_out: Optional[int] = None, k: int = 5) -> np.ndarray:
    w = scoped(w)
    c_out = c_out if c_out is not None else np.shape(w["cv2.conv.weight"])[0]
    check_slots(w, sppf_schema(x.shape[1], c_out))
    y = run_conv(w, "cv1", x)
    return run_conv(w, "cv2", concat_channels(*sppf_pyramid(y, k)))


# -- PSA ----------------------------------------------------------------------

def psa_heads(c: int) -> int:
    """Head count for a PSA attention branch of width ``c`` (one head per 64 channels)."""
    h = max(1, c // 64)
    while c % h:
        h -= 1
    return h


def _attn_dims(c: int, heads: int):
    head_dim = c // heads
    key_dim = max(1, head_dim // 2)
    return head_dim, key_dim, c + 2 * key_dim * heads


def psa_schema(c: int, heads: Optional[int] = None) -> Schema:
    if c % 2:
        raise ValueError(f"psa: channels must be even, got {c}")
    half = c // 2
    heads = heads or psa_heads(half)
    if half % heads:
        raise ValueError(f"psa: half width {half} not divisible by heads={heads}")
    _, _, qkv = _attn_dims(half, heads)
    s: Schema = {}
    s.update(conv_unit_schema("cv1", c, 2 * half, 1))
    s.update(conv_unit_schema("cv2", 2 * half, c, 1))
    s.update(conv_unit_schema("attn.qkv", half, qkv, 1))
    s.update(conv_unit_schema("attn.proj", half, half, 1))
    s.update(conv_unit_schema("attn.pe", half, half, 3, half))
    s.update(conv_unit_schema("ffn.0", half, 2 * half, 1))
    s.update(conv_unit_schema("ffn.1", 2 * half, half, 1))
    return s


def softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    a = a - a.max(axis=axis, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray, key_dim: int) -> np.ndarray:
    """softmax(q^T k / sqrt(d)) over keys; q, k are (n, heads, d, positions)."""
    logits = np.matmul(q.transpose(0, 1, 3, 2), k) * (key_dim ** -0.5)
    return softmax(logits.astype(np.float32), axis=-1)


def self_attention(b: np.ndarray, w: Scoped, heads: int) -> np.ndarray:
    n, c, h, wd = b.shape
    head_dim, key_dim, _ = _attn_dims(c, heads)
    qkv = run_conv(w, "attn.qkv", b, act=False)
    qkv = qkv.reshape(n, heads, 2 * key_dim + head_dim, h * wd)
    q, k, v = qkv[:, :, :key_dim], qkv[:, :, key_dim:2 * key_dim], qkv[:, :, 2 * key_dim:]
    attn = attention_weights(q, k, key_dim)
    mixed = np.matmul(v, attn.transpose(0, 1, 3, 2)).reshape(n, c, h, wd)
    v_map = np.ascontiguousarray(v.reshape(n, c, h, wd))
    mixed = mixed + run_conv(w, "attn.pe", v_map, 3, groups=c, act=False)
    return run_conv(w, "attn.proj", mixed.astype(np.float32), act=False)


def psa(x, w, heads: Optional[int] = None) -> np.ndarray:
    """Partial self-attention: attention + FFN on half the channels, then fuse."""
    w = scoped(w)
    c = x.shape[1]
    half = c // 2
    heads = heads or psa_heads(half)
    check_slots(w, psa_schema(c, heads))
    a, b = split_channels(run_conv(w, "cv1", x), [half, half])
    b = b + self_attention(b, w, heads)
    b = b + run_conv(w, "ffn.1", run_conv(w, "ffn.0", b), act=False)
    return run_conv(w, "cv2", concat_channels(a, b))


# -- partial convolution -------------------------------------------------------

def partial_channels(c: int, ratio: float) -> int:
    cp = int(math.floor(c * ratio))
    if cp < 1:
        raise ValueError(f"partial_conv: floor({c} * {ratio}) < 1")
    return cp


def partial_conv_schema(c: int, ratio: float = PARTIAL_RATIO) -> Schema:
    cp = partial_channels(c, ratio)
    return {"weight": (cp, cp, 3, 3)}


def partial_conv(x, w, ratio: float = PARTIAL_RATIO) -> np.ndarray:
    """3x3 conv over the first floor(c*ratio) channels; the rest pass through."""
    w = scoped(w)
    c = x.shape[1]
    cp = partial_channels(c, ratio)
    check_slots(w, partial_conv_schema(c, ratio))
    if cp == c:
        return _bare_conv(w, x, 3)
    mixed = _bare_conv(w, np.ascontiguousarray(x[:, :cp]), 3)
    return concat_channels(mixed, x[:, cp:])


def _bare_conv(w: Scoped, x, k, groups=1, padding=None, bias=False):
    return run_conv(w, "", x, k, 1, groups, padding, act=False, bn=False, bias=bias)


def partial_conv_macs(c: int, ratio: float, h: int, w: int) -> int:
    cp = partial_channels(c, ratio)
    return cp * cp * 9 * h * w


# -- Context Anchor Attention ---------------------------------------------------

def caa_schema(c: int, k_b: int = CAA_KERNEL) -> Schema:
    if k_b < 3 or k_b % 2 == 0:
        raise ValueError(f"caa: strip kernel k_b must be odd and >= 3, got {k_b}")
    s: Schema = {}
    s.update(conv_unit_schema("conv1", c, c, 1))
    s.update(conv_unit_schema("h_conv", c, c, (1, k_b), c, bn=False, bias=True))
    s.update(conv_unit_schema("v_conv", c, c, (k_b, 1), c, bn=False, bias=True))
    s.update(conv_unit_schema("conv2", c, c, 1))
    return s


def caa_strip_features(x, w, k_b: int = CAA_KERNEL) -> np.ndarray:
    """Pooled, projected, then horizontally and vertically strip-convolved map."""
    w = scoped(w)
    c = x.shape[1]
    pooled = avgpool2d(x, 7, 1, 3)
    f_pool = run_conv(w, "conv1", pooled)
    f_w = run_conv(w, "h_conv", f_pool, (1, k_b), groups=c, padding=(0, k_b // 2), act=False, bn=False, bias=True)
    return run_conv(w, "v_conv", f_w, (k_b, 1), groups=c, padding=(k_b // 2, 0), act=False, bn=False, bias=True)


def caa_attention(x, w, k_b: int = CAA_KERNEL) -> np.ndarray:
    """Attention map A in (0, 1), same shape as ``x``."""
    w = scoped(w)
    check_slots(w, caa_schema(x.shape[1], k_b))
    f_h = caa_strip_features(x, w, k_b)
    return sigmoid(run_conv(w, "conv2", f_h, act=False))


def caa(x, w, k_b: int = CAA_KERNEL) -> np.ndarray:
    return (caa_attention(x, w, k_b) * x).astype(np.float32)


# -- FCA bottleneck and C2f ------------------------------------------------------

def fca_schema(c: int, k_b: int = CAA_KERNEL, ratio: float = PARTIAL_RATIO,
               expansion: int = FCA_EXPANSION) -> Schema:
    s = prefixed("pconv", partial_conv_schema(c, ratio))
    s.update(conv_unit_schema("pw1", c, expansion * c, 1))
    s.update(conv_unit_schema("pw2", expansion * c, c, 1))
    s.update(prefixed("caa", caa_schema(c, k_b)))
    return s


def fca_bottleneck(x, w, k_b: int = CAA_KERNEL, ratio: float = PARTIAL_RATIO,
                   expansion: int = FCA_EXPANSION, gate: str = "ffn") -> np.ndarray:
    """x + CAA-gated pointwise FFN of the partially convolved input.

    ``gate="block"`` instead gates the residual sum, the other reading of the figure.
    """
    if gate not in CAA_GATES:
        raise ValueError(f"gate must be one of {CAA_GATES}, got {gate!r}")
    w = scoped(w)
    c = x.shape[1]
    check_slots(w, fca_schema(c, k_b, ratio, expansion))
    y = partial_conv(x, w.sub("pconv"), ratio)
    y = run_conv(w, "pw1", y)
    y = run_conv(w, "pw2", y, act=False)
    if gate == "block":
        return caa(x + y, w.sub("caa"), k_b)
    return x + caa(y, w.sub("caa"), k_b)


def bottleneck_schema(c: int) -> Schema:
    return {**conv_unit_schema("cv1", c, c, 3), **conv_unit_schema("cv2", c, c, 3)}


def bottleneck(x, w, shortcut: bool = True) -> np.ndarray:
    """Plain two-3x3 C2f bottleneck (the non-FCA fallback)."""
    w = scoped(w)
    check_slots(w, bottleneck_schema(x.shape[1]))
    y = run_conv(w, "cv2", run_conv(w, "cv1", x, 3), 3)
    return x + y if shortcut else y


def c2f_hidden(c_out: int) -> int:
    return c_out // 2


def c2f_schema(c_in: int, c_out: int, n: int, use_fca: bool = True, k_b: int = CAA_KERNEL,
               ratio: float = PARTIAL_RATIO, expansion: int = FCA_EXPANSION) -> Schema:
    if n < 1:
        raise ValueError(f"c2f: n must be >= 1, got {n}")
    c = c2f_hidden(c_out)
    s = conv_unit_schema("cv1", c_in, 2 * c, 1)
    s.update(conv_unit_schema("cv2", (2 + n) * c, c_out, 1))
    for i in range(n):
        inner = fca_schema(c, k_b, ratio, expansion) if use_fca else bottleneck_schema(c)
        s.update(prefixed(f"m.{i}", inner))
    return s


def c2f(x, w, n: int, c_out: Optional[int] = None, use_fca: bool = True, shortcut: bool = True,
        k_b: int = CAA_KERNEL, ratio: float = PARTIAL_RATIO, expansion: int = FCA_EXPANSION,
        return_parts: bool = False, gate: str = "ffn"):
    """Split-transform-concat block with ``n`` chained bottlenecks (FCA by default)."""
    w = scoped(w)
    c_out = c_out if c_out is not None else np.shape(w["cv2.conv.weight"])[0]
    check_slots(w, c2f_schema(x.shape[1], c_out, n, use_fca, k_b, ratio, expansion))
    c = c2f_hidden(c_out)
    parts = list(split_channels(run_conv(w, "cv1", x), [c, c]))
    for i in range(n):
        sub = w.sub(f"m.{i}")
        if use_fca:
            parts.append(fca_bottleneck(parts[-1], sub, k_b, ratio, expansion, gate))
        else:
            parts.append(bottleneck(parts[-1], sub, shortcut))
    out = run_conv(w, "cv2", concat_channels(*parts))
    return (out, parts) if return_parts else out


def c2f_fca(x, w, n: int, c_out: Optional[int] = None, k_b: int = CAA_KERNEL,
            ratio: float = PARTIAL_RATIO, expansion: int = FCA_EXPANSION, return_parts: bool = False):
    return c2f(x, w, n, c_out, True, True, k_b, ratio, expansion, return_parts)


# -- detection head -------------------------------------------------------------

def head_widths(first_level_channels: int, num_classes: int, reg_bins: int = REG_BINS) -> Tuple[int, int]:
    """(box-branch width, class-branch width), sized from the finest head level."""
    c_box = max(16, first_level_channels // 4, reg_bins * 4)
    c_cls = max(first_level_channels, min(num_classes, 100))
    return c_box, c_cls


def head_schema(c_in: int, c_box: int, c_cls: int, num_classes: int, reg_bins: int = REG_BINS) -> Schema:
    s: Schema = {}
    s.update(conv_unit_schema("box.0", c_in, c_box, 3))
    s.update(conv_unit_schema("box.1", c_box, c_box, 3))
    s.update(conv_unit_schema("box.2", c_box, 4 * reg_bins, 1, bn=False, bias=True))
    s.update(conv_unit_schema("cls.0", c_in, c_in, 3, c_in))
    s.update(conv_unit_schema("cls.1", c_in, c_cls, 1))
    s.update(conv_unit_schema("cls.2", c_cls, c_cls, 3, c_cls))
    s.update(conv_unit_schema("cls.3", c_cls, c_cls, 1))
    s.update(conv_unit_schema("cls.4", c_cls, num_classes, 1, bn=False, bias=True))
    return s


def detect_head(x, w, num_classes: int, reg_bins: int = REG_BINS) -> np.ndarray:
    """Per-level head: (n, 4*reg_bins + num_classes, h, w) raw logits."""
    w = scoped(w)
    c_in = x.shape[1]
    c_box = np.shape(w["box.0.conv.weight"])[0]
    c_cls = np.shape(w["cls.1.conv.weight"])[0]
    check_slots(w, head_schema(c_in, c_box, c_cls, num_classes, reg_bins))
    b = run_conv(w, "box.0", x, 3)
    b = run_conv(w, "box.1", b, 3)
    b = run_conv(w, "box.2", b, act=False, bn=False, bias=True)
    c = run_conv(w, "cls.0", x, 3, groups=c_in)
    c = run_conv(w, "cls.1", c)
    c = run_conv(w, "cls.2", c, 3, groups=c_cls)
    c = run_conv(w, "cls.3", c)
    c = run_conv(w, "cls.4", c, act=False, bn=False, bias=True)
    return concat_channels(b, c)

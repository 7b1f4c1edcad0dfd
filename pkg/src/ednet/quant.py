"""Post-training INT8 quantization and FP16 round-trip simulation.

Weights are quantized symmetric per output channel (zero point 0),
activations asymmetric per tensor from calibrated min/max.  Only
convolutions run in the integer domain; activations, attention, and
sigmoid/softmax stay in float.

Integer accumulation is carried out with a float64 GEMM: every int8 x int8
product and every partial sum of realistic length is an integer below 2**53,
so the float64 result equals the int32 accumulator exactly (overflow past
int32 is checked separately).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from . import blocks as B
from .tensor import ConvParams, FLOAT, _check_conv, im2col, silu

log = logging.getLogger(__name__)

QMIN, QMAX = -128, 127
INT32_MAX = 2 ** 31 - 1
SCALE_EPS = 1e-8


@dataclass(frozen=True)
class QuantParams:
    """Affine int8 mapping ``real = (q - zero_point) * scale``.

    ``axis=None`` means per-tensor scalars; otherwise ``scale`` and
    ``zero_point`` are vectors along ``axis`` (per-channel).
    """

    scale: np.ndarray
    zero_point: np.ndarray
    axis: Optional[int] = None

    def __post_init__(self):
        # scales are kept float32-representable so weight files round-trip exactly
        s = np.asarray(self.scale, dtype=np.float32).astype(np.float64)
        z = np.asarray(self.zero_point, dtype=np.int64)
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValueError(f"quant scale must be finite and > 0, got {s}")
        if np.any(z < QMIN) or np.any(z > QMAX):
            raise ValueError(f"zero_point must lie in [{QMIN}, {QMAX}], got {z}")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "zero_point", z)

    def _bcast(self, v: np.ndarray, ndim: int) -> np.ndarray:
        if self.axis is None:
            return v
        shape = [1] * ndim
        shape[self.axis] = -1
        return v.reshape(shape)

    def to_array(self) -> np.ndarray:
        """Per-tensor params as the 2-vector [scale, zero_point] used in weight files."""
        if self.axis is not None:
            raise ValueError("only per-tensor params pack into a 2-vector")
        return np.array([self.scale, self.zero_point], dtype=FLOAT)

    @classmethod
    def from_array(cls, a) -> "QuantParams":
        a = np.asarray(a, dtype=np.float64)
        return cls(np.float64(a[0]), np.int64(round(a[1])))


@dataclass(frozen=True)
class QuantTensor:
    data: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise TypeError(f"QuantTensor data must be int8, got {self.data.dtype}")

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


class WeightSet(dict):
    """Named tensors; int8 entries carry their quantization params in ``qparams``."""

    def __init__(self, *args, qparams: Optional[Dict[str, QuantParams]] = None, **kw):
        super().__init__(*args, **kw)
        self.qparams: Dict[str, QuantParams] = dict(qparams or {})


# -- calibration -----------------------------------------------------------------------

def affine_params(lo: float, hi: float) -> QuantParams:
    """Asymmetric per-tensor params covering [lo, hi] (range always includes 0)."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / (QMAX - QMIN)
    if scale <= SCALE_EPS:
        return QuantParams(np.float64(SCALE_EPS), np.int64(0))
    zp = int(np.clip(np.rint(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(np.float64(scale), np.int64(zp))


class MinMaxObserver:
    """Running min/max over a stream; optional percentile clipping per tensor."""

    def __init__(self, percentile: Optional[float] = None):
        self.percentile = percentile
        self.lo = np.inf
        self.hi = -np.inf
        self.count = 0

    def update(self, x) -> None:
        x = np.asarray(x)
        if self.percentile is None:
            lo, hi = float(x.min()), float(x.max())
        else:
            lo, hi = (float(v) for v in np.percentile(x, [100 - self.percentile, self.percentile]))
        self.lo = min(self.lo, lo)
        self.hi = max(self.hi, hi)
        self.count += 1

    def params(self) -> QuantParams:
        if self.count == 0:
            raise ValueError("calibration stream was empty")
        return affine_params(self.lo, self.hi)


def calibrate(activations: Iterable, percentile: Optional[float] = None) -> QuantParams:
    """Per-tensor asymmetric params from min/max (or percentiles) over a stream."""
    obs = MinMaxObserver(percentile)
    for a in activations:
        obs.update(a)
    return obs.params()


def weight_qparams(w, per_channel: bool = True) -> QuantParams:
    """Symmetric max-abs params; per output channel (axis 0) by default."""
    w = np.asarray(w, dtype=np.float64)
    if per_channel:
        m = np.abs(w.reshape(w.shape[0], -1)).max(axis=1)
        scale = np.maximum(m / QMAX, SCALE_EPS)
        return QuantParams(scale, np.zeros(w.shape[0], np.int64), axis=0)
    return QuantParams(np.float64(max(np.abs(w).max() / QMAX, SCALE_EPS)), np.int64(0))


# -- quantize / dequantize ---------------------------------------------------------------

def quantize(x, q: QuantParams) -> QuantTensor:
    """clamp(round_half_even(x / scale) + zero_point, -128, 127)."""
    x = np.asarray(x, dtype=np.float64)
    s = q._bcast(q.scale, x.ndim)
    z = q._bcast(q.zero_point, x.ndim)
    v = np.clip(np.rint(x / s) + z, QMIN, QMAX)
    return QuantTensor(v.astype(np.int8), q)


def dequantize(qt: QuantTensor) -> np.ndarray:
    q = qt.qparams
    nd = qt.data.ndim
    v = (qt.data.astype(np.float64) - q._bcast(q.zero_point, nd)) * q._bcast(q.scale, nd)
    return v.astype(FLOAT)


def representable_range(q: QuantParams) -> Tuple[np.ndarray, np.ndarray]:
    return (QMIN - q.zero_point) * q.scale, (QMAX - q.zero_point) * q.scale


def fp16_roundtrip(x) -> np.ndarray:
    """Round to IEEE binary16 (nearest-even, subnormals kept, overflow to inf) and back."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=FLOAT).astype(np.float16).astype(FLOAT)


def sqnr_db(ref, approx) -> float:
    ref = np.asarray(ref, np.float64)
    noise = np.sum((ref - np.asarray(approx, np.float64)) ** 2)
    signal = np.sum(ref ** 2)
    if noise == 0:
        return float("inf")
    return float(10 * np.log10(signal / noise))


# -- integer convolution -------------------------------------------------------------------

def qconv2d_accumulate(x: QuantTensor, w: QuantTensor, bias: Optional[np.ndarray],
                       params: ConvParams, debug: bool = False) -> np.ndarray:
    """Exact int32 accumulators sum((x_q - z_x) * w_q) + bias, shape (n, out_c, h, w)."""
    if x.qparams.axis is not None:
        raise ValueError("qconv2d: activations must use per-tensor params")
    if np.any(w.qparams.zero_point != 0):
        raise ValueError("qconv2d: weights must be symmetric (zero_point 0)")
    ho, wo = _check_conv(x.data, w.data, bias, params)
    # zero-point subtraction first: padding with 0 then equals padding with z_x in int8
    xs = x.data.astype(np.float64) - float(x.qparams.zero_point)
    wf = w.data.astype(np.float64)
    n, c = xs.shape[:2]
    out_c, cpg, kh, kw = wf.shape
    g = params.groups
    if g == c and out_c == c and cpg == 1:
        (sh, sw), (ph, pw) = params.stride, params.padding
        xp = np.pad(xs, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        acc = np.zeros((n, c, ho, wo))
        for u in range(kh):
            for v in range(kw):
                acc += xp[:, :, u:u + sh * (ho - 1) + 1:sh, v:v + sw * (wo - 1) + 1:sw] * wf[None, :, 0, u, v, None, None]
    else:
        cols = im2col(xs, params)
        opg, kg = out_c // g, cpg * kh * kw
        wm = wf.reshape(out_c, kg)
        acc = np.empty((n, out_c, ho * wo))
        for gi in range(g):
            acc[:, gi * opg:(gi + 1) * opg] = np.matmul(wm[gi * opg:(gi + 1) * opg], cols[:, gi * kg:(gi + 1) * kg])
        acc = acc.reshape(n, out_c, ho, wo)
    if bias is not None:
        acc = acc + np.asarray(bias, np.float64)[None, :, None, None]
    over = np.abs(acc) > INT32_MAX
    if over.any():
        if debug:
            raise OverflowError(f"qconv2d: {int(over.sum())} accumulators exceed int32 range")
        log.warning("qconv2d: saturating %d int32 accumulators", int(over.sum()))
        acc = np.clip(acc, -INT32_MAX - 1, INT32_MAX)
    return acc.astype(np.int32)


def quantize_bias(bias, x_q: QuantParams, w_q: QuantParams, out_c: int) -> np.ndarray:
    b = np.zeros(out_c) if bias is None else np.asarray(bias, np.float64)
    scale = float(x_q.scale) * np.broadcast_to(w_q.scale, (out_c,))
    return np.clip(np.rint(b / scale), -INT32_MAX - 1, INT32_MAX).astype(np.int32)


def requantize(acc: np.ndarray, x_q: QuantParams, w_q: QuantParams, out_q: QuantParams) -> QuantTensor:
    """int32 accumulators -> int8 using a float per-channel multiplier."""
    out_c = acc.shape[1]
    mult = float(x_q.scale) * np.broadcast_to(w_q.scale, (out_c,)) / float(out_q.scale)
    v = np.rint(acc.astype(np.float64) * mult[None, :, None, None]) + float(out_q.zero_point)
    return QuantTensor(np.clip(v, QMIN, QMAX).astype(np.int8), out_q)


def qconv2d(x: QuantTensor, w: QuantTensor, bias: Optional[np.ndarray], params: ConvParams,
            out_q: QuantParams, debug: bool = False) -> QuantTensor:
    """int8 x int8 -> int32 convolution, requantized to int8 with ``out_q``."""
    acc = qconv2d_accumulate(x, w, bias, params, debug)
    return requantize(acc, x.qparams, w.qparams, out_q)


# -- model-level -------------------------------------------------------------------------

def unit_path(w: B.Scoped, name: str) -> str:
    return w.prefix + name if name else w.prefix[:-1]


def _weight_key(name: str, bn: bool) -> str:
    return B.slot(name, "conv.weight" if bn else "weight")


def _bias_key(name: str, bn: bool) -> str:
    return B.slot(name, "conv.bias" if bn else "bias")


def conv_units(schema: Mapping[str, tuple]) -> Dict[str, bool]:
    """Map each conv unit path in a float schema to whether it carries BN."""
    units: Dict[str, bool] = {}
    for name in schema:
        if name.endswith(".conv.weight"):
            units[name[:-len(".conv.weight")]] = True
        elif name.endswith(".weight") and not name.endswith(".bn.weight"):
            units[name[:-len(".weight")]] = False
    return units


def quantized_schema(schema: Mapping[str, tuple]) -> Dict[str, tuple]:
    """Slot layout of a quantized set: BN folded away, bias and activation params added."""
    out: Dict[str, tuple] = {}
    for unit, bn in conv_units(schema).items():
        wk = f"{unit}.conv.weight" if bn else f"{unit}.weight"
        shape = tuple(schema[wk])
        out[wk] = shape
        out[f"{unit}.conv.bias" if bn else f"{unit}.bias"] = (shape[0],)
        out[f"{unit}.input_q"] = (2,)
        out[f"{unit}.output_q"] = (2,)
    return out


class CalibrationRunner(B.FloatRunner):
    """Float runner that observes each conv unit's input and pre-activation output."""

    def __init__(self, percentile: Optional[float] = None):
        self.percentile = percentile
        self.inputs: Dict[str, MinMaxObserver] = {}
        self.outputs: Dict[str, MinMaxObserver] = {}

    def _obs(self, table, key):
        if key not in table:
            table[key] = MinMaxObserver(self.percentile)
        return table[key]

    def conv(self, w, name, x, params, act, bn, bias):
        unit = unit_path(w, name)
        self._obs(self.inputs, unit).update(x)
        y = super().conv(w, name, x, params, False, bn, bias)
        self._obs(self.outputs, unit).update(y)
        return silu(y) if act else y


class QuantRunner:
    """Executes conv units through :func:`qconv2d` using a quantized :class:`WeightSet`."""

    quantized = True

    def __init__(self, weights: Mapping, debug: bool = False):
        self.qparams = getattr(weights, "qparams", {})
        self.debug = debug
        self._bias_cache: Dict[str, np.ndarray] = {}

    def conv(self, w, name, x, params, act, bn, bias):
        wkey = w.prefix + _weight_key(name, bn)
        wq = w[_weight_key(name, bn)]
        try:
            w_q = self.qparams[wkey]
        except KeyError:
            raise B.SchemaError(wkey, f"int8 slot {wkey!r} has no quantization params") from None
        in_q = QuantParams.from_array(w[B.slot(name, "input_q")])
        out_q = QuantParams.from_array(w[B.slot(name, "output_q")])
        b = quantize_bias(w[_bias_key(name, bn)], in_q, w_q, wq.shape[0])
        y = dequantize(qconv2d(quantize(x, in_q), QuantTensor(wq, w_q), b, params, out_q, self.debug))
        return silu(y) if act else y


class QuantStore:
    """Holds node outputs as int8 between nodes; head outputs stay float."""

    def __init__(self, weights: Mapping, float_nodes: Iterable[int] = ()):
        self.weights = weights
        self.float_nodes = set(float_nodes)

    def put(self, node, x):
        if node.id in self.float_nodes:
            return x
        return quantize(x, QuantParams.from_array(self.weights[f"{node.prefix}.store_q"]))

    def get(self, stored):
        return dequantize(stored) if isinstance(stored, QuantTensor) else stored

    def nbytes(self, stored):
        return stored.data.nbytes if isinstance(stored, QuantTensor) else stored.nbytes


def store_slots(graph) -> Dict[str, tuple]:
    return {f"{n.prefix}.store_q": (2,) for n in graph.nodes}


@dataclass
class LayerReport:
    unit: str
    shape: tuple
    sqnr_db: float
    per_channel_err: float
    per_tensor_err: float


@dataclass
class QuantReport:
    layers: List[LayerReport]
    comparison: Optional[dict] = None

    @property
    def min_sqnr_db(self) -> float:
        return min(l.sqnr_db for l in self.layers)

    def to_json(self) -> dict:
        return {
            "layers": [vars(l) | {"shape": list(l.shape)} for l in self.layers],
            "min_sqnr_db": self.min_sqnr_db,
            "comparison": self.comparison,
        }


def is_quantized(weights: Mapping) -> bool:
    return any(np.asarray(v).dtype == np.int8 for v in weights.values())


def dequantize_weights(qset: WeightSet) -> Dict[str, np.ndarray]:
    """Float view of a quantized set (int8 entries expanded with their params)."""
    return {k: (dequantize(QuantTensor(v, qset.qparams[k])) if v.dtype == np.int8 else v)
            for k, v in qset.items()}


def requantize_weights(qset: WeightSet) -> WeightSet:
    """Re-derive per-channel int8 weights from the dequantized values of ``qset``."""
    out = WeightSet(qset, qparams=qset.qparams)
    for k, v in qset.items():
        if v.dtype == np.int8:
            wf = dequantize(QuantTensor(v, qset.qparams[k]))
            q = weight_qparams(wf)
            out[k] = quantize(wf, q).data
            out.qparams[k] = q
    return out


def quantize_model(graph, weights: Mapping, calibration_images: Iterable, percentile: Optional[float] = None,
                   compare: bool = True) -> Tuple[WeightSet, QuantReport]:
    """Calibrate on ``calibration_images`` and return an int8 weight set plus a report.

    If ``weights`` is already quantized its int8 payload is re-derived from the
    dequantized values and activation params are kept, which is a fixed point.
    """
    from .arch import forward

    if is_quantized(weights):
        fw = dequantize_weights(weights)
        units = [(k.rsplit(".conv.weight", 1)[0] if k.endswith(".conv.weight") else k[:-len(".weight")], fw[k])
                 for k, v in weights.items() if v.dtype == np.int8]
        return requantize_weights(weights), QuantReport(layer_reports(units))
    images = [np.asarray(im, FLOAT) for im in calibration_images]
    if not images:
        raise ValueError("quantize_model: calibration set is empty")

    runner = CalibrationRunner(percentile)
    node_obs: Dict[int, MinMaxObserver] = {}

    def observe(node, y):
        node_obs.setdefault(node.id, MinMaxObserver(percentile)).update(y)

    schema = graph.schema(include_aux=True)
    aux = all(k in weights for k in schema)  # calibrate the auxiliary heads only when present
    schema = graph.schema(include_aux=aux)
    for im in images:
        forward(graph, weights, im, aux=aux, runner=runner, on_node=observe)

    qset = WeightSet()
    for unit, bn in conv_units(schema).items():
        wf, bf = B.folded_conv(weights, unit, bn, f"{unit}.bias" in schema)
        q = weight_qparams(wf)
        wk = f"{unit}.conv.weight" if bn else f"{unit}.weight"
        qset[wk] = quantize(wf, q).data
        qset.qparams[wk] = q
        qset[f"{unit}.conv.bias" if bn else f"{unit}.bias"] = (
            np.zeros(wf.shape[0], FLOAT) if bf is None else np.asarray(bf, FLOAT))
        qset[f"{unit}.input_q"] = runner.inputs[unit].params().to_array()
        qset[f"{unit}.output_q"] = runner.outputs[unit].params().to_array()
    for node in graph.nodes:
        if node.id in node_obs:
            qset[f"{node.prefix}.store_q"] = node_obs[node.id].params().to_array()

    report = QuantReport(layer_reports(
        (unit, B.folded_conv(weights, unit, bn, False)[0]) for unit, bn in conv_units(schema).items()))
    if compare:
        report.comparison = compare_detections(graph, weights, qset, images[0])
    return qset, report


def layer_reports(units: Iterable[Tuple[str, np.ndarray]]) -> List[LayerReport]:
    """Per-channel SQNR and per-channel vs per-tensor error for (unit, float weight) pairs."""
    reports = []
    for unit, wf in units:
        pc = dequantize(quantize(wf, weight_qparams(wf)))
        pt = dequantize(quantize(wf, weight_qparams(wf, per_channel=False)))
        reports.append(LayerReport(unit, tuple(wf.shape), sqnr_db(wf, pc),
                                   float(np.linalg.norm(wf - pc)), float(np.linalg.norm(wf - pt))))
    return reports


def compare_detections(graph, float_weights: Mapping, qset: WeightSet, image, score_thresh: float = 0.5,
                       iou_thresh: float = 0.9, top_k: int = 300) -> dict:
    """Decode float and int8 forwards of ``image``; match float boxes above ``score_thresh``.

    A float detection is matched when some int8 detection overlaps it with
    IoU > ``iou_thresh`` (class-agnostic: near-tied class scores may swap
    argmax under quantization noise).  Float detections are cut to ``top_k``.
    """
    from .arch import forward
    from .decode import boxes_array, decode, iou_matrix

    strides = graph.head_strides
    f_dets = decode(forward(graph, float_weights, image), strides, conf_thresh=score_thresh, top_k=top_k)
    q_dets = decode(quantized_forward(graph, qset, image), strides, conf_thresh=0.0, top_k=None)
    ious = iou_matrix(boxes_array(f_dets), boxes_array(q_dets))
    matched, drift = 0, []
    for i, d in enumerate(f_dets):
        if ious.shape[1] and ious[i].max() > iou_thresh:
            matched += 1
            drift.append(abs(q_dets[int(ious[i].argmax())].score - d.score))
    return {"float_detections": len(f_dets), "matched": matched,
            "all_matched": matched == len(f_dets),
            "max_score_drift": float(max(drift)) if drift else 0.0,
            "mean_score_drift": float(np.mean(drift)) if drift else 0.0}


def quantized_forward(graph, qset: WeightSet, image, aux: bool = False, tracker=None, debug: bool = False):
    """Forward with int8 convs and int8 storage of intermediate node outputs."""
    from .arch import forward

    heads = list(graph.heads) + (list(graph.aux_heads) if aux else [])
    return forward(graph, qset, image, aux=aux, runner=QuantRunner(qset, debug),
                   store=QuantStore(qset, heads), tracker=tracker)

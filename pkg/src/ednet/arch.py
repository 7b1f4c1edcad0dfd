"""EDNet variants as immutable layer graphs, plus forward pass and accounting.

Topology (ids for the default config)::

    backbone                       neck (top-down, then bottom-up)
    0  conv 3x3/2        P1        11 upsample(10)           17 upsample(16)
    1  conv 3x3/2        P2        12 concat(11, 6)          18 concat(17, 2)
    2  c2f-fca                     13 c2f-fca                19 c2f-fca      -> P2 head
    3  conv 3x3/2        P3        14 upsample(13)           20 conv 3x3/2
    4  c2f-fca                     15 concat(14, 4)          21 concat(20, 16)
    5  conv 3x3/2        P4        16 c2f-fca                22 c2f-fca      -> P3 head
    6  c2f-fca                                               23 conv 3x3/2
    7  scdown            P5                                  24 concat(23, 13)
    8  c2f-fca                                               25 c2f-fca      -> P4 head
    9  sppf                                                  26 conv 3x3/2
    10 psa                                                   27 concat(26, 9)  <- SPPF (cross concat)
                                                             28 c2f-fca      -> P5 head

followed by one one-to-one head per level (used for decoding) and an
auxiliary one-to-many head per level.  The auxiliary heads only matter for
parameter accounting; :func:`forward` skips them unless asked.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import blocks as B
from .tensor import FLOAT, as_tensor, concat_channels, upsample_nearest2x

# name -> (depth_scale, width_scale, max_channels)
VARIANT_SCALES: Dict[str, Tuple[float, float, int]] = {
    "tiny": (0.20, 0.25, 512),
    "n": (0.33, 0.25, 1024),
    "s": (0.33, 0.50, 1024),
    "m": (0.67, 0.75, 768),
    "b": (0.67, 1.00, 512),
    "l": (1.00, 1.00, 512),
    "x": (1.00, 1.25, 512),
}
VARIANT_NAMES = tuple(VARIANT_SCALES)
NUM_CLASSES = 10
HEAD_STRIDES = (4, 8, 16, 32)

OVERRIDE_KEYS = ("depth_scale", "width_scale", "max_channels", "k_b", "partial_ratio",
                 "fca_expansion", "caa_gate", "use_ccs", "use_xsmall_head", "use_fca")


def make_divisible(x: float, divisor: int = 8) -> int:
    return int(math.ceil(x / divisor) * divisor)


@dataclass(frozen=True)
class VariantConfig:
    name: str = "tiny"
    depth_scale: float = 0.20
    width_scale: float = 0.25
    max_channels: int = 512
    num_classes: int = NUM_CLASSES
    k_b: int = B.CAA_KERNEL
    partial_ratio: float = B.PARTIAL_RATIO
    fca_expansion: int = B.FCA_EXPANSION
    caa_gate: str = "ffn"
    reg_bins: int = B.REG_BINS
    use_ccs: bool = True
    use_xsmall_head: bool = True
    use_fca: bool = True

    def __post_init__(self):
        if self.caa_gate not in B.CAA_GATES:
            raise ValueError(f"caa_gate must be one of {B.CAA_GATES}, got {self.caa_gate!r}")
        if not 0 < self.depth_scale <= 1.5:
            raise ValueError(f"depth_scale must be in (0, 1.5], got {self.depth_scale}")
        if not 0 < self.width_scale <= 1.5:
            raise ValueError(f"width_scale must be in (0, 1.5], got {self.width_scale}")
        if self.max_channels not in (512, 768, 1024):
            raise ValueError(f"max_channels must be one of 512, 768, 1024, got {self.max_channels}")
        if self.k_b < 3 or self.k_b % 2 == 0:
            raise ValueError(f"k_b must be odd and >= 3, got {self.k_b}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @classmethod
    def from_name(cls, name: str, **overrides) -> "VariantConfig":
        key = name.lower()
        if key == "xl":
            key = "x"
        if key not in VARIANT_SCALES:
            raise ValueError(f"unknown variant {name!r}; valid names: {', '.join(VARIANT_NAMES)}")
        d, w, mx = VARIANT_SCALES[key]
        return cls(name=key, depth_scale=d, width_scale=w, max_channels=mx, **overrides)

    def channels(self, base: int) -> int:
        """Width rule: cap the base width, then scale and round up to a multiple of 8."""
        return make_divisible(min(base, self.max_channels) * self.width_scale, 8)

    def repeats(self, base_n: int) -> int:
        return max(1, round(base_n * self.depth_scale))

    def to_json(self) -> dict:
        d = asdict(self)
        return {"variant": self.name, "overrides": {k: d[k] for k in OVERRIDE_KEYS}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "VariantConfig":
        overrides = dict(obj.get("overrides") or {})
        unknown = set(overrides) - set(OVERRIDE_KEYS)
        if unknown:
            raise ValueError(f"unknown config overrides: {sorted(unknown)}")
        base = cls.from_name(obj["variant"])
        return replace(base, **overrides)


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: str
    inputs: Tuple[int, ...]
    out_channels: int
    stride: int
    args: Tuple[Tuple[str, object], ...] = ()
    role: str = ""

    @property
    def prefix(self) -> str:
        return f"model.{self.id}"

    def arg(self, key, default=None):
        return dict(self.args).get(key, default)


INPUT_ID = -1


@dataclass(frozen=True)
class NetGraph:
    config: VariantConfig
    nodes: Tuple[LayerSpec, ...]
    heads: Tuple[int, ...]
    aux_heads: Tuple[int, ...] = ()
    in_channels: int = 3

    def __post_init__(self):
        seen = {INPUT_ID}
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise ValueError(f"node ids must be 0..n-1 in order, got {node.id} at position {i}")
            for src in node.inputs:
                if src not in seen:
                    raise ValueError(f"node {node.id} reads {src} before it is produced")
            seen.add(node.id)

    def node(self, i: int) -> LayerSpec:
        return self.nodes[i]

    def consumers(self, i: int) -> List[int]:
        return [n.id for n in self.nodes if i in n.inputs]

    def find(self, role: str) -> LayerSpec:
        for n in self.nodes:
            if n.role == role:
                return n
        raise KeyError(role)

    @property
    def head_strides(self) -> Tuple[int, ...]:
        return tuple(self.nodes[h].stride for h in self.heads)

    def node_schema(self, node: LayerSpec) -> B.Schema:
        cfg = self.config
        c_in = self.in_channels if node.inputs == (INPUT_ID,) else sum(
            self.nodes[i].out_channels for i in node.inputs)
        c_out = node.out_channels
        kind = node.kind
        if kind == "conv":
            return B.conv_bn_silu_schema(c_in, c_out, node.arg("k", 3), node.arg("groups", 1))
        if kind == "scdown":
            return B.scdown_schema(c_in, c_out)
        if kind == "c2f":
            return B.c2f_schema(c_in, c_out, node.arg("n"), node.arg("fca"), cfg.k_b,
                                cfg.partial_ratio, cfg.fca_expansion)
        if kind == "sppf":
            return B.sppf_schema(c_in, c_out)
        if kind == "psa":
            return B.psa_schema(c_in)
        if kind == "head":
            return B.head_schema(c_in, node.arg("c_box"), node.arg("c_cls"), cfg.num_classes, cfg.reg_bins)
        if kind in ("upsample", "concat"):
            return {}
        raise ValueError(f"unknown node kind {kind!r}")

    def schema(self, include_aux: bool = True) -> B.Schema:
        out: B.Schema = {}
        skip = set() if include_aux else set(self.aux_heads)
        for node in self.nodes:
            if node.id in skip:
                continue
            out.update(B.prefixed(node.prefix, self.node_schema(node)))
        return out


# -- construction ---------------------------------------------------------------

class _Builder:
    def __init__(self, cfg: VariantConfig):
        self.cfg = cfg
        self.nodes: List[LayerSpec] = []

    def add(self, kind, inputs, out_channels, stride, role="", **args) -> int:
        i = len(self.nodes)
        self.nodes.append(LayerSpec(i, kind, tuple(inputs), int(out_channels), int(stride),
                                    tuple(sorted(args.items())), role))
        return i

    def c(self, i: int) -> int:
        return self.nodes[i].out_channels

    def s(self, i: int) -> int:
        return 1 if i == INPUT_ID else self.nodes[i].stride

    def conv(self, src, c_out, stride=2, k=3, role=""):
        return self.add("conv", [src], c_out, self.s(src) * stride, role, k=k, s=stride)

    def scdown(self, src, c_out, role=""):
        return self.add("scdown", [src], c_out, self.s(src) * 2, role)

    def c2f(self, src, c_out, n, shortcut, role=""):
        return self.add("c2f", [src], c_out, self.s(src), role, n=self.cfg.repeats(n),
                        fca=self.cfg.use_fca, shortcut=shortcut)

    def up(self, src, role=""):
        return self.add("upsample", [src], self.c(src), self.s(src) // 2, role)

    def cat(self, *srcs, role=""):
        strides = {self.s(i) for i in srcs}
        if len(strides) != 1:
            raise ValueError(f"concat of mismatched strides {strides}")
        return self.add("concat", srcs, sum(self.c(i) for i in srcs), strides.pop(), role)


def build_variant(cfg: VariantConfig) -> NetGraph:
    """Lay out backbone, neck (optionally with the stride-4 level) and heads."""
    b = _Builder(cfg)
    ch = cfg.channels
    x0 = b.conv(INPUT_ID, ch(64), role="stem1")
    p2 = b.conv(x0, ch(128), role="stem2")
    p2 = b.c2f(p2, ch(128), 3, True, role="backbone_p2")
    p3 = b.conv(p2, ch(256), role="down_p3")
    p3 = b.c2f(p3, ch(256), 6, True, role="backbone_p3")
    p4 = b.conv(p3, ch(512), role="down_p4")
    p4 = b.c2f(p4, ch(512), 6, True, role="backbone_p4")
    p5 = b.scdown(p4, ch(1024), role="down_p5")
    p5 = b.c2f(p5, ch(1024), 3, True, role="backbone_p5")
    spp = b.add("sppf", [p5], ch(1024), b.s(p5), role="sppf")
    att = b.add("psa", [spp], ch(1024), b.s(spp), role="psa")

    u = b.up(att, role="first_upsample")
    n4 = b.c2f(b.cat(u, p4), ch(512), 3, False, role="neck_td_p4")
    n3 = b.c2f(b.cat(b.up(n4), p3), ch(256), 3, False, role="neck_td_p3")
    levels = []
    if cfg.use_xsmall_head:
        o2 = b.c2f(b.cat(b.up(n3), p2), ch(128), 3, False, role="neck_p2")
        o3 = b.c2f(b.cat(b.conv(o2, ch(128)), n3), ch(256), 3, False, role="neck_p3")
        levels += [o2, o3]
    else:
        o3 = n3
        levels.append(o3)
    o4 = b.c2f(b.cat(b.conv(o3, ch(256)), n4), ch(512), 3, False, role="neck_p4")
    p5_src = spp if cfg.use_ccs else att
    o5_cat = b.cat(b.conv(o4, ch(512)), p5_src, role="cross_concat")
    o5 = b.c2f(o5_cat, ch(1024), 3, False, role="neck_p5")
    levels += [o4, o5]

    c_box, c_cls = B.head_widths(b.c(levels[0]), cfg.num_classes, cfg.reg_bins)
    heads = [b.add("head", [lv], 4 * cfg.reg_bins + cfg.num_classes, b.s(lv), f"head_s{b.s(lv)}",
                   c_box=c_box, c_cls=c_cls) for lv in levels]
    aux = [b.add("head", [lv], 4 * cfg.reg_bins + cfg.num_classes, b.s(lv), f"aux_head_s{b.s(lv)}",
                 c_box=c_box, c_cls=c_cls) for lv in levels]
    return NetGraph(cfg, tuple(b.nodes), tuple(heads), tuple(aux))


def build(name: str = "tiny", **overrides) -> NetGraph:
    return build_variant(VariantConfig.from_name(name, **overrides))


# -- weights ----------------------------------------------------------------------

INIT_SCHEMES = ("he", "fan_in")


def init_weights(g: NetGraph, seed: int = 0, include_aux: bool = True, scheme: str = "he") -> Dict[str, np.ndarray]:
    """Seeded synthetic weights.

    ``scheme="he"``: conv weights U(-b, b) with b = sqrt(6 / fan_in), which keeps
    activation scale roughly constant through the SiLU stack, and BN units with
    mildly varied statistics (gamma in [0.5, 1.5], var in [0.5, 2], small beta
    and mean) so folded channels differ in range the way trained ones do.
    ``scheme="fan_in"``: b = 1/sqrt(fan_in) and identity BN; activations shrink
    by orders of magnitude with depth under this scheme.
    Conv biases use b = 1/sqrt(fan_in) in both.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    he = scheme == "he"
    rng = np.random.default_rng(seed)
    schema = g.schema(include_aux)
    out: Dict[str, np.ndarray] = {}
    fan_in: Dict[str, int] = {}
    for name, shape in schema.items():
        if ".bn." in name:
            out[name] = _bn_init(rng, name, shape) if he else (
                np.ones(shape, FLOAT) if name.endswith((".bn.weight", ".bn.running_var")) else np.zeros(shape, FLOAT))
        elif name.endswith("weight"):
            fi = int(np.prod(shape[1:]))
            fan_in[name[:-len("weight")]] = fi
            bound = math.sqrt(6.0 / fi) if he else 1.0 / math.sqrt(fi)
            out[name] = rng.uniform(-bound, bound, shape).astype(FLOAT)
        else:  # conv bias; its weight precedes it in schema order
            bound = 1.0 / math.sqrt(fan_in[name[:-len("bias")]])
            out[name] = rng.uniform(-bound, bound, shape).astype(FLOAT)
    return out


def _bn_init(rng: np.random.Generator, name: str, shape) -> np.ndarray:
    if name.endswith(".bn.weight"):
        return rng.uniform(0.5, 1.5, shape).astype(FLOAT)
    if name.endswith(".bn.running_var"):
        return rng.uniform(0.5, 2.0, shape).astype(FLOAT)
    return rng.normal(0.0, 0.1, shape).astype(FLOAT)


def validate_weights(g: NetGraph, weights: Mapping, include_aux: bool = False) -> None:
    """Check every slot exists with the declared shape; raises ``SchemaError``.

    Auxiliary-head slots may be absent unless ``include_aux``; when present
    they are still shape-checked.  Unknown slots are always rejected.
    """
    schema = g.schema(include_aux=True)
    if _is_quantized(weights):
        from .quant import quantized_schema, store_slots
        schema = {**quantized_schema(schema), **store_slots(g)}
    for name, shape in schema.items():
        if name not in weights:
            if not include_aux and _is_aux_slot(g, name):
                continue
            raise B.SchemaError(name, f"missing weight slot {name!r} (expected shape {tuple(shape)})")
        got = tuple(np.shape(weights[name]))
        if got != tuple(shape):
            raise B.SchemaError(name, f"weight slot {name!r} has shape {got}, expected {tuple(shape)}")
    for name in weights:
        if name not in schema:
            raise B.SchemaError(name, f"unexpected weight slot {name!r}")


def _is_aux_slot(g: NetGraph, name: str) -> bool:
    return any(name.startswith(g.nodes[i].prefix + ".") for i in g.aux_heads)


def _is_quantized(weights: Mapping) -> bool:
    return any(np.asarray(v).dtype == np.int8 for v in weights.values())


# -- forward --------------------------------------------------------------------------

class ActivationTracker:
    """Counts bytes of stored node outputs; ``peak`` is the high-water mark."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int):
        self.current += nbytes
        self.peak = max(self.peak, self.current)

    def free(self, nbytes: int):
        self.current -= nbytes


class FloatStore:
    """Node-output storage: keeps float32 tensors as-is."""

    def put(self, node: LayerSpec, x: np.ndarray):
        return x

    def get(self, stored) -> np.ndarray:
        return stored

    def nbytes(self, stored) -> int:
        return stored.nbytes


def run_node(g: NetGraph, node: LayerSpec, xs: Sequence[np.ndarray], w: B.Scoped) -> np.ndarray:
    cfg = g.config
    kind = node.kind
    if kind == "conv":
        return B.conv_bn_silu(xs[0], w, node.arg("k", 3), node.arg("s", 1))
    if kind == "scdown":
        return B.scdown(xs[0], w, node.out_channels)
    if kind == "c2f":
        return B.c2f(xs[0], w, node.arg("n"), node.out_channels, node.arg("fca"), node.arg("shortcut"),
                     cfg.k_b, cfg.partial_ratio, cfg.fca_expansion, gate=cfg.caa_gate)
    if kind == "sppf":
        return B.sppf(xs[0], w, node.out_channels)
    if kind == "psa":
        return B.psa(xs[0], w)
    if kind == "upsample":
        return upsample_nearest2x(xs[0])
    if kind == "concat":
        return concat_channels(*xs)
    if kind == "head":
        return B.detect_head(xs[0], w, cfg.num_classes, cfg.reg_bins)
    raise ValueError(f"unknown node kind {kind!r}")


def forward(g: NetGraph, weights: Mapping, image, aux: bool = False, runner=None,
            store=None, tracker: Optional[ActivationTracker] = None,
            on_node: Optional[Callable[[LayerSpec, np.ndarray], None]] = None) -> List[np.ndarray]:
    """Run the graph on an (n, 3, H, W) image; returns head maps finest first.

    ``runner`` executes conv units (float by default); ``store`` decides how
    node outputs are held between nodes; ``tracker`` records stored bytes.
    """
    x = as_tensor(image, "image")
    if x.shape[1] != g.in_channels:
        raise ValueError(f"image has {x.shape[1]} channels, expected {g.in_channels}")
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ValueError(f"image spatial dims {x.shape[2:]} must be divisible by 32")
    validate_weights(g, weights, include_aux=aux)
    if runner is None:
        runner = B.DEFAULT_RUNNER
        if _is_quantized(weights):
            from .quant import QuantRunner
            runner = QuantRunner(weights)
    store = store or FloatStore()
    tracker = tracker or ActivationTracker()

    wanted = list(g.heads) + (list(g.aux_heads) if aux else [])
    active = _active_nodes(g, wanted)
    last_use: Dict[int, int] = {}
    for node in g.nodes:
        if node.id in active:
            for src in node.inputs:
                last_use[src] = node.id
    keep = set(wanted)

    live: Dict[int, object] = {}
    for node in g.nodes:
        if node.id not in active:
            continue
        xs = [x if src == INPUT_ID else store.get(live[src]) for src in node.inputs]
        w = B.Scoped(weights, node.prefix + ".", runner, validated=True)
        y = run_node(g, node, xs, w)
        if on_node is not None:
            on_node(node, y)
        stored = store.put(node, y)
        live[node.id] = stored
        tracker.alloc(store.nbytes(stored))
        for src in set(node.inputs):
            if src != INPUT_ID and last_use.get(src) == node.id and src not in keep:
                tracker.free(store.nbytes(live.pop(src)))
    return [store.get(live[i]) for i in wanted]


def _active_nodes(g: NetGraph, wanted: Sequence[int]) -> set:
    need = set()
    stack = list(wanted)
    while stack:
        i = stack.pop()
        if i == INPUT_ID or i in need:
            continue
        need.add(i)
        stack.extend(g.nodes[i].inputs)
    return need


# -- accounting ------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamCount:
    params: int        # conv weights/biases + BN scale and shift (training-summary convention)
    folded: int        # conv weights + one bias per BN channel
    stored: int        # every stored element, BN running statistics included
    inference: int     # ``params`` without the auxiliary one-to-many heads


def count_schema(schema: B.Schema) -> Dict[str, int]:
    return B.bn_unit_count(schema)


def param_count(g: NetGraph) -> int:
    return param_counts(g).params


def param_counts(g: NetGraph) -> ParamCount:
    full = count_schema(g.schema(True))
    inf = count_schema(g.schema(False))
    return ParamCount(
        params=full["weights"] + full["bn_affine"],
        folded=full["weights"] + full["bn_affine"] // 2,
        stored=full["weights"] + full["bn_affine"] + full["bn_stats"],
        inference=inf["weights"] + inf["bn_affine"],
    )


def node_params(g: NetGraph, node: LayerSpec) -> int:
    c = count_schema(g.node_schema(node))
    return c["weights"] + c["bn_affine"]


def summarize(g: NetGraph, size: Tuple[int, int] = (640, 640), batch: int = 1) -> List[dict]:
    h, w = size
    rows = []
    for node in g.nodes:
        src = ["image" if i == INPUT_ID else i for i in node.inputs]
        rows.append({
            "id": node.id,
            "kind": node.kind,
            "role": node.role,
            "inputs": src,
            "out_shape": [batch, node.out_channels, h // node.stride, w // node.stride],
            "params": node_params(g, node),
        })
    return rows


def summary_text(g: NetGraph, size: Tuple[int, int] = (640, 640)) -> str:
    rows = summarize(g, size)
    lines = [f"{'id':>3}  {'kind':<9} {'role':<18} {'inputs':<12} {'out_shape':<22} {'params':>12}"]
    for r in rows:
        lines.append(f"{r['id']:>3}  {r['kind']:<9} {r['role']:<18} {','.join(map(str, r['inputs'])):<12} "
                     f"{'x'.join(map(str, r['out_shape'])):<22} {r['params']:>12,}")
    pc = param_counts(g)
    lines.append(f"total params: {pc.params:,} (inference heads only {pc.inference:,}; "
                 f"BN-folded {pc.folded:,}; stored elements {pc.stored:,})")
    return "\n".join(lines)


def summary_json(g: NetGraph, size: Tuple[int, int] = (640, 640)) -> dict:
    pc = param_counts(g)
    return {"config": g.config.to_json(), "nodes": summarize(g, size),
            "params": pc.params, "params_inference": pc.inference,
            "params_folded": pc.folded, "stored_elements": pc.stored,
            "head_strides": list(g.head_strides)}

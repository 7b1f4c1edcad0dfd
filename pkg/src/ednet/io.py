"""Weight files, images, letterboxing, configs and JSON-lines detections.

Weight file layout (all little-endian)::

    header   b"EDNW"  u32 version  u32 entry_count
    entry    u16 name_len  name(utf8)  u8 dtype  u8 ndim  u32 dims[ndim]  payload
             int8 entries are followed by a qparams record:
             u8 axis (255 = per-tensor)  u32 count  f32 scale[count]  i32 zero_point[count]

dtype tags: 0 float32, 1 int8, 2 float16 stored as its raw u16 bit pattern.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from .arch import VariantConfig
from .decode import Detection
from .loss import Box
from .quant import QuantParams, WeightSet
from .tensor import FLOAT

PathLike = Union[str, Path]

MAGIC = b"EDNW"
VERSION = 1
PER_TENSOR_AXIS = 255
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<u2")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.float16): 2}
LETTERBOX_GRAY = 114 / 255


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message)
        self.offset = offset


# -- weights -------------------------------------------------------------------------

def encode_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    qparams = getattr(weights, "qparams", {})
    out = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name, arr in weights.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise TypeError(f"weight {name!r}: unsupported dtype {arr.dtype} (float32, int8, float16)")
        tag = _TAGS[arr.dtype]
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.view(np.uint16) if tag == 2 else arr
        out.append(np.ascontiguousarray(payload, dtype=_DTYPES[tag]).tobytes())
        if tag == 1:
            if name not in qparams:
                raise ValueError(f"int8 weight {name!r} has no quantization params")
            out.append(_encode_qparams(qparams[name]))
    return b"".join(out)


def _encode_qparams(q: QuantParams) -> bytes:
    scale = np.atleast_1d(q.scale).astype("<f4")
    zp = np.atleast_1d(q.zero_point).astype("<i4")
    axis = PER_TENSOR_AXIS if q.axis is None else q.axis
    return struct.pack("<BI", axis, scale.size) + scale.tobytes() + zp.tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what} at offset {self.pos}: need {n} bytes, "
                              f"{len(self.data) - self.pos} left", self.pos)
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def at_end(self) -> bool:
        return self.pos >= len(self.data)


def decode_weights(data: bytes) -> WeightSet:
    r = _Reader(data)
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic at offset 0: expected {MAGIC!r}, got {bytes(data[:4])!r}", 0)
    r.pos = 4
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4", 4)
    out = WeightSet()
    for i in range(count):
        if r.at_end:
            raise FormatError(f"entry_count mismatch: header declares {count} entries, file holds {i}", r.pos)
        start = r.pos
        (n,) = r.unpack("<H", f"entry {i} name length")
        try:
            name = r.take(n, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {i} name is not utf-8 at offset {start + 2}", start + 2) from None
        if name in out:
            raise FormatError(f"duplicate weight name {name!r} at offset {start}", start)
        tag, ndim = r.unpack("<BB", f"entry {name!r} dtype")
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name!r} at offset {r.pos - 2}", r.pos - 2)
        dims = r.unpack(f"<{ndim}I", f"entry {name!r} dims")
        dt = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size, f"payload of {name!r}"), dtype=dt).reshape(dims)
        if tag == 0:
            arr = arr.astype(np.float32)
        elif tag == 2:
            arr = arr.view(np.float16).copy()
        else:
            arr = arr.copy()
            axis, qn = r.unpack("<BI", f"qparams of {name!r}")
            scale = np.frombuffer(r.take(4 * qn, f"qparams of {name!r}"), "<f4").astype(np.float64)
            zp = np.frombuffer(r.take(4 * qn, f"qparams of {name!r}"), "<i4").astype(np.int64)
            if axis == PER_TENSOR_AXIS:
                out.qparams[name] = QuantParams(scale[0], zp[0])
            else:
                out.qparams[name] = QuantParams(scale, zp, axis=axis)
        out[name] = arr
    if not r.at_end:
        raise FormatError(f"entry_count mismatch: header declares {count} entries but "
                          f"{len(data) - r.pos} bytes follow the last one at offset {r.pos}", r.pos)
    return out


def save_weights(path: PathLike, weights: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_weights(weights))


def load_weights(path: PathLike) -> WeightSet:
    return decode_weights(Path(path).read_bytes())


def weights_equal(a: Mapping, b: Mapping) -> bool:
    """Bit-level equality of names, dtypes, shapes and payloads."""
    if list(a) != list(b):
        return False
    return all(a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes()
               for k in a)


# -- config ------------------------------------------------------------------------------

def save_config(path: PathLike, cfg: VariantConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))


def load_config(path: PathLike) -> VariantConfig:
    return VariantConfig.from_json(json.loads(Path(path).read_text()))


# -- images ------------------------------------------------------------------------------

def _ppm_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    toks, i = [], 0
    while len(toks) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise FormatError(f"malformed PPM header at offset {i}", i)
        toks.append(data[i:j])
        i = j
    return toks, i + 1  # a single whitespace byte separates header from raster


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> float32 (1, 3, h, w) in [0, 1]."""
    if data[:2] != b"P6":
        raise FormatError(f"not a binary PPM: magic {bytes(data[:2])!r} at offset 0", 0)
    toks, start = _ppm_tokens(data[2:], 3)
    start += 2
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise FormatError(f"malformed PPM header fields {toks}", 2) from None
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval} (only 255)", 2)
    if w <= 0 or h <= 0:
        raise FormatError(f"PPM size must be positive, got {w}x{h}", 2)
    need = w * h * 3
    if len(data) - start < need:
        raise FormatError(f"truncated PPM raster at offset {start}: need {need} bytes, "
                          f"got {len(data) - start}", start)
    px = np.frombuffer(data, np.uint8, need, start).reshape(h, w, 3)
    return (px.transpose(2, 0, 1)[None].astype(FLOAT) / 255).astype(FLOAT)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(1, 3, h, w) or (3, h, w) float [0, 1] -> (h, w, 3) uint8."""
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(img: np.ndarray) -> bytes:
    px = to_uint8(img)
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def load_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise FormatError("PNG input needs Pillow (install the 'png' extra)") from None
        px = np.asarray(Image.open(path).convert("RGB"))
        return (px.transpose(2, 0, 1)[None].astype(FLOAT) / 255).astype(FLOAT)
    return decode_ppm(path.read_bytes())


def save_image(path: PathLike, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image
        Image.fromarray(to_uint8(img)).save(path)
    else:
        path.write_bytes(encode_ppm(img))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of (n, c, h, w)."""
    n, c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(FLOAT, copy=True)

    def axis(src, dst):
        pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, src - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    a = img.astype(np.float64)
    rows = a[:, :, y0] * (1 - fy)[:, None] + a[:, :, y1] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return out.astype(FLOAT)


@dataclass(frozen=True)
class Letterbox:
    """Source-to-canvas mapping ``canvas = src * scale + pad``."""

    scale: float
    pad_x: int
    pad_y: int
    src_w: int
    src_h: int
    size: int

    def forward_box(self, box: Box) -> Box:
        s = self.scale
        return Box(box.x1 * s + self.pad_x, box.y1 * s + self.pad_y, box.x2 * s + self.pad_x, box.y2 * s + self.pad_y)

    def inverse_box(self, box: Box, clip: bool = True) -> Box:
        s = self.scale
        v = [(box.x1 - self.pad_x) / s, (box.y1 - self.pad_y) / s, (box.x2 - self.pad_x) / s, (box.y2 - self.pad_y) / s]
        if clip:
            v = [min(max(v[0], 0.0), self.src_w), min(max(v[1], 0.0), self.src_h),
                 min(max(v[2], 0.0), self.src_w), min(max(v[3], 0.0), self.src_h)]
        return Box(*v)

    def inverse_detection(self, d: Detection) -> Detection:
        return Detection(self.inverse_box(d.box), d.class_id, d.score)


def letterbox(img: np.ndarray, size: int = 640) -> Tuple[np.ndarray, Letterbox]:
    """Aspect-preserving resize onto a ``size`` square padded with gray 114/255."""
    img = np.asarray(img, FLOAT)
    if img.ndim == 3:
        img = img[None]
    _, c, h, w = img.shape
    scale = min(size / h, size / w)
    nh, nw = min(size, round(h * scale)), min(size, round(w * scale))
    pad_y, pad_x = (size - nh) // 2, (size - nw) // 2
    canvas = np.full((img.shape[0], c, size, size), LETTERBOX_GRAY, FLOAT)
    canvas[:, :, pad_y:pad_y + nh, pad_x:pad_x + nw] = resize_bilinear(img, nh, nw)
    return canvas, Letterbox(scale, pad_x, pad_y, w, h, size)


def draw_boxes(img: np.ndarray, boxes: Iterable[Box], color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Copy of a (1, 3, h, w) image with 1-px box outlines."""
    out = np.array(img, FLOAT, copy=True)
    _, _, h, w = out.shape
    col = np.asarray(color, FLOAT)[:, None]
    for b in boxes:
        x1, x2 = int(np.clip(b.x1, 0, w - 1)), int(np.clip(b.x2 - 1, 0, w - 1))
        y1, y2 = int(np.clip(b.y1, 0, h - 1)), int(np.clip(b.y2 - 1, 0, h - 1))
        out[0, :, y1, x1:x2 + 1] = col
        out[0, :, y2, x1:x2 + 1] = col
        out[0, :, y1:y2 + 1, x1] = col
        out[0, :, y1:y2 + 1, x2] = col
    return out


# -- JSON lines --------------------------------------------------------------------------

def write_jsonl(path: PathLike, rows: Iterable[dict]) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_detections(path: PathLike, require_score: bool = True) -> List[Tuple[object, Detection]]:
    """Parse ``{image_id, class_id, score, box}`` lines; errors name the line number."""
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                keys = ("image_id", "class_id", "box") + (("score",) if require_score else ())
                missing = [k for k in keys if k not in obj]
                if missing:
                    raise ValueError(f"missing field(s) {missing}")
                if len(obj["box"]) != 4:
                    raise ValueError(f"box must have 4 numbers, got {obj['box']}")
                if isinstance(obj["class_id"], bool) or int(obj["class_id"]) != obj["class_id"] or obj["class_id"] < 0:
                    raise ValueError(f"class_id must be a non-negative integer, got {obj['class_id']!r}")
                det = Detection.from_json(obj)
                if not np.isfinite(det.score):
                    raise ValueError(f"score must be finite, got {det.score}")
            except (ValueError, TypeError, json.JSONDecodeError) as e:
                raise FormatError(f"{path}:{ln}: {e}") from None
            out.append((obj["image_id"], det))
    return out

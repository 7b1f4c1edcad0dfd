"""NMS-free decoding of head maps into detections, plus classic NMS for comparison."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .blocks import REG_BINS
from .loss import Box, iou as box_iou

DEFAULT_STRIDES = (4, 8, 16, 32)
CLI_CONF = 0.25
EVAL_CONF = 0.001

__all__ = ["Detection", "decode", "decode_level", "nms", "box_iou", "iou_matrix", "DEFAULT_STRIDES"]


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def to_json(self, image_id=None) -> dict:
        d = {"class_id": int(self.class_id), "score": float(self.score), "box": [float(v) for v in self.box.as_tuple()]}
        if image_id is not None:
            d = {"image_id": image_id, **d}
        return d

    @classmethod
    def from_json(cls, obj) -> "Detection":
        return cls(Box.of(obj["box"]), int(obj["class_id"]), float(obj.get("score", 1.0)))


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def decode_level(m: np.ndarray, stride: int, reg_bins: int = REG_BINS):
    """Per-cell boxes (h*w, 4), best class (h*w,) and its score (h*w,) for one (c, h, w) map."""
    c, h, w = m.shape
    m = m.astype(np.float64)
    p = _softmax(m[:4 * reg_bins].reshape(4, reg_bins, h, w), axis=1)
    dist = np.tensordot(np.arange(reg_bins, dtype=np.float64), p, axes=([0], [1]))  # (4, h, w) l,t,r,b
    cx = (np.arange(w) + 0.5)[None, :]
    cy = (np.arange(h) + 0.5)[:, None]
    boxes = np.stack([cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]], axis=-1) * stride
    scores = _sigmoid(m[4 * reg_bins:])
    cls = scores.argmax(axis=0)
    best = np.take_along_axis(scores, cls[None], axis=0)[0]
    return boxes.reshape(-1, 4), cls.reshape(-1), best.reshape(-1)


def decode(head_maps: Sequence[np.ndarray], strides: Sequence[int] = DEFAULT_STRIDES, conf_thresh: float = CLI_CONF,
           top_k: Optional[int] = 300, num_classes: Optional[int] = None, reg_bins: int = REG_BINS,
           image_size: Optional[tuple] = None) -> List[Detection]:
    """Decode one image's head maps (each (c, h, w) or (1, c, h, w)).

    Each cell yields its highest-scoring class; cells scoring above
    ``conf_thresh`` are ranked by score desc then global cell index asc
    (levels in the given order, row-major within a level) and cut to ``top_k``.
    Boxes are clipped to ``image_size`` (h, w), by default the first map's extent.
    """
    if len(head_maps) != len(strides):
        raise ValueError(f"got {len(head_maps)} head maps but {len(strides)} strides")
    maps = []
    for m in head_maps:
        m = np.asarray(m)
        if m.ndim == 4:
            if m.shape[0] != 1:
                raise ValueError(f"decode takes one image; map has batch {m.shape[0]}")
            m = m[0]
        if m.ndim != 3:
            raise ValueError(f"head map must be (c, h, w), got shape {m.shape}")
        nc = m.shape[0] - 4 * reg_bins
        if nc < 1 or (num_classes is not None and nc != num_classes):
            want = "?" if num_classes is None else 4 * reg_bins + num_classes
            raise ValueError(f"head map has {m.shape[0]} channels, expected {want} "
                             f"(4*{reg_bins} regression + classes)")
        maps.append(m)
    if len({m.shape[0] for m in maps}) > 1:
        raise ValueError(f"head maps disagree on channel count: {[m.shape[0] for m in maps]}")
    if image_size is None:
        image_size = (maps[0].shape[1] * strides[0], maps[0].shape[2] * strides[0])

    boxes, cls, score = zip(*(decode_level(m, s, reg_bins) for m, s in zip(maps, strides)))
    boxes, cls, score = np.concatenate(boxes), np.concatenate(cls), np.concatenate(score)
    keep = np.flatnonzero(score > conf_thresh)
    order = keep[np.lexsort((keep, -score[keep]))]
    if top_k is not None:
        order = order[:top_k]
    ih, iw = image_size
    b = boxes[order]
    b[:, [0, 2]] = b[:, [0, 2]].clip(0, iw)
    b[:, [1, 3]] = b[:, [1, 3]].clip(0, ih)
    return [Detection(Box(*map(float, bb)), int(c), float(s)) for bb, c, s in zip(b, cls[order], score[order])]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) corner boxes; 0 where the union is empty."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area = lambda x: (x[:, 2] - x[:, 0]) * (x[:, 3] - x[:, 1])  # noqa: E731
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def boxes_array(dets: Sequence[Detection]) -> np.ndarray:
    return np.array([d.box.as_tuple() for d in dets], np.float64).reshape(-1, 4)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> List[Detection]:
    """Greedy per-class suppression in score order (stable for equal scores)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: List[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or box_iou(k.box, d.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept

"""Detection matching, precision/recall curves and all-point average precision."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .decode import Detection
from .loss import Box, iou

IOU_RANGE = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class EvalSample:
    detections: List[Detection]
    ground_truths: List[Tuple[Box, int]] = field(default_factory=list)

    def __post_init__(self):
        bad = [d.score for d in self.detections if not np.isfinite(d.score)]
        if bad:
            raise ValueError(f"detection scores must be finite, got {bad[:3]}")


def score_order(dets: Sequence[Detection]) -> List[int]:
    """Indices by score desc; equal scores keep input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match(sample: EvalSample, iou_thresh: float = 0.5) -> np.ndarray:
    """TP flags aligned with ``sample.detections``.

    Detections are visited by score desc; each takes the unmatched same-class
    ground truth of highest IoU if that IoU reaches ``iou_thresh``.
    """
    dets, gts = sample.detections, sample.ground_truths
    flags = np.zeros(len(dets), dtype=bool)
    used = [False] * len(gts)
    for i in score_order(dets):
        d = dets[i]
        best, best_j = -1.0, -1
        for j, (g, c) in enumerate(gts):
            if used[j] or c != d.class_id:
                continue
            v = iou(d.box, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thresh:
            used[best_j] = True
            flags[i] = True
    return flags


def precision_recall(tp_flags, num_gt: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Cumulative precision and recall over score-ordered flags; recall is None if num_gt == 0."""
    if num_gt < 0:
        raise ValueError(f"num_gt must be >= 0, got {num_gt}")
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    n = np.arange(1, tp.size + 1)
    p = tp / n if tp.size else np.zeros(0)
    r = tp / num_gt if num_gt > 0 else None
    return p.astype(np.float64), (None if r is None else r.astype(np.float64))


def average_precision(precision, recall) -> float:
    """All-point AP: sum of recall steps times the right-to-left max precision envelope."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    if p.size == 0:
        return 0.0
    if np.any(np.diff(r) < 0):
        raise ValueError("recall must be non-decreasing")
    env = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], r]))
    return float(np.sum(steps * env))


def mean_ap(per_class: Dict[int, float]) -> float:
    return float(np.mean(list(per_class.values()))) if per_class else 0.0


def per_class_ap(samples: Sequence[EvalSample], iou_thresh: float = 0.5) -> Dict[int, float]:
    """AP for every class with at least one ground truth.

    Detections of all images are pooled and ranked by score desc; ties keep
    (image index, detection index) order.
    """
    flags = [match(s, iou_thresh) for s in samples]
    num_gt: Dict[int, int] = {}
    for s in samples:
        for _, c in s.ground_truths:
            num_gt[c] = num_gt.get(c, 0) + 1
    pooled: Dict[int, List[Tuple[float, int, int, bool]]] = {}
    for si, (s, f) in enumerate(zip(samples, flags)):
        for di, d in enumerate(s.detections):
            pooled.setdefault(d.class_id, []).append((d.score, si, di, bool(f[di])))
    out = {}
    for c in sorted(num_gt):
        rows = sorted(pooled.get(c, []), key=lambda t: (-t[0], t[1], t[2]))
        p, r = precision_recall([t[3] for t in rows], num_gt[c])
        out[c] = average_precision(p, r)
    return out


def map_at(samples: Sequence[EvalSample], iou_thresh: float = 0.5) -> float:
    return mean_ap(per_class_ap(samples, iou_thresh))


def map50(samples: Sequence[EvalSample]) -> float:
    return map_at(samples, 0.5)


def map50_95(samples: Sequence[EvalSample]) -> float:
    return float(np.mean([map_at(samples, t) for t in IOU_RANGE]))


def evaluate(samples: Sequence[EvalSample]) -> dict:
    ap50 = per_class_ap(samples, 0.5)
    return {"map50": mean_ap(ap50), "map50_95": map50_95(samples),
            "per_class_ap50": {str(k): v for k, v in ap50.items()},
            "classes_evaluated": len(ap50)}

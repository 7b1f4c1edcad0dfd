"""Synthetic detection scenes and ideal-logit head injection.

Scenes are non-overlapping colored rectangles and ellipses on a textured
background; class = 2 * color + shape.  Annotations are computed from the
rendered masks (hard edges, no anti-aliasing), so they are exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .blocks import REG_BINS
from .loss import Box
from .tensor import FLOAT

COLORS = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
], dtype=FLOAT)
SHAPES = ("rect", "ellipse")
NUM_CLASSES = len(COLORS) * len(SHAPES)
SMALL_FRAC = 0.8
HOT_LOGIT = 12.0
COLD_LOGIT = -30.0


def class_of(color: int, shape: int) -> int:
    return 2 * color + shape


@dataclass
class SyntheticScene:
    image: np.ndarray                              # (1, 3, h, w) float32 in [0, 1]
    annotations: List[Tuple[Box, int]] = field(default_factory=list)
    seed: int = 0

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[2], self.image.shape[3]

    def annotation_rows(self, image_id=None) -> List[dict]:
        iid = self.seed if image_id is None else image_id
        return [{"image_id": iid, "class_id": int(c), "score": 1.0, "box": list(b.as_tuple())}
                for b, c in self.annotations]


def _overlaps(a: Tuple[int, int, int, int], b: Tuple[int, int, int, int], gap: int) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def _ellipse_mask(w: int, h: int) -> np.ndarray:
    ys = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xs = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0


def generate_scene(seed: int, num_objects: int = 8, classes: int = NUM_CLASSES,
                   size: Tuple[int, int] = (640, 640), max_tries: int = 200) -> SyntheticScene:
    """Deterministic scene for ``seed``; fewer objects are placed if space runs out."""
    if num_objects < 0:
        raise ValueError(f"num_objects must be >= 0, got {num_objects}")
    if not 1 <= classes <= NUM_CLASSES:
        raise ValueError(f"classes must lie in [1, {NUM_CLASSES}], got {classes}")
    h, w = size
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.3, 0.6, 3).astype(FLOAT)
    texture = rng.normal(0, 0.04, (1, h, w)).astype(FLOAT)
    img = np.clip(base[:, None, None] + texture, 0, 1).astype(FLOAT)[None]
    cover = np.zeros((h, w), bool)

    placed: List[Tuple[int, int, int, int]] = []
    ann: List[Tuple[Box, int]] = []
    small_side = max(8, int(0.22 * min(h, w)))
    for _ in range(num_objects):
        cls = int(rng.integers(classes))
        color, shape = divmod(cls, 2)
        for _ in range(max_tries):
            hi = small_side if rng.random() < SMALL_FRAC else int(0.45 * min(h, w))
            bw = int(rng.integers(12, max(13, hi)))
            bh = int(np.clip(bw * rng.uniform(0.5, 2.0), 12, min(h, w) // 2))
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            rect = (x0, y0, x0 + bw, y0 + bh)
            if not any(_overlaps(rect, p, 2) for p in placed):
                break
        else:
            break
        mask = np.ones((bh, bw), bool) if shape == 0 else _ellipse_mask(bw, bh)
        region = img[0, :, y0:y0 + bh, x0:x0 + bw]
        region[:, mask] = COLORS[color][:, None]
        cover[y0:y0 + bh, x0:x0 + bw] |= mask
        ys, xs = np.nonzero(mask)
        ann.append((Box(float(x0 + xs.min()), float(y0 + ys.min()), float(x0 + xs.max() + 1), float(y0 + ys.max() + 1)), cls))
        placed.append(rect)
    return SyntheticScene(img, ann, seed)


def object_mask(scene: SyntheticScene) -> np.ndarray:
    """Pixels painted with an object color (used to check annotation coverage)."""
    img = scene.image[0]
    hit = np.zeros(img.shape[1:], bool)
    for c in COLORS:
        hit |= np.all(np.abs(img - c[:, None, None]) < 1e-6, axis=0)
    return hit


def save_scene(directory, scene: SyntheticScene, name: Optional[str] = None) -> Path:
    from .io import save_image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = name or f"scene_{scene.seed:05d}"
    save_image(d / f"{stem}.ppm", scene.image)
    with open(d / f"{stem}.jsonl", "w") as f:
        for row in scene.annotation_rows(stem):
            f.write(json.dumps(row) + "\n")
    return d / f"{stem}.ppm"


# -- oracle head injection ------------------------------------------------------------

def two_hot_logits(d: float, reg_bins: int = REG_BINS) -> np.ndarray:
    """Logits whose softmax expectation over bins 0..reg_bins-1 equals ``d``."""
    if not 0 <= d <= reg_bins - 1:
        raise ValueError(f"distance {d} outside [0, {reg_bins - 1}] bins")
    lo = min(int(np.floor(d)), reg_bins - 2)
    frac = d - lo
    p = np.zeros(reg_bins)
    p[lo], p[lo + 1] = 1 - frac, frac
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(p), COLD_LOGIT * 100)


def inject_oracle(annotations: Sequence[Tuple[Box, int]], canvas: Tuple[int, int], strides: Sequence[int],
                  num_classes: int = NUM_CLASSES, reg_bins: int = REG_BINS) -> List[np.ndarray]:
    """Head maps whose decode reproduces ``annotations`` (canvas pixel coordinates).

    Each box goes to the cell holding its center on the finest level whose
    bins can express all four side distances and whose cell is still free.
    """
    h, w = canvas
    maps = [np.zeros((1, 4 * reg_bins + num_classes, h // s, w // s), np.float64) for s in strides]
    for m in maps:
        m[0, 4 * reg_bins:] = COLD_LOGIT
    used = [set() for _ in strides]
    for box, cls in annotations:
        cx, cy, _, _ = box.to_center()
        for li, s in enumerate(strides):
            gh, gw = maps[li].shape[2:]
            col, row = min(int(cx // s), gw - 1), min(int(cy // s), gh - 1)
            px, py = (col + 0.5) * s, (row + 0.5) * s
            dist = np.array([px - box.x1, py - box.y1, box.x2 - px, box.y2 - py]) / s
            if (row, col) in used[li] or dist.min() < 0 or dist.max() > reg_bins - 1:
                continue
            for k in range(4):
                maps[li][0, k * reg_bins:(k + 1) * reg_bins, row, col] = two_hot_logits(dist[k], reg_bins)
            maps[li][0, 4 * reg_bins + cls, row, col] = HOT_LOGIT
            used[li].add((row, col))
            break
        else:
            raise ValueError(f"no free head cell can represent box {box.as_tuple()}")
    return [m.astype(FLOAT) for m in maps]

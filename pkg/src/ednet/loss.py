"""IoU, WIoU v1 and WIoU v3 box losses with analytic gradients.

The distance penalty ``exp(d^2 / (W^2 + H^2))`` treats the enclosing-box
denominator as a constant, and the v3 outlier degree ``beta`` is computed from
a detached IoU loss, so neither contributes to the gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Tuple

import numpy as np

KINK_TOL = 1e-3


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form (pixels)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 >= self.x1 and self.y2 >= self.y1):
            raise ValueError(f"invalid box {self.as_tuple()}: need x2 >= x1 and y2 >= y1")

    @classmethod
    def from_center(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x - w / 2, y - h / 2, x + w / 2, y + h / 2)

    @classmethod
    def of(cls, v) -> "Box":
        return v if isinstance(v, Box) else cls(*(float(t) for t in v))

    def to_center(self) -> Tuple[float, float, float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2, self.x2 - self.x1, self.y2 - self.y1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def _inter(a: Box, b: Box) -> Tuple[float, float]:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    return iw, ih


def iou(a, b) -> float:
    a, b = Box.of(a), Box.of(b)
    iw, ih = _inter(a, b)
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def l_iou(a, b) -> float:
    return 1.0 - iou(a, b)


def _enclosing_sq(a: Box, b: Box) -> float:
    w = max(a.x2, b.x2) - min(a.x1, b.x1)
    h = max(a.y2, b.y2) - min(a.y1, b.y1)
    return w * w + h * h


def _center_sq(a: Box, b: Box) -> float:
    ax, ay, _, _ = a.to_center()
    bx, by, _, _ = b.to_center()
    return (ax - bx) ** 2 + (ay - by) ** 2


def r_wiou(pred, gt, denom: Optional[float] = None) -> float:
    """Distance attention ``exp(center_dist^2 / (W^2+H^2))``; 1 when the denominator is 0."""
    pred, gt = Box.of(pred), Box.of(gt)
    s = _enclosing_sq(pred, gt) if denom is None else denom
    if s <= 0:
        return 1.0
    return math.exp(_center_sq(pred, gt) / s)


def wiou_v1(pred, gt) -> float:
    return r_wiou(pred, gt) * l_iou(pred, gt)


@dataclass
class WIoUState:
    """Focusing constants and the running mean of the IoU loss."""

    alpha: float = 1.9
    delta: float = 3.0
    momentum: float = 1e-2
    running_mean: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValueError(f"alpha must be > 1, got {self.alpha}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def observe(self, l: float) -> "WIoUState":
        """State after folding in one IoU-loss observation (first one initializes)."""
        if not self.initialized:
            return replace(self, running_mean=float(l), initialized=True)
        m = self.momentum
        return replace(self, running_mean=(1 - m) * self.running_mean + m * float(l))


def beta(l_iou_star: float, state: WIoUState) -> float:
    """Outlier degree ``L*/mean``; an uninitialized state treats this sample as the mean."""
    mean = state.running_mean if state.initialized else l_iou_star
    return 1.0 if mean == 0 else l_iou_star / mean


def r_focus(b: float, state: WIoUState) -> float:
    return b / (state.delta * state.alpha ** (b - state.delta))


def _focus(pred: Box, gt: Box, state: WIoUState) -> float:
    return r_focus(beta(l_iou(pred, gt), state), state)


def wiou_v3(pred, gt, state: WIoUState) -> Tuple[float, WIoUState]:
    """Loss ``r * R_wiou * L_iou``; beta uses the mean before this sample is folded in."""
    pred, gt = Box.of(pred), Box.of(gt)
    li = l_iou(pred, gt)
    loss = _focus(pred, gt, state) * r_wiou(pred, gt) * li
    return loss, state.observe(li)


def _grad_l_iou(p: Box, g: Box) -> np.ndarray:
    iw, ih = _inter(p, g)
    inter = iw * ih
    union = p.area + g.area - inter
    if union <= 0:
        return np.zeros(4)
    pw, ph = p.x2 - p.x1, p.y2 - p.y1
    d_area = np.array([-ph, -pw, ph, pw])
    d_inter = np.zeros(4)
    if iw > 0 and ih > 0:
        if p.x1 > g.x1:
            d_inter[0] = -ih
        if p.x2 < g.x2:
            d_inter[2] = ih
        if p.y1 > g.y1:
            d_inter[1] = -iw
        if p.y2 < g.y2:
            d_inter[3] = iw
    d_union = d_area - d_inter
    d_iou = (d_inter * union - inter * d_union) / union ** 2
    return -d_iou


def grad_wiou_v3(pred, gt, state: WIoUState) -> np.ndarray:
    """d(loss)/d(x1, y1, x2, y2) of ``pred`` with W^2+H^2 and beta held constant."""
    p, g = Box.of(pred), Box.of(gt)
    r = _focus(p, g, state)
    s = _enclosing_sq(p, g)
    li = l_iou(p, g)
    rw = r_wiou(p, g, s)
    grad = rw * _grad_l_iou(p, g)
    if s > 0:
        px, py, _, _ = p.to_center()
        gx, gy, _, _ = g.to_center()
        # d(center_dist^2)/d corner = (c - c_gt), since c = (x1 + x2) / 2
        d_dist = np.array([px - gx, py - gy, px - gx, py - gy])
        grad = grad + rw * li * d_dist / s
    return r * grad


def frozen_loss(gt, state: WIoUState, at) -> "callable":
    """Loss as a function of pred with r and W^2+H^2 frozen at the point ``at``."""
    g, a = Box.of(gt), Box.of(at)
    r = _focus(a, g, state)
    s = _enclosing_sq(a, g)

    def f(v) -> float:
        p = Box(*v) if v[2] >= v[0] and v[3] >= v[1] else Box(v[0], v[1], max(v[0], v[2]), max(v[1], v[3]))
        return r * r_wiou(p, g, s) * l_iou(p, g)

    return f


def numeric_grad(f, v, h: float = 1e-4) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        out[i] = (f(v + e) - f(v - e)) / (2 * h)
    return out


def is_kink(pred, gt, tol: float = KINK_TOL) -> bool:
    """True when a pred coordinate ties a gt coordinate on the same axis within ``tol``."""
    p, g = Box.of(pred), Box.of(gt)
    xs = (g.x1, g.x2)
    ys = (g.y1, g.y2)
    return (any(abs(c - t) < tol for c in (p.x1, p.x2) for t in xs)
            or any(abs(c - t) < tol for c in (p.y1, p.y2) for t in ys))


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``|a - b| / max(|a|, |b|)`` in L2 norm; 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def random_box(rng: np.random.Generator, extent: float = 100.0, min_size: float = 1.0) -> Box:
    x, y = rng.uniform(0, extent, 2)
    w, h = rng.uniform(min_size, extent / 2, 2)
    return Box.from_center(x, y, w, h)


@dataclass
class GradcheckResult:
    trials: int
    max_rel_error: float
    rejected_kinks: int

    def to_json(self) -> dict:
        return dict(vars(self))


def gradcheck(trials: int = 1000, seed: int = 0, h: float = 1e-4, force_kink: bool = False) -> GradcheckResult:
    """Analytic vs central-difference gradients over random (pred, gt, state) triples.

    Pairs with coordinate ties are rejected, counted, and resampled.
    ``force_kink`` snaps every tenth candidate onto a tie to exercise the guard.
    """
    rng = np.random.default_rng(seed)
    worst, rejected, done, drawn = 0.0, 0, 0, 0
    while done < trials:
        gt = random_box(rng)
        cx, cy, w, h_ = gt.to_center()
        pred = Box.from_center(cx + rng.normal(0, w / 2), cy + rng.normal(0, h_ / 2),
                               w * rng.uniform(0.5, 1.5), h_ * rng.uniform(0.5, 1.5))
        if force_kink and drawn % 10 == 0:
            pred = Box(gt.x1, pred.y1, max(gt.x1, pred.x2), pred.y2)
        drawn += 1
        if is_kink(pred, gt):
            rejected += 1
            continue
        state = WIoUState(running_mean=float(rng.uniform(0.05, 1.0)), initialized=True)
        g_a = grad_wiou_v3(pred, gt, state)
        g_n = numeric_grad(frozen_loss(gt, state, pred), pred.as_array(), h)
        worst = max(worst, rel_error(g_a, g_n))
        done += 1
    return GradcheckResult(trials, worst, rejected)


@dataclass
class FitResult:
    box: Box
    steps: int
    iou: float
    losses: List[float]


def _descent_direction(p: Box, g: Box, state: WIoUState, eps: float = KINK_TOL) -> np.ndarray:
    """Analytic gradient with components zeroed where a coordinate sits in a kink's valley.

    Near a tie the one-sided derivatives can point in opposite directions; plain
    descent then bounces across the tie with ever smaller steps.
    """
    grad = grad_wiou_v3(p, g, state)
    v = p.as_array()
    for i in range(4):
        lo, hi = v.copy(), v.copy()
        lo[i] -= eps
        hi[i] += eps
        if lo[2] < lo[0] or lo[3] < lo[1]:
            continue
        left = grad_wiou_v3(Box(*lo), g, state)[i]
        right = grad_wiou_v3(Box(*hi), g, state)[i]
        if left < 0 < right:
            grad[i] = 0.0
    return grad


def fit_box(start, gt, state: Optional[WIoUState] = None, max_steps: int = 500, target_iou: float = 0.99,
            lr0: float = 1e3, shrink: float = 0.5, armijo: float = 1e-4) -> FitResult:
    """Gradient descent on WIoU v3 with backtracking line search on the frozen loss."""
    p, g = Box.of(start), Box.of(gt)
    state = state or WIoUState()
    losses: List[float] = []
    for step in range(max_steps):
        if iou(p, g) > target_iou:
            return FitResult(p, step, iou(p, g), losses)
        f = frozen_loss(g, state, p)
        v = p.as_array()
        grad = _descent_direction(p, g, state)
        f0 = f(v)
        losses.append(f0)
        gg = float(grad @ grad)
        if gg == 0:
            break
        lr = lr0
        while lr > 1e-12:
            cand = v - lr * grad
            if cand[2] >= cand[0] and cand[3] >= cand[1] and f(cand) <= f0 - armijo * lr * gg:
                break
            lr *= shrink
        else:
            break
        state = state.observe(l_iou(p, g))
        p = Box(*cand)
    return FitResult(p, max_steps, iou(p, g), losses)


def running_means(values: Iterable[float], state: WIoUState) -> List[float]:
    out = []
    for v in values:
        state = state.observe(v)
        out.append(state.running_mean)
    return out

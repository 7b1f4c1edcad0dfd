"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Every test prints one ``PASS``/``FAIL`` line (visible even without ``-s``).
Run alone with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
"""
import math
import time

import numpy as np
import pytest

from conftest import brute_force_map, naive_conv, naive_pool, random_eval_images, to_samples
from ednet import arch
from ednet import blocks as B
from ednet.decode import decode
from ednet.io import letterbox
from ednet.loss import Box, WIoUState, fit_box, gradcheck, r_focus
from ednet.metrics import EvalSample, IOU_RANGE, map50, map50_95
from ednet.quant import (
    calibrate, dequantize, qconv2d, quantize, quantize_model, weight_qparams,
)
from ednet.scenes import generate_scene, inject_oracle
from ednet.tensor import ConvParams, conv2d

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    t0 = time.perf_counter()

    def emit(n, ok, detail, budget_s=None):
        elapsed = time.perf_counter() - t0
        in_time = budget_s is None or elapsed < budget_s
        status = "PASS" if ok and in_time else "FAIL"
        budget = f" (budget {budget_s:g}s)" if budget_s else ""
        with capsys.disabled():
            print(f"\n{status} criterion {n}: {detail} [{elapsed:.1f}s{budget}]")
        assert ok, detail
        assert in_time, f"criterion {n} took {elapsed:.1f}s, budget {budget_s}s"

    return emit


# 1 ----------------------------------------------------------------------------------------

PUBLISHED_M = {"tiny": 1.8, "n": 2.9, "s": 9.3, "m": 19.1, "b": 25.5, "l": 31.7, "x": 48.7}


def test_criterion_1_param_counts(report):
    got = {v: arch.param_count(arch.build(v)) for v in PUBLISHED_M}
    errs = {v: got[v] / (PUBLISHED_M[v] * 1e6) - 1 for v in got}
    detail = ", ".join(f"{v} {got[v] / 1e6:.2f}M ({errs[v]:+.1%})" for v in got)
    report(1, all(abs(e) <= 0.10 for e in errs.values()), detail, budget_s=5)


# 2 ----------------------------------------------------------------------------------------

def test_criterion_2_head_grids(report):
    img = np.random.default_rng(2).random((1, 3, 640, 640), dtype=np.float32)
    grids, small_t, large_t = {}, 0.0, {}
    for v in PUBLISHED_M:
        g = arch.build(v)
        w = arch.init_weights(g, seed=0, include_aux=False)
        t = time.perf_counter()
        grids[v] = [m.shape[-2:] for m in arch.forward(g, w, img)]
        dt = time.perf_counter() - t
        if v in ("l", "x"):
            large_t[v] = dt
        else:
            small_t += dt
    want = [(160, 160), (80, 80), (40, 40), (20, 20)]
    ok = all(gs == want for gs in grids.values()) and small_t < 60 and all(t < 300 for t in large_t.values())
    detail = (f"grids 160/80/40/20 on {len(grids)} variants; tiny-m {small_t:.1f}s, "
              + ", ".join(f"{v} {t:.1f}s" for v, t in large_t.items()))
    report(2, ok, detail, budget_s=60 + 600)


# 3 ----------------------------------------------------------------------------------------

def random_conv_case(rng):
    kind = rng.choice(["dense", "grouped", "depthwise", "pointwise", "strip"])
    c = int(rng.integers(1, 5))
    if kind == "grouped":
        groups = int(rng.choice([2, 4]))
        c *= groups
        oc = groups * int(rng.integers(1, 3))
    elif kind == "depthwise":
        c = groups = oc = int(rng.integers(1, 7))
    else:
        groups, oc = 1, int(rng.integers(1, 5))
    if kind == "pointwise":
        k = (1, 1)
    elif kind == "strip":
        kb = int(rng.choice([3, 5, 7]))
        k = (1, kb) if rng.random() < 0.5 else (kb, 1)
    else:
        s = int(rng.choice([1, 3, 5]))
        k = (s, s)
    stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    pad = (int(rng.integers(0, k[0] // 2 + 1)), int(rng.integers(0, k[1] // 2 + 1)))
    h, w = int(rng.integers(k[0], 10)), int(rng.integers(k[1], 10))
    return c, oc, groups, k, stride, pad, h, w


def test_criterion_3_conv_oracle(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        c, oc, groups, k, stride, pad, h, w = random_conv_case(rng)
        x = rng.uniform(-1, 1, (1, c, h, w)).astype(np.float32)
        wt = rng.uniform(-1, 1, (oc, c // groups, *k)).astype(np.float32)
        b = rng.uniform(-1, 1, oc).astype(np.float32)
        got = conv2d(x, wt, b, ConvParams(k, stride, pad, groups))
        worst = max(worst, float(np.abs(got - naive_conv(x, wt, b, stride, pad, groups)).max()))
    report(3, worst <= 1e-5, f"1000 conv cases, max abs err {worst:.2e} <= 1e-5", budget_s=120)


# 4 ----------------------------------------------------------------------------------------

def test_criterion_4_sppf_equals_spp(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(0, 1, (1, int(rng.integers(1, 5)), int(rng.integers(1, 17)), int(rng.integers(1, 17))))
        x = x.astype(np.float32)
        outs = B.sppf_pyramid(x, 5)
        for got, k in zip(outs[1:], (5, 9, 13)):
            worst = max(worst, float(np.abs(got - naive_pool(x, k, 1, k // 2, "max")).max()))
    report(4, worst <= 1e-5, f"100 inputs, chained 5/5/5 vs parallel 5/9/13, max abs err {worst:.2e}", budget_s=30)


# 5 ----------------------------------------------------------------------------------------

def rank1_depthwise(x, kv, kh):
    """float64 shifted-sum depthwise conv with the outer-product kernel kv (x) kh, zero padding."""
    kb = kv.shape[1]
    p = kb // 2
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p:p + h, p:p + w] = x
    out = np.zeros((n, c, h, w))
    for u in range(kb):
        for v in range(kb):
            out += (kv[:, u] * kh[:, v])[None, :, None, None] * xp[:, :, u:u + h, v:v + w]
    return out


def test_criterion_5_caa_strip_separability(report):
    from test_blocks import make_weights
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        c, kb = int(rng.integers(1, 9)), int(rng.choice([3, 5, 7, 11]))
        w = make_weights(B.caa_schema(c, kb), rng)
        w["h_conv.bias"] = np.zeros(c, np.float32)  # a bias between the strips breaks separability at borders
        x = rng.uniform(-1, 1, (1, c, int(rng.integers(1, 20)), int(rng.integers(1, 20)))).astype(np.float32)
        ident = dict(w)
        for name, shape in (("h_conv", (c, 1, 1, kb)), ("v_conv", (c, 1, kb, 1))):
            delta = np.zeros(shape, np.float32)
            delta[(slice(None), 0) + tuple(s // 2 for s in shape[2:])] = 1
            ident[f"{name}.weight"] = delta
            ident[f"{name}.bias"] = np.zeros(c, np.float32)
        f_pool = B.caa_strip_features(x, ident, kb)  # identity strips expose the pooled projection
        ref = rank1_depthwise(f_pool, w["v_conv.weight"][:, 0, :, 0], w["h_conv.weight"][:, 0, 0, :])
        ref += w["v_conv.bias"][None, :, None, None]
        worst = max(worst, float(np.abs(B.caa_strip_features(x, w, kb) - ref).max()))
    report(5, worst <= 1e-5, f"100 trials, strip pair vs rank-1 depthwise, max abs err {worst:.2e}", budget_s=30)


# 6 ----------------------------------------------------------------------------------------

def test_criterion_6_wiou_gradcheck_and_fit(report):
    res = gradcheck(trials=1000, seed=6, h=1e-4)
    rng = np.random.default_rng(6)
    fits = []
    for _ in range(50):
        gx, gy, gw, gh = rng.uniform(50, 150, 2).tolist() + rng.uniform(10, 60, 2).tolist()
        gt = Box.from_center(gx, gy, gw, gh)
        start = Box.from_center(gx + rng.uniform(-20, 20), gy + rng.uniform(-20, 20),
                                gw * rng.uniform(0.5, 1.5), gh * rng.uniform(0.5, 1.5))
        fits.append(fit_box(start, gt))
    ok = res.trials == 1000 and res.max_rel_error <= 1e-4 and all(f.iou > 0.99 and f.steps <= 500 for f in fits)
    detail = (f"1000 non-kink pairs, max rel err {res.max_rel_error:.2e}; "
              f"fits reach IoU >= {min(f.iou for f in fits):.4f} in <= {max(f.steps for f in fits)} steps")
    report(6, ok, detail, budget_s=30)


# 7 ----------------------------------------------------------------------------------------

def test_criterion_7_focus_nonmonotone(report):
    state = WIoUState()
    b = np.linspace(1e-4, 20 * state.delta, 100_001)
    r = np.array([r_focus(v, state) for v in b])
    turns = np.count_nonzero(np.diff(np.sign(np.diff(r))) != 0)
    peak = int(np.argmax(r))
    interior = 0 < peak < len(b) - 1
    at_delta = r_focus(state.delta, state)
    ok = turns == 1 and interior and at_delta == 1.0
    report(7, ok, f"one interior max at beta={b[peak]:.3f} (1/ln alpha = {1 / math.log(state.alpha):.3f}), "
                  f"r(delta) = {at_delta!r}", budget_s=1 + 2)


# 8 ----------------------------------------------------------------------------------------

def test_criterion_8_map_oracle(report):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(200):
        images = random_eval_images(rng)
        samples = to_samples(images)
        worst = max(worst, abs(map50(samples) - brute_force_map(images, 0.5)))
        oracle = sum(brute_force_map(images, t) for t in IOU_RANGE) / len(IOU_RANGE)
        worst = max(worst, abs(map50_95(samples) - oracle))
    report(8, worst <= 1e-9, f"200 random eval sets, max |mAP - brute force| {worst:.1e}", budget_s=60)


# 9 ----------------------------------------------------------------------------------------

def test_criterion_9_quantization(report):
    g = arch.build("tiny")
    w = arch.init_weights(g, seed=0, include_aux=False)
    _, rep = quantize_model(g, w, [generate_scene(0).image], compare=False)

    rng = np.random.default_rng(9)
    worst_ratio = 0.0
    for _ in range(20):
        groups = int(rng.choice([1, 2, 4]))
        c, oc, k, s = 4, 4, int(rng.choice([1, 3])), int(rng.integers(1, 3))
        x = rng.uniform(-0.5, 2.0, (1, c, 10, 10)).astype(np.float32)
        wt = rng.normal(0, 0.5, (oc, c // groups, k, k)).astype(np.float32)
        xq, wq = quantize(x, calibrate([x])), quantize(wt, weight_qparams(wt))
        ref = naive_conv(dequantize(xq), dequantize(wq), None, (s, s), (k // 2, k // 2), groups)
        out_q = calibrate([ref])
        out = qconv2d(xq, wq, None, ConvParams.make(k, s, groups=groups), out_q)
        worst_ratio = max(worst_ratio, float(np.abs(dequantize(out) - ref).max() / float(out_q.scale)))

    worst_rt = 0.0
    for lo, hi in [(-1, 1), (0, 6), (-3.5, 0.25), (-100, 40), (1e-3, 2e-3)]:
        v = rng.uniform(lo, hi, 200_000)
        p = calibrate([v])
        err = np.abs(dequantize(quantize(v, p)).astype(np.float64) - v)
        err -= np.spacing(np.abs(v).astype(np.float32)) / 2  # dequantized values are stored as float32
        worst_rt = max(worst_rt, float(err.max() / float(p.scale)))
    ok = rep.min_sqnr_db >= 30 and worst_ratio <= 2 and worst_rt <= 0.5
    detail = (f"min weight SQNR {rep.min_sqnr_db:.1f} dB over {len(rep.layers)} layers; "
              f"int8 conv err {worst_ratio:.2f} x out_scale; round trip {worst_rt:.3f} x scale on 1e6 values")
    report(9, ok, detail, budget_s=120)


# 10 ---------------------------------------------------------------------------------------

def test_criterion_10_oracle_injection(report):
    g = arch.build("tiny")
    worst, samples = 0.0, []
    for seed, size in [(10, (480, 640)), (11, (640, 360)), (12, (512, 512))]:
        sc = generate_scene(seed, size=size)
        _, lb = letterbox(sc.image, 640)
        boxes = [(lb.forward_box(b), c) for b, c in sc.annotations]
        maps = inject_oracle(boxes, (640, 640), g.head_strides, g.config.num_classes, g.config.reg_bins)
        dets = [lb.inverse_detection(d) for d in decode(maps, g.head_strides, conf_thresh=0.5)]
        got = sorted((d.class_id, d.box.as_tuple()) for d in dets)
        want = sorted((c, b.as_tuple()) for b, c in sc.annotations)
        if len(got) != len(want):
            worst = math.inf
        for (gc, gb), (wc, wb) in zip(got, want):
            worst = max(worst, math.inf if gc != wc else float(np.abs(np.subtract(gb, wb)).max()))
        samples.append(EvalSample(dets, sc.annotations))
    m = map50(samples)
    report(10, worst <= 1.0 and m == 1.0, f"3 scenes, max box error {worst:.2e} px, mAP@50 = {m}", budget_s=30)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))

import numpy as np
import pytest
from hypothesis import settings

from ednet import arch

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny():
    return arch.build("tiny")


@pytest.fixture(scope="session")
def tiny_weights(tiny):
    return arch.init_weights(tiny, seed=0, include_aux=False)


def naive_conv(x, w, b=None, stride=(1, 1), pad=(0, 0), groups=1):
    """Seven nested loops, float64; independent of the package's conv code."""
    n, c, h, wd = x.shape
    oc, cpg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    opg = oc // groups
    out = np.zeros((n, oc, ho, wo))
    for bi in range(n):
        for o in range(oc):
            g = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cpg):
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i * sh + u - ph, j * sw + v - pw
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += float(x[bi, g * cpg + ci, y, xx]) * float(w[o, ci, u, v])
                    out[bi, o, i, j] = acc + (0.0 if b is None else float(b[o]))
    return out


def naive_pool(x, k, stride, pad, op):
    """Window scan with explicit bounds; max ignores padding, mean divides by k*k."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            y0, x0 = i * stride - pad, j * stride - pad
            ys = slice(max(y0, 0), min(y0 + k, h))
            xs = slice(max(x0, 0), min(x0 + k, w))
            win = x[:, :, ys, xs].astype(np.float64)
            out[:, :, i, j] = win.max(axis=(2, 3)) if op == "max" else win.sum(axis=(2, 3)) / (k * k)
    return out


# -- detection evaluation oracle ------------------------------------------------------------

def _iou_plain(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        inter = 0.0
    else:
        inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def brute_force_map(images, thr):
    """images: list of (dets, gts), dets = [(box4, cls, score)], gts = [(box4, cls)].

    Greedy matching per image, pooled ranking with ties by (image, det index),
    AP as sum over true positives of the best precision at that rank or later,
    divided by the ground-truth count.
    """
    classes = sorted({c for _, gts in images for _, c in gts})
    aps = []
    for c in classes:
        ranked = []
        n_gt = 0
        for ii, (dets, gts) in enumerate(images):
            g = [b for b, cc in gts if cc == c]
            n_gt += len(g)
            taken = [False] * len(g)
            order = sorted(range(len(dets)), key=lambda k: (-dets[k][2], k))
            hit = {}
            for k in order:
                if dets[k][1] != c:
                    continue
                best, bj = -1.0, None
                for j, gb in enumerate(g):
                    if not taken[j]:
                        v = _iou_plain(dets[k][0], gb)
                        if v > best:
                            best, bj = v, j
                hit[k] = bj is not None and best >= thr
                if hit[k]:
                    taken[bj] = True
            ranked += [(-dets[k][2], ii, k, hit[k]) for k in hit]
        ranked.sort()
        tp_so_far = 0
        precisions, is_tp = [], []
        for n, row in enumerate(ranked, start=1):
            tp_so_far += row[3]
            precisions.append(tp_so_far / n)
            is_tp.append(row[3])
        ap = 0.0
        for k in range(len(ranked)):
            if is_tp[k]:
                ap += max(precisions[k:]) / n_gt
        aps.append(ap)
    return sum(aps) / len(aps) if aps else 0.0


def random_eval_images(rng, n_images=4, max_boxes=20, n_classes=5):
    """Synthetic ground truths plus jittered, duplicated and spurious detections."""
    images = []
    for _ in range(n_images):
        gts = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            x, y = rng.uniform(0, 200, 2)
            w, h = rng.uniform(5, 60, 2)
            gts.append(((x, y, x + w, y + h), int(rng.integers(n_classes))))
        dets = []
        for (b, c) in gts:
            if rng.random() < 0.8:
                j = rng.normal(0, 3, 4)
                x1, y1 = b[0] + j[0], b[1] + j[1]
                dets.append(((x1, y1, max(x1, b[2] + j[2]), max(y1, b[3] + j[3])),
                             c if rng.random() < 0.9 else int(rng.integers(n_classes)),
                             round(float(rng.random()), 2)))
            if rng.random() < 0.2:
                dets.append((b, c, round(float(rng.random()), 2)))
        for _ in range(int(rng.integers(0, 5))):
            x, y = rng.uniform(0, 200, 2)
            dets.append(((x, y, x + 20, y + 20), int(rng.integers(n_classes)), round(float(rng.random()), 2)))
        images.append((dets, gts))
    return images


def to_samples(images):
    from ednet.decode import Detection
    from ednet.loss import Box
    from ednet.metrics import EvalSample
    return [EvalSample([Detection(Box(*b), c, s) for b, c, s in dets], [(Box(*b), c) for b, c in gts])
            for dets, gts in images]


@pytest.fixture(scope="session")
def calib_image():
    from ednet.scenes import generate_scene
    return generate_scene(0).image


@pytest.fixture(scope="session")
def tiny_quant(tiny, tiny_weights, calib_image):
    """(int8 weight set, report) for seeded Tiny calibrated on one 640x640 scene."""
    from ednet.quant import quantize_model
    return quantize_model(tiny, tiny_weights, [calib_image], compare=True)

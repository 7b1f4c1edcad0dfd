import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from ednet.loss import (
    Box, WIoUState, beta, fit_box, frozen_loss, grad_wiou_v3, gradcheck, iou, is_kink, l_iou, numeric_grad,
    r_focus, r_wiou, rel_error, running_means, wiou_v1, wiou_v3,
)

coord = st.floats(-50, 50, allow_nan=False)
size = st.floats(0.5, 40, allow_nan=False)


@st.composite
def boxes(draw):
    return Box.from_center(draw(coord), draw(coord), draw(size), draw(size))


# -- hand examples ---------------------------------------------------------------------

def test_iou_hand_cases():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1 and l_iou(a, a) == 0
    assert iou(a, Box(5, 5, 6, 6)) == 0
    assert iou(a, Box(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-12)
    assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0


def test_box_validation_and_center_form():
    with pytest.raises(ValueError, match="x2 >= x1"):
        Box(2, 0, 1, 1)
    b = Box.from_center(3, 4, 2, 6)
    assert b.as_tuple() == (2, 1, 4, 7) and b.to_center() == (3, 4, 2, 6)


def test_r_wiou_hand_cases():
    # pred centered (0,0) spans a 10x10 box that encloses the gt centered (3,4)
    pred, gt = Box(-5, -5, 5, 5), Box(2, 3, 4, 5)
    assert r_wiou(pred, gt) == pytest.approx(math.exp(25 / 200), abs=1e-12)
    assert r_wiou(pred, gt) == pytest.approx(1.1331, abs=1e-4)
    # two 2x2 boxes with the same centers: enclosing box is 5 x 6
    assert r_wiou(Box.from_center(0, 0, 2, 2), Box.from_center(3, 4, 2, 2)) == pytest.approx(math.exp(25 / 61))
    assert r_wiou(Box(0, 0, 4, 2), Box(1, 0, 3, 2)) == 1
    assert r_wiou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 1


def test_wiou_v1_hand_cases():
    assert wiou_v1(Box(0, 0, 2, 2), Box(0, 0, 2, 2)) == 0
    assert wiou_v1(Box(0, 0, 4, 2), Box(1, 0, 3, 2)) == pytest.approx(0.5)
    pred, gt = Box(-5, -5, 5, 5), Box(2, 3, 4, 5)
    assert wiou_v1(pred, gt) == pytest.approx((1 - 4 / 100) * math.exp(25 / 200), abs=1e-12)


def test_beta_and_focus_hand_cases():
    s = WIoUState(running_mean=0.4, initialized=True)
    assert beta(0.4, s) == 1
    assert beta(0.3, WIoUState()) == 1  # first observation becomes the mean
    assert beta(0.3, WIoUState(running_mean=0.0, initialized=True)) == 1
    assert r_focus(1.0, WIoUState()) == pytest.approx(1.9 ** 2 / 3, abs=1e-12)
    assert r_focus(1.0, WIoUState()) == pytest.approx(1.2033, abs=1e-4)


@pytest.mark.parametrize("alpha", [1.01, 1.5, 1.9, 3.0, 10.0])
@pytest.mark.parametrize("delta", [0.5, 3.0, 7.0])
def test_focus_is_one_at_delta(alpha, delta):
    assert r_focus(delta, WIoUState(alpha=alpha, delta=delta)) == 1.0


def test_wiou_v3_composition_with_frozen_mean():
    state = WIoUState(momentum=0.0, running_mean=0.5, initialized=True)
    pred, gt = Box(0, 0, 10, 8), Box(3, 2, 12, 11)
    inter = 7 * 6
    li = 1 - inter / (80 + 81 - inter)
    b = li / 0.5
    r = b / (3 * 1.9 ** (b - 3))
    rw = math.exp(((5 - 7.5) ** 2 + (4 - 6.5) ** 2) / (12 ** 2 + 11 ** 2))
    loss, new = wiou_v3(pred, gt, state)
    assert loss == pytest.approx(r * rw * li, rel=1e-12)
    assert new.running_mean == 0.5


def test_wiou_v3_beta_equals_delta_gives_v1():
    pred, gt = Box(0, 0, 10, 8), Box(3, 2, 12, 11)
    li = l_iou(pred, gt)
    state = WIoUState(running_mean=li / 3.0, initialized=True)
    assert wiou_v3(pred, gt, state)[0] == pytest.approx(wiou_v1(pred, gt), rel=1e-12)


def test_wiou_v3_state_update_uses_pre_update_mean():
    pred, gt = Box(0, 0, 10, 10), Box(5, 0, 15, 10)
    s0 = WIoUState(running_mean=0.2, initialized=True)
    loss, s1 = wiou_v3(pred, gt, s0)
    li = l_iou(pred, gt)
    assert s1.running_mean == pytest.approx(0.99 * 0.2 + 0.01 * li)
    assert loss == pytest.approx(r_focus(li / 0.2, s0) * wiou_v1(pred, gt))
    _, first = wiou_v3(pred, gt, WIoUState())
    assert first.initialized and first.running_mean == li


def test_state_validation():
    with pytest.raises(ValueError, match="alpha"):
        WIoUState(alpha=1.0)
    with pytest.raises(ValueError, match="delta"):
        WIoUState(delta=0)
    with pytest.raises(ValueError, match="momentum"):
        WIoUState(momentum=1.0)


# -- invariants -------------------------------------------------------------------------

@given(boxes(), boxes())
def test_loss_invariants(p, g):
    li = l_iou(p, g)
    assert 0 <= li <= 1
    assert r_wiou(p, g) >= 1
    assert wiou_v1(p, g) >= li
    if p.to_center()[:2] == g.to_center()[:2]:
        assert wiou_v1(p, g) == li
    v3, _ = wiou_v3(p, g, WIoUState(running_mean=0.3, initialized=True))
    assert v3 >= 0


@given(boxes(), boxes())
def test_v1_strictly_amplifies_off_center(p, g):
    assume(p.to_center()[:2] != g.to_center()[:2] and l_iou(p, g) > 0)
    assert wiou_v1(p, g) > l_iou(p, g)


@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(1, 20), st.integers(1, 20),
       st.integers(-20, 20), st.integers(-20, 20), st.integers(1, 20), st.integers(1, 20))
def test_v3_zero_iff_equal(x, y, w, h, x2, y2, w2, h2):
    p, g = Box(x, y, x + w, y + h), Box(x2, y2, x2 + w2, y2 + h2)
    loss, _ = wiou_v3(p, g, WIoUState(running_mean=0.5, initialized=True))
    assert (loss == 0) == (p == g)


def test_focus_single_interior_maximum():
    for alpha, delta in [(1.9, 3.0), (1.5, 2.0), (2.5, 4.0)]:
        st_ = WIoUState(alpha=alpha, delta=delta)
        b = np.linspace(1e-3, 10 * delta, 20001)
        r = np.array([r_focus(v, st_) for v in b])
        sign = np.sign(np.diff(r))
        assert np.count_nonzero(sign[1:] != sign[:-1]) == 1
        peak = b[np.argmax(r)]
        assert 1e-3 < peak < 10 * delta
        assert peak == pytest.approx(1 / math.log(alpha), abs=2 * (b[1] - b[0]))


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=60), st.floats(0, 0.99))
def test_running_mean_bounded(vals, m):
    means = running_means(vals, WIoUState(momentum=m))
    for k, mean in enumerate(means):
        seen = vals[:k + 1]
        assert min(seen) - 1e-12 <= mean <= max(seen) + 1e-12


# -- gradients ------------------------------------------------------------------------

def test_gradient_zero_for_identical_boxes():
    b = Box(1, 2, 5, 7)
    assert np.abs(grad_wiou_v3(b, b, WIoUState(running_mean=0.3, initialized=True))).max() <= 1e-12


def test_gradient_matches_frozen_finite_differences():
    res = gradcheck(trials=300, seed=11)
    assert res.trials == 300 and res.max_rel_error <= 1e-4


def test_gradient_detaches_enclosing_box():
    # pred sticks out of gt, so the enclosing box moves with pred's corners
    pred, gt = Box(0, 0, 12, 9), Box(4, 3, 10, 11)
    state = WIoUState(running_mean=0.4, initialized=True)
    analytic = grad_wiou_v3(pred, gt, state)
    r = r_focus(beta(l_iou(pred, gt), state), state)
    undetached = lambda v: r * wiou_v1(Box(*v), gt)  # noqa: E731
    frozen = frozen_loss(gt, state, pred)
    v = pred.as_array()
    assert rel_error(analytic, numeric_grad(frozen, v)) <= 1e-6
    assert rel_error(analytic, numeric_grad(undetached, v)) > 1e-3
    # scaling gt about its center changes W, H and the loss value
    big = Box.from_center(*gt.to_center()[:2], 14, 18)
    assert wiou_v3(pred, big, state)[0] != wiou_v3(pred, gt, state)[0]


def test_gradient_detaches_beta():
    pred, gt = Box(0, 0, 10, 10), Box(3, 1, 12, 9)
    state = WIoUState(running_mean=0.3, initialized=True)
    live_beta = lambda v: wiou_v3(Box(*v), gt, state)[0]  # noqa: E731
    assert rel_error(grad_wiou_v3(pred, gt, state), numeric_grad(live_beta, pred.as_array())) > 1e-3


def test_kink_detection_and_forced_kinks():
    assert is_kink(Box(0, 0, 5, 5), Box(0, 2, 7, 8))
    assert not is_kink(Box(0.5, 0.5, 5, 5), Box(0, 2, 7, 8))
    res = gradcheck(trials=100, seed=1, force_kink=True)
    assert res.rejected_kinks >= 10 and res.max_rel_error <= 1e-4


@pytest.mark.parametrize("start,gt", [
    ((0, 0, 20, 20), (30, 25, 60, 70)),
    ((10, 10, 12, 12), (0, 0, 50, 40)),
    ((100, 100, 300, 300), (120, 90, 160, 150)),
    # x edges converge first and then sit on the tie while y still has to grow
    ((103.19470277011548, 79.73788584299922, 119.87132536028345, 123.40617562687117),
     (118.27465571800745, 77.33106847157171, 133.61865964645958, 130.6403723973155)),
])
def test_fit_box_converges(start, gt):
    res = fit_box(Box(*start), Box(*gt))
    assert res.iou > 0.99 and res.steps <= 500


@given(st.integers(0, 10_000))
def test_fit_box_converges_from_random_displacements(seed):
    rng = np.random.default_rng(seed)
    gx, gy, gw, gh = *rng.uniform(50, 150, 2), *rng.uniform(5, 80, 2)
    start = Box.from_center(gx + rng.uniform(-40, 40), gy + rng.uniform(-40, 40),
                            gw * rng.uniform(0.3, 2), gh * rng.uniform(0.3, 2))
    res = fit_box(start, Box.from_center(gx, gy, gw, gh))
    assert res.iou > 0.99 and res.steps <= 500

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import oracle_mean_ap, random_ap_fixture
from pfn import metrics as M
from pfn.metrics import MatchResult


def _mask(shape, cells):
    m = np.zeros(shape, dtype=bool)
    for r, c in cells:
        m[r, c] = True
    return m


# -- mask IoU ---------------------------------------------------------------------------


def test_mask_iou_fixtures():
    a = _mask((3, 3), [(0, 0), (0, 1)])
    b = _mask((3, 3), [(0, 1), (1, 1)])
    assert M.mask_iou(a, a) == 1.0
    assert M.mask_iou(a, _mask((3, 3), [(2, 2)])) == 0.0
    assert M.mask_iou(a, b) == pytest.approx(1 / 3)
    assert M.mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    with pytest.raises(ValueError):
        M.mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_mask_iou_symmetric_and_one_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 4, 4)) > 0.5
    assert M.mask_iou(a, b) == M.mask_iou(b, a)
    if a.any():
        assert (M.mask_iou(a, b) == 1.0) == bool(np.array_equal(a, b))


# -- matching and AP -----------------------------------------------------------------------


def test_greedy_match_threshold_cases():
    g = np.zeros((1, 10), dtype=bool)
    g[0, :10] = True
    p6 = np.zeros((1, 10), dtype=bool)
    p6[0, :6] = True
    p4 = np.zeros((1, 10), dtype=bool)
    p4[0, :4] = True
    assert M.greedy_match([(0.9, p6, 0)], [(g, 0)], 0.5).tp.tolist() == [True]
    assert M.greedy_match([(0.9, p4, 0)], [(g, 0)], 0.5).tp.tolist() == [False]


def test_greedy_match_duplicate_suppression():
    g = np.ones((2, 2), dtype=bool)
    m = M.greedy_match([(0.3, g, 0), (0.9, g, 0)], [(g, 0)], 0.5)
    assert m.tp.tolist() == [True, False]
    assert m.scores.tolist() == [0.9, 0.3]


def test_greedy_match_respects_images_and_threshold_range():
    g = np.ones((2, 2), dtype=bool)
    assert M.greedy_match([(0.9, g, 1)], [(g, 0)], 0.5).tp.tolist() == [False]
    with pytest.raises(ValueError):
        M.greedy_match([], [], 0.0)


def test_average_precision_fixtures():
    assert M.average_precision(MatchResult(np.array([True, True]), np.array([2.0, 1.0]), 2)) == 1.0
    assert M.average_precision(MatchResult(np.array([True, False]), np.array([2.0, 1.0]), 2)) == 0.5
    assert M.average_precision(MatchResult(np.array([], dtype=bool), np.array([]), 3)) == 0.0
    assert M.average_precision(MatchResult(np.array([True]), np.array([1.0]), 0)) == 0.0


def test_average_precision_uses_envelope():
    # ranks: FP, TP, TP over 2 GT -> precision 1/2 at recall 1/2, 2/3 at recall 1
    m = MatchResult(np.array([False, True, True]), np.array([3.0, 2.0, 1.0]), 2)
    assert M.average_precision(m) == pytest.approx(2 / 3)


def test_ap_r_perfect_predictions():
    rng = np.random.default_rng(0)
    gts = [[(1, rng.random((5, 5)) > 0.5), (2, rng.random((5, 5)) > 0.5)] for _ in range(3)]
    preds = [[(c, m, float(rng.random())) for c, m in g] for g in gts]
    rep = M.ap_r(preds, gts, 0.5)
    assert rep.mean_ap == 1.0 and all(v == 1.0 for v in rep.per_class.values())
    assert M.ap_r_vol(preds, gts) == 1.0


def test_ap_r_two_class_dropped_instance_fixture():
    masks = [np.eye(4, dtype=bool) for _ in range(4)]
    gts = [[(1, masks[0]), (2, masks[0])] for _ in range(4)]
    preds = [[(1, masks[0], 0.9 - 0.1 * i), (2, masks[0], 0.5 + 0.1 * i)] for i in range(3)] + [[]]
    rep = M.ap_r(preds, gts, 0.5)
    assert rep.per_class == {1: 0.75, 2: 0.75}
    assert rep.mean_ap == pytest.approx(oracle_mean_ap(preds, gts, 0.5), abs=1e-9)


def test_ap_r_ignores_classes_without_ground_truth():
    g = np.ones((2, 2), dtype=bool)
    rep = M.ap_r([[(1, g, 1.0), (3, g, 0.5)]], [[(1, g)]], 0.5)
    assert rep.per_class == {1: 1.0}
    with pytest.raises(ValueError):
        M.ap_r([[]], [[], []], 0.5)


def test_ap_vol_threshold_counting():
    g = np.zeros((1, 20), dtype=bool)
    g[0, :20] = True
    p = np.zeros((1, 20), dtype=bool)
    p[0, :11] = True  # IoU 11/20 = 0.55
    assert M.mask_iou(p, g) == pytest.approx(0.55)
    preds = [[(1, p, 0.9)]]
    gts = [[(1, g)]]
    assert M.ap_r_vol(preds, gts) == pytest.approx(5 / 9, abs=1e-12)
    assert M.ap_r_vol([[]], gts) == 0.0


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**30))
def test_ap_r_matches_bruteforce_oracle(seed):
    preds, gts = random_ap_fixture(np.random.default_rng(seed))
    for thr in (0.3, 0.5, 0.7):
        assert abs(M.ap_r(preds, gts, thr).mean_ap - oracle_mean_ap(preds, gts, thr)) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**30))
def test_ap_monotone_in_threshold_and_rank_invariant(seed):
    preds, gts = random_ap_fixture(np.random.default_rng(seed))
    vals = [M.ap_r(preds, gts, t).mean_ap for t in M.VOL_THRESHOLDS]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
    squashed = [[(c, m, float(np.tanh(3 * s) + 5)) for c, m, s in insts] for insts in preds]
    assert M.ap_r(squashed, gts, 0.5).mean_ap == M.ap_r(preds, gts, 0.5).mean_ap


# -- pixel IoU and reports ----------------------------------------------------------------


def test_mean_pixel_iou_fixtures():
    lab = np.array([[0, 1], [2, 1]])
    assert M.mean_pixel_iou([lab], [lab], 3) == 1.0
    gt = np.array([[1, 1], [0, 0]])
    pred = np.zeros((2, 2), dtype=np.int64)
    # background: pred 4 pixels, gt 2 pixels, intersection 2 -> 2/4
    assert M.mean_pixel_iou([pred], [gt], 2) == pytest.approx((2 / 4 + 0) / 2)
    # class 2 absent everywhere is excluded
    assert M.mean_pixel_iou([pred], [gt], 3) == pytest.approx((2 / 4 + 0) / 2)


def test_mean_pixel_iou_half_foreground_fixture():
    gt = np.zeros((3, 2), dtype=np.int64)
    gt[:1] = 1  # one third foreground
    pred = np.zeros_like(gt)
    # background: intersection 4, union 6 -> 2/3 ; class 1: 0
    assert M.mean_pixel_iou([pred], [gt], 2) == pytest.approx((2 / 3 + 0) / 2)


def test_report_formats():
    rep = M.EvalReport(0.5, {1: 0.5, 2: 1.0}, 0.75, 0.6)
    text = rep.to_text()
    assert "mean" in text and "0.7500" in text and "vol" in text
    kv = dict(line.split("=") for line in rep.to_kv().strip().splitlines())
    assert float(kv["mean_ap"]) == 0.75 and float(kv["ap_class_2"]) == 1.0 and float(kv["ap_vol"]) == 0.6

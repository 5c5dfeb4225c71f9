import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmccnet import metrics as M


def boundary_loops(mask):
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    a, b = i + di, j + dj
                    if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                        out[i, j] = True
    return out


def hausdorff_pairs(a, b):
    pa, pb = np.argwhere(boundary_loops(a)), np.argwhere(boundary_loops(b))
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return math.hypot(*a.shape)
    d = lambda p, q: max(min(math.dist(x, y) for y in q) for x in p)
    return max(d(pa, pb), d(pb, pa))


def auc_pairs(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_confusion_counts_and_metrics_by_hand():
    pred = np.array([[0.9, 0.2], [0.7, 0.4]])
    mask = np.array([[1, 1], [0, 0]])
    c = M.confusion_counts(pred, mask)
    assert c == M.ConfusionCounts(tp=1, fp=1, tn=1, fn=1)
    m = M.basic_metrics(c)
    assert m == {"accuracy": 0.5, "precision": 0.5, "recall": 0.5, "dice": 0.5, "iou": 1 / 3}


def test_empty_masks_score_perfectly():
    z = np.zeros((4, 4))
    m = M.basic_metrics(M.confusion_counts(z, z))
    assert all(v == 1.0 for v in m.values())
    assert M.hausdorff_distance(z, z) == 0.0


def test_hausdorff_one_empty_is_image_diagonal():
    a = np.zeros((6, 8))
    b = a.copy()
    b[2, 3] = 1
    assert M.hausdorff_distance(a, b) == 10.0


def test_hausdorff_matches_scipy():
    from scipy.spatial.distance import directed_hausdorff

    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.random((20, 20)) > 0.6
        b = rng.random((20, 20)) > 0.6
        pa, pb = np.argwhere(M.boundary(a)), np.argwhere(M.boundary(b))
        expected = max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])
        assert M.hausdorff_distance(a, b) == pytest.approx(expected, abs=1e-12)


def test_hausdorff_is_symmetric_and_zero_on_self():
    rng = np.random.default_rng(1)
    a = rng.random((16, 16)) > 0.5
    b = rng.random((16, 16)) > 0.5
    assert M.hausdorff_distance(a, b) == M.hausdorff_distance(b, a)
    assert M.hausdorff_distance(a, a) == 0.0


def test_auc_matches_sklearn_with_ties():
    from sklearn.metrics import roc_auc_score

    rng = np.random.default_rng(2)
    scores = np.round(rng.random(300), 1)  # heavy ties
    labels = (rng.random(300) > 0.7).astype(int)
    assert M.roc_auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_auc_constant_scores_is_half_and_single_class_raises():
    labels = np.array([0, 1, 1, 0])
    assert M.roc_auc(np.full(4, 0.5), labels) == 0.5
    with pytest.raises(M.UndefinedMetricError):
        M.roc_auc(np.array([0.1, 0.9]), np.array([1, 1]))


def test_metrics_against_brute_force_on_random_masks():
    rng = np.random.default_rng(3)
    for _ in range(30):
        prob = rng.random((16, 16))
        mask = (rng.random((16, 16)) > rng.uniform(0.2, 0.9)).astype(int)
        pred = prob >= 0.5
        tp = sum(1 for i in range(16) for j in range(16) if pred[i, j] and mask[i, j])
        fp = sum(1 for i in range(16) for j in range(16) if pred[i, j] and not mask[i, j])
        fn = sum(1 for i in range(16) for j in range(16) if not pred[i, j] and mask[i, j])
        assert M.confusion_counts(prob, mask) == M.ConfusionCounts(tp, fp, 256 - tp - fp - fn, fn)
        assert M.hausdorff_distance(pred, mask) == pytest.approx(hausdorff_pairs(pred, mask), abs=1e-12)
        if 0 < mask.sum() < 256:
            assert M.roc_auc(prob, mask) == pytest.approx(auc_pairs(prob.ravel(), mask.ravel()), abs=1e-12)


masks16 = arrays(np.bool_, (16, 16))


@settings(max_examples=80, deadline=None)
@given(a=masks16, b=masks16)
def test_dice_iou_identity_and_ranges(a, b):
    m = M.basic_metrics(M.confusion_counts(a.astype(float), b))
    assert m["dice"] == pytest.approx(2 * m["iou"] / (1 + m["iou"]), abs=1e-12)
    assert all(0.0 <= v <= 1.0 for v in m.values())
    # dice is the harmonic mean of precision and recall when both are defined
    if m["precision"] + m["recall"] > 0 and (a & b).any():
        hm = 2 * m["precision"] * m["recall"] / (m["precision"] + m["recall"])
        assert m["dice"] == pytest.approx(hm, abs=1e-12)


def test_boundary_matches_loops():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = rng.random((12, 15)) > 0.4
        np.testing.assert_array_equal(M.boundary(m), boundary_loops(m))


def test_confidence_interval_one_to_ten():
    s = M.confidence_interval(range(1, 11))
    assert s.mean == 5.5
    assert s.sd == pytest.approx(3.0276503540974917)
    assert (s.ci_low, s.ci_high) == pytest.approx((3.334, 7.666), abs=1e-3)


def test_confidence_interval_agrees_with_scipy_t():
    from scipy import stats

    rng = np.random.default_rng(5)
    for n in (2, 5, 10, 30):
        v = rng.normal(size=n)
        s = M.confidence_interval(v)
        lo, hi = stats.t.interval(0.95, n - 1, loc=v.mean(), scale=stats.sem(v))
        assert s.ci_low == pytest.approx(lo, abs=2e-3 * s.sd)
        assert s.ci_high == pytest.approx(hi, abs=2e-3 * s.sd)


def test_t_table_lookup():
    assert M.t_critical(9) == 2.262
    assert M.t_critical(1) == 12.706
    assert M.t_critical(45) == 2.021
    assert M.t_critical(10_000) == 1.960
    with pytest.raises(ValueError):
        M.t_critical(0)


def test_zero_spread_gives_zero_width():
    s = M.confidence_interval([0.9] * 5)
    assert s.sd == 0 and s.ci_low == s.ci_high == 0.9


def test_format_cell():
    s = M.RunStatistics((), 0.9445, 0.0012, 0.9419, 0.9471)
    assert s.format_cell() == "94.45 ± 0.12, (94.19, 94.71)"


def test_aggregate_runs_orders_keys_and_checks_consistency():
    runs = [{"hdd": 3.0, "dice": 0.8, "iou": 0.7}, {"iou": 0.6, "dice": 0.9, "hdd": 5.0}]
    agg = M.aggregate_runs(runs)
    assert list(agg) == ["dice", "iou", "hdd"]
    assert agg["dice"].mean == pytest.approx(0.85)
    single = M.aggregate_runs(runs[:1])
    assert single["dice"].ci_low == single["dice"].ci_high == 0.8
    with pytest.raises(ValueError):
        M.aggregate_runs([{"dice": 1.0}, {"iou": 1.0}])
    with pytest.raises(ValueError):
        M.aggregate_runs([])


def test_image_metrics_keys_and_nan_auc():
    mask = np.zeros((1, 8, 8))
    out = M.image_metrics(np.full((1, 8, 8), 0.2), mask)
    assert set(out) == {"accuracy", "precision", "recall", "dice", "iou", "hdd", "auc"}
    assert math.isnan(out["auc"])


@given(values=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_interval_contains_mean(values):
    s = M.confidence_interval(values)
    assert s.ci_low <= s.mean + 1e-9 and s.mean <= s.ci_high + 1e-9

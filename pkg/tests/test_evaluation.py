import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from avloc.datagen import EventAnnotation
from avloc.evaluation import (
    TIOU_THRESHOLDS, average_precision, cross_similarity_matrix, evaluate, mean_csm_std, tiou,
)
from avloc.postprocess import Detection
from oracles import map_ref

# 3 videos, 2 classes; a mix of hits, loose hits, duplicates and misses
FIXTURE_GT = {
    "v0": [(0.0, 10.0, 0), (20.0, 30.0, 1)],
    "v1": [(5.0, 15.0, 0), (16.0, 18.0, 0)],
    "v2": [(2.0, 40.0, 1)],
}
FIXTURE_DETS = {
    "v0": [(0.5, 10.0, 0, 0.95), (1.0, 9.0, 0, 0.6), (22.0, 29.0, 1, 0.8), (40.0, 45.0, 1, 0.3)],
    "v1": [(6.0, 15.0, 0, 0.7), (16.5, 18.0, 0, 0.65), (30.0, 35.0, 0, 0.9)],
    "v2": [(10.0, 38.0, 1, 0.55), (2.0, 20.0, 1, 0.5), (3.0, 4.0, 0, 0.2)],
}


def _wrap(gt, dets):
    anns = {v: [EventAnnotation(s, e, c) for s, e, c in g] for v, g in gt.items()}
    ds = {v: [Detection(s, e, c, p) for s, e, c, p in d] for v, d in dets.items()}
    return anns, ds


def test_tiou_values():
    assert tiou((2, 6), (2, 6)) == 1.0
    assert tiou((2, 6), (4, 8)) == pytest.approx(1 / 3)
    assert tiou((0, 1), (2, 3)) == 0.0


@given(a=st.tuples(st.floats(0, 100), st.floats(0.01, 50)),
       b=st.tuples(st.floats(0, 100), st.floats(0.01, 50)))
def test_tiou_symmetric_and_bounded(a, b):
    ia, ib = (a[0], a[0] + a[1]), (b[0], b[0] + b[1])
    x = tiou(ia, ib)
    assert x == tiou(ib, ia) and 0 <= x <= 1
    assert tiou(ia, ia) == pytest.approx(1.0)


def test_ap_hand_walk():
    gts = [("v", 0.0, 4.0)]
    assert average_precision([("v", 0.0, 4.0, 0.9)], gts, 0.9) == 1.0
    two = [("v", 0.0, 4.0, 0.9), ("v", 10.0, 12.0, 0.8)]
    assert average_precision(two, gts, 0.5) == 1.0
    assert average_precision([("v", 3.0, 9.0, 0.9)], gts, 0.5) == 0.0
    assert math.isnan(average_precision(two, [], 0.5))


def test_fixture_matches_bruteforce_reference():
    anns, dets = _wrap(FIXTURE_GT, FIXTURE_DETS)
    report = evaluate(dets, anns, 2)
    per_thr, avg = map_ref(FIXTURE_DETS, FIXTURE_GT, 2, TIOU_THRESHOLDS)
    for thr, ref in zip(TIOU_THRESHOLDS, per_thr):
        assert abs(report.map_at[thr] - ref) < 1e-9
    assert abs(report.avg_map - avg) < 1e-9
    assert report.num_gt == [3, 2]
    assert 0 < report.avg_map < 1


def test_perfect_and_empty():
    anns, _ = _wrap(FIXTURE_GT, {})
    perfect = {v: [Detection(s, e, c, 1.0) for s, e, c in g] for v, g in FIXTURE_GT.items()}
    assert evaluate(perfect, anns, 2).avg_map == pytest.approx(1.0)
    empty = evaluate({}, anns, 2)
    assert empty.avg_map == 0.0 and all(v == 0.0 for v in empty.map_at.values())


def test_avg_is_mean_over_nine_thresholds():
    anns, dets = _wrap(FIXTURE_GT, FIXTURE_DETS)
    r = evaluate(dets, anns, 2)
    assert len(r.map_at) == 9 and list(r.map_at) == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert r.avg_map == pytest.approx(np.mean(list(r.map_at.values())))
    vals = [r.map_at[t] for t in TIOU_THRESHOLDS]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert all(0 <= v <= 1 for v in vals)


def test_class_without_gt_is_skipped():
    anns, dets = _wrap(FIXTURE_GT, FIXTURE_DETS)
    r2 = evaluate(dets, anns, 2)
    r3 = evaluate(dets, anns, 3)
    assert r3.avg_map == pytest.approx(r2.avg_map)
    assert np.isnan(r3.per_class_ap[:, 2]).all()


def test_permutation_invariance():
    anns, dets = _wrap(FIXTURE_GT, FIXTURE_DETS)
    base = evaluate(dets, anns, 2).avg_map
    rng = np.random.default_rng(0)
    for _ in range(5):
        shuffled = {v: [d[i] for i in rng.permutation(len(d))] for v, d in dets.items()}
        assert evaluate(shuffled, anns, 2).avg_map == base


def test_report_json_and_table():
    anns, dets = _wrap(FIXTURE_GT, FIXTURE_DETS)
    r = evaluate(dets, anns, 2)
    js = r.to_json()
    assert set(js["map_at"]) == {f"{t:.1f}" for t in TIOU_THRESHOLDS}
    head = r.table().splitlines()[0].split()
    assert head == ["Method", "0.5", "0.6", "0.7", "0.8", "0.9", "Avg."]


def test_csm_orthonormal_identity():
    T = 10
    F = np.eye(T)
    csm, std = cross_similarity_matrix(F, F)
    np.testing.assert_allclose(csm, np.eye(T), atol=1e-12)
    assert std == pytest.approx(math.sqrt(T - 1) / T, abs=1e-12)


def test_csm_constant_features():
    F = np.ones((6, 4))
    csm, std = cross_similarity_matrix(F, 2 * F)
    np.testing.assert_allclose(csm, 1.0)
    assert std == pytest.approx(0.0, abs=1e-12)


def test_csm_std_aggregation_is_mean():
    rng = np.random.default_rng(0)
    pairs = [(rng.standard_normal((8, 4)), rng.standard_normal((8, 4))) for _ in range(3)]
    stds = [cross_similarity_matrix(v, a)[1] for v, a in pairs]
    assert mean_csm_std(pairs) == pytest.approx(np.mean(stds))

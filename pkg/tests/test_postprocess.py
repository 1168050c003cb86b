import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from avloc.postprocess import (
    DecodeStats, Detection, decode, read_detections, segment_tiou, soft_nms, write_detections,
    detections_record,
)
from oracles import soft_nms_ref

# dyadic coordinates keep every tIoU exact, so the two implementations agree bit for bit
NMS_FIXTURE = [
    (0.0, 8.0, 0, 0.9),
    (1.0, 9.0, 0, 0.8),
    (4.0, 12.0, 0, 0.75),
    (2.0, 6.0, 1, 0.7),
    (20.0, 24.0, 0, 0.6),
    (3.0, 7.0, 1, 0.5),
]


def _one_level(T, C, t, c, ds, de, p=0.9):
    probs = np.zeros((T, C))
    reg = np.zeros((2, C, T))
    probs[t, c] = p
    reg[0, c, t], reg[1, c, t] = ds, de
    return probs, reg


def test_decode_hand_value():
    probs, reg = _one_level(32, 2, 10, 1, 3.0, 5.0)
    dets = decode([probs], [reg], [1], 1.0)
    assert len(dets) == 1
    d = dets[0]
    assert (d.start, d.end, d.class_id, d.score) == (7.0, 15.0, 1, 0.9)


def test_decode_drops_degenerate_and_nonfinite():
    probs, reg = _one_level(8, 1, 3, 0, 0.0, 0.0)
    stats = DecodeStats()
    assert decode([probs], [reg], [1], stats=stats) == []
    assert stats.dropped_degenerate == 1
    probs, reg = _one_level(8, 1, 3, 0, np.nan, 1.0)
    stats = DecodeStats()
    assert decode([probs], [reg], [1], stats=stats) == []
    assert stats.dropped_nonfinite == 1


def test_decode_below_threshold_empty():
    probs = np.full((8, 3), 1e-4)
    assert decode([probs], [np.ones((2, 3, 8))], [1], score_thresh=0.001) == []


def test_decode_clamps_to_duration_and_topk():
    probs, reg = _one_level(16, 1, 2, 0, 5.0, 30.0)
    d = decode([probs], [reg], [2], 0.5, duration=16.0)[0]
    assert d.start == 0.0 and d.end == 16.0
    probs = np.linspace(0.1, 0.9, 16)[:, None]
    dets = decode([probs], [np.ones((2, 1, 16))], [1], pre_nms_topk=5)
    assert len(dets) == 5 and dets[0].score == pytest.approx(0.9)


def test_decode_single_label_mode():
    probs = np.array([[0.6, 0.7]])
    reg = np.ones((2, 2, 1))
    assert len(decode([probs], [reg], [1], single_label=False)) == 2
    only = decode([probs], [reg], [1], single_label=True)
    assert len(only) == 1 and only[0].class_id == 1


def test_decode_roundtrip_1000_events():
    rng = np.random.default_rng(0)
    strides = [2, 4, 8, 16]
    for _ in range(1000):
        sps = float(rng.choice([0.25, 0.5, 1.0, 1.6]))
        level = int(rng.integers(0, 4))
        stride = strides[level]
        T_l = 64
        t = int(rng.integers(0, T_l))
        time = t * stride
        s = time - rng.uniform(0.01, 40.0)
        e = time + rng.uniform(0.01, 40.0)
        # encode: distances from the anchor in stride units
        ds, de = (time - s) / stride, (e - time) / stride
        probs = [np.zeros((T_l, 3)) for _ in strides]
        regs = [np.zeros((2, 3, T_l)) for _ in strides]
        c = int(rng.integers(0, 3))
        probs[level][t, c] = 0.5
        regs[level][:, c, t] = (ds, de)
        det = decode(probs, regs, strides, sps)[0]
        start = max(s, 0.0) * sps
        assert abs(det.start - start) < 1e-9 and abs(det.end - e * sps) < 1e-9
        assert det.level == level and det.class_id == c


def _as_tuples(dets):
    return [(d.start, d.end, d.class_id, d.score) for d in dets]


def test_soft_nms_hand_value():
    # [0, 8] vs [0, 4.8]: tIoU 0.6
    dets = [Detection(0.0, 8.0, 0, 0.9), Detection(0.0, 4.8, 0, 0.8)]
    out = soft_nms(dets, sigma_nms=0.5)
    assert segment_tiou(0.0, 8.0, 0.0, 4.8) == pytest.approx(0.6)
    assert out[1].score == pytest.approx(0.8 * math.exp(-0.72), abs=1e-12)
    # independent evaluation of the decay: 0.8 * e^-0.72 = 0.389402 to six places
    assert abs(out[1].score - 0.389402) < 1e-5


def test_soft_nms_all_subsets_match_reference():
    for r in range(len(NMS_FIXTURE) + 1):
        for subset in itertools.combinations(NMS_FIXTURE, r):
            ours = _as_tuples(soft_nms([Detection(*d) for d in subset]))
            assert ours == soft_nms_ref(list(subset))


def test_disjoint_and_cross_class_untouched():
    dets = [Detection(0, 2, 0, 0.9), Detection(3, 5, 0, 0.8), Detection(0, 2, 1, 0.7)]
    out = soft_nms(dets)
    assert sorted(_as_tuples(out)) == sorted(_as_tuples(dets))


@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0.1, 20), st.integers(0, 2),
                          st.floats(0.01, 1.0)), max_size=12))
def test_soft_nms_subset_and_scores_decay(raw):
    dets = [Detection(s, s + d, c, p) for s, d, c, p in raw]
    out = soft_nms(dets)
    originals = {}
    for d in dets:
        originals.setdefault((d.start, d.end, d.class_id), []).append(d.score)
    for d in out:
        key = (d.start, d.end, d.class_id)
        assert key in originals and d.score <= max(originals[key]) + 1e-15
    keys = [(-d.score, d.start) for d in out]
    assert keys == sorted(keys)


def test_soft_nms_cap():
    dets = [Detection(3 * i, 3 * i + 1, 0, 0.5 + i / 1000) for i in range(150)]
    assert len(soft_nms(dets, max_per_video=100)) == 100


def test_detection_invariants():
    with pytest.raises(ValueError):
        Detection(2.0, 2.0, 0, 0.5)
    with pytest.raises(ValueError):
        Detection(1.0, 2.0, 0, 0.0)


def test_detections_json_roundtrip(tmp_path):
    path = str(tmp_path / "d.json")
    recs = [detections_record("a", [Detection(1.0, 2.0, 0, 0.5)]), detections_record("b", [])]
    write_detections(path, recs)
    back = read_detections(path)
    assert set(back) == {"a", "b"} and back["b"] == []
    assert _as_tuples(back["a"]) == [(1.0, 2.0, 0, 0.5)]

"""Turn head outputs into time-stamped detections and refine them with Soft-NMS."""
import json
import math
from dataclasses import dataclass
from typing import List

import numpy as np


@dataclass
class Detection:
    start: float
    end: float
    class_id: int
    score: float
    level: int = -1

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"detection needs start < end, got [{self.start}, {self.end}]")
        if not self.score > 0:
            raise ValueError(f"detection score must be > 0, got {self.score}")

    def to_json(self):
        return {"start_sec": float(self.start), "end_sec": float(self.end),
                "class_id": int(self.class_id), "score": float(self.score)}


@dataclass
class DecodeStats:
    dropped_nonfinite: int = 0
    dropped_degenerate: int = 0


def decode(cls_probs, reg, strides, seconds_per_segment=1.0, score_thresh=0.001,
           pre_nms_topk=2000, duration=None, valid_lengths=None, single_label=False,
           stats=None):
    """Decode one video's per-level outputs into :class:`Detection` candidates.

    ``cls_probs[l]`` is ``[T_l, C]`` and ``reg[l]`` is ``[2, C, T_l]`` in
    stride units (numpy or CPU tensors). Position ``t`` at stride ``s``
    yields ``[(t - d_s) * s, (t + d_e) * s]`` segments, converted to seconds.
    With ``single_label`` only the arg-max class per position is kept.
    """
    stats = stats if stats is not None else DecodeStats()
    cands = []
    for level, (prob, off, stride) in enumerate(zip(cls_probs, reg, strides)):
        prob = np.asarray(prob, dtype=np.float64)
        off = np.asarray(off, dtype=np.float64)
        T_l, C = prob.shape
        if valid_lengths is not None:
            prob = prob.copy()
            prob[valid_lengths[level]:] = 0.0
        if single_label:
            keep = np.zeros_like(prob, dtype=bool)
            keep[np.arange(T_l), prob.argmax(axis=1)] = True
            prob = np.where(keep, prob, 0.0)
        ts, cs = np.nonzero(prob >= score_thresh)
        for t, c in zip(ts, cs):
            ds, de = off[0, c, t], off[1, c, t]
            if not (math.isfinite(ds) and math.isfinite(de)):
                stats.dropped_nonfinite += 1
                continue
            start = (t - ds) * stride * seconds_per_segment
            end = (t + de) * stride * seconds_per_segment
            cands.append((float(prob[t, c]), start, end, int(c), level))

    cands.sort(key=lambda x: (-x[0], x[1]))
    out = []
    for score, start, end, c, level in cands[:pre_nms_topk]:
        if duration is not None:
            start, end = min(max(start, 0.0), duration), min(max(end, 0.0), duration)
        else:
            start = max(start, 0.0)
        if not end > start or not score > 0:
            stats.dropped_degenerate += 1
            continue
        out.append(Detection(start, end, c, score, level))
    return out


def segment_tiou(a_start, a_end, b_start, b_end):
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union if union > 0 else 0.0


def _order_key(d):
    return (-d.score, d.start)


def soft_nms(dets: List[Detection], sigma_nms=0.5, final_thresh=0.001, max_per_video=100):
    """Per-class Gaussian Soft-NMS.

    Repeatedly keeps the best remaining detection of a class and rescales the
    others by ``exp(-tIoU^2 / sigma_nms)``, discarding any that fall below
    ``final_thresh``. Output is sorted by (score desc, start asc) and capped
    at ``max_per_video``.
    """
    kept = []
    for c in sorted({d.class_id for d in dets}):
        pool = [Detection(d.start, d.end, d.class_id, d.score, d.level)
                for d in dets if d.class_id == c]
        while pool:
            pool.sort(key=_order_key)
            best = pool.pop(0)
            kept.append(best)
            survivors = []
            for d in pool:
                iou = segment_tiou(best.start, best.end, d.start, d.end)
                d.score = d.score * math.exp(-(iou * iou) / sigma_nms)
                if d.score >= final_thresh:
                    survivors.append(d)
            pool = survivors
    kept.sort(key=_order_key)
    return kept[:max_per_video]


def detections_record(video_id, dets):
    return {"video_id": video_id, "detections": [d.to_json() for d in dets]}


def write_detections(path, records):
    with open(path, "w") as f:
        json.dump(records, f, indent=1)


def read_detections(path):
    """Load a detections JSON file -> ``{video_id: [Detection, ...]}``."""
    with open(path) as f:
        records = json.load(f)
    out = {}
    for rec in records:
        out[rec["video_id"]] = [Detection(d["start_sec"], d["end_sec"], int(d["class_id"]),
                                          float(d["score"])) for d in rec["detections"]]
    return out

"""tIoU-based mean average precision and the cross-similarity diagnostic."""
import json
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

TIOU_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))
TABLE_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def tiou(a, b):
    """Temporal IoU of two ``(start, end)`` intervals."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def segment_iou(target, candidates):
    """tIoU of one ``[2]`` segment against ``[N, 2]`` candidates."""
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    inter = (np.minimum(target[1], candidates[:, 1])
             - np.maximum(target[0], candidates[:, 0])).clip(0)
    union = (candidates[:, 1] - candidates[:, 0]) + (target[1] - target[0]) - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def interpolated_ap(precision, recall):
    """All-point interpolated area under the precision-recall curve."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(dets, gts, threshold):
    """AP of one class.

    ``dets``: list of ``(video_id, start, end, score)``; ``gts``: list of
    ``(video_id, start, end)``. Detections are visited by descending score;
    each claims the unmatched ground truth of its video with the highest
    tIoU at or above ``threshold``.
    """
    if not gts:
        return float("nan")
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i][3])
    by_video: Dict[str, List[int]] = {}
    for j, g in enumerate(gts):
        by_video.setdefault(g[0], []).append(j)
    gt_seg = np.array([[g[1], g[2]] for g in gts], dtype=np.float64)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        vid, s, e, _ = dets[i]
        cand = by_video.get(vid)
        if not cand:
            continue
        ious = segment_iou((s, e), gt_seg[cand])
        for k in np.argsort(-ious, kind="stable"):
            if ious[k] < threshold:
                break
            if used[cand[k]]:
                continue
            used[cand[k]] = True
            tp[rank] = 1.0
            break
    tp_cum = np.cumsum(tp)
    precision = tp_cum / np.arange(1, len(dets) + 1)
    recall = tp_cum / len(gts)
    return interpolated_ap(precision, recall)


@dataclass
class EvalReport:
    thresholds: tuple
    map_at: Dict[float, float]
    avg_map: float
    per_class_ap: np.ndarray  # [thresholds, C]; nan for classes without ground truth
    num_gt: List[int]

    def to_json(self):
        return {
            "thresholds": list(self.thresholds),
            "map_at": {f"{t:.1f}": v for t, v in self.map_at.items()},
            "avg_map": self.avg_map,
            "per_class_ap": [[None if np.isnan(x) else float(x) for x in row]
                             for row in self.per_class_ap],
            "num_gt": self.num_gt,
        }

    def table(self, label="model"):
        """Plain-text row in the ``0.5 .. 0.9 | Avg.`` layout (percent)."""
        cols = [t for t in TABLE_THRESHOLDS if t in self.map_at]
        head = f"{'Method':<24}" + "".join(f"{t:>8.1f}" for t in cols) + f"{'Avg.':>8}"
        row = f"{label:<24}" + "".join(f"{100 * self.map_at[t]:>8.1f}" for t in cols) \
            + f"{100 * self.avg_map:>8.1f}"
        return head + "\n" + row


def evaluate(detections, annotations, num_classes=None, thresholds=TIOU_THRESHOLDS):
    """Score detections against ground truth.

    ``detections``: ``{video_id: [Detection]}``; ``annotations``:
    ``{video_id: [EventAnnotation]}``. Classes without ground truth are left
    out of the class mean.
    """
    if num_classes is None:
        ids = [a.class_id for anns in annotations.values() for a in anns]
        ids += [d.class_id for ds in detections.values() for d in ds]
        num_classes = max(ids) + 1 if ids else 0
    gts_by_class = [[] for _ in range(num_classes)]
    for vid, anns in annotations.items():
        for a in anns:
            gts_by_class[a.class_id].append((vid, a.start, a.end))
    dets_by_class = [[] for _ in range(num_classes)]
    for vid, ds in detections.items():
        for d in ds:
            if d.class_id < num_classes:
                dets_by_class[d.class_id].append((vid, d.start, d.end, d.score))

    per_class = np.full((len(thresholds), num_classes), np.nan)
    for c in range(num_classes):
        for ti, thr in enumerate(thresholds):
            per_class[ti, c] = average_precision(dets_by_class[c], gts_by_class[c], thr)
    map_at = {}
    for ti, thr in enumerate(thresholds):
        row = per_class[ti]
        map_at[thr] = float(np.nanmean(row)) if np.isfinite(row).any() else 0.0
    avg = float(np.mean(list(map_at.values()))) if map_at else 0.0
    return EvalReport(thresholds=tuple(thresholds), map_at=map_at, avg_map=avg,
                      per_class_ap=per_class, num_gt=[len(g) for g in gts_by_class])


def write_report(path, report: EvalReport, label="model"):
    with open(path + ".json", "w") as f:
        json.dump(report.to_json(), f, indent=1)
    with open(path + ".txt", "w") as f:
        f.write(report.table(label) + "\n")


def cross_similarity_matrix(F_v, F_a, eps=1e-12):
    """Cosine similarity between every audio row (rows) and visual row (columns).

    Returns ``(csm [T, T], std)`` where ``std`` is the population standard
    deviation of all entries.
    """
    F_v = np.asarray(F_v, dtype=np.float64)
    F_a = np.asarray(F_a, dtype=np.float64)
    a = F_a / (np.linalg.norm(F_a, axis=1, keepdims=True) + eps)
    v = F_v / (np.linalg.norm(F_v, axis=1, keepdims=True) + eps)
    csm = a @ v.T
    return csm, float(csm.std())


def mean_csm_std(pairs):
    """Average per-video CSM standard deviation over ``[(F_v, F_a), ...]``."""
    stds = [cross_similarity_matrix(v, a)[1] for v, a in pairs]
    return float(np.mean(stds)) if stds else float("nan")

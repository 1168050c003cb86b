"""Label assignment over pyramid levels and the training objective."""
import math
import warnings
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
import torch.nn.functional as F

INF = math.inf


def default_regression_ranges(n_levels):
    """``(0,4], (4,8], (8,16], ...`` with the last level open-ended, in segments."""
    bounds = [0.0] + [4.0 * 2 ** k for k in range(n_levels - 1)] + [INF]
    return [(bounds[i], bounds[i + 1]) for i in range(n_levels)]


def check_ranges_partition(ranges):
    """Raise ``ValueError`` unless ``ranges`` tile ``(0, inf)`` in order."""
    if not ranges:
        raise ValueError("regression ranges must be non-empty")
    if ranges[0][0] != 0:
        raise ValueError(f"first regression range must start at 0, got {ranges[0]}")
    if ranges[-1][1] != INF:
        raise ValueError(f"last regression range must end at inf, got {ranges[-1]}")
    for (lo, hi), (lo2, _) in zip(ranges, ranges[1:]):
        if hi != lo2:
            raise ValueError(f"regression ranges leave a gap or overlap at {hi} vs {lo2}")
    for lo, hi in ranges:
        if not lo < hi:
            raise ValueError(f"empty regression range ({lo}, {hi}]")


@dataclass
class LevelAssignment:
    positive: np.ndarray     # [T_l] bool
    cls_target: np.ndarray   # [T_l, C] one-hot float32
    offsets: np.ndarray      # [T_l, 2] (start, end) distances in stride units
    matched: np.ndarray      # [T_l] annotation index, -1 for negatives


@dataclass
class AssignmentResult:
    levels: List[LevelAssignment]

    @property
    def num_positive(self):
        return int(sum(l.positive.sum() for l in self.levels))


def assign_labels(annotations, level_lengths, strides, ranges, num_classes,
                  seconds_per_segment=1.0, valid_length=None):
    """Assign ground-truth events to pyramid positions.

    Position ``t`` of level ``l`` sits at grid time ``t * strides[l]``
    segments. It is positive for event ``[s, e)`` when ``s <= time < e`` and
    ``max(time - s, e - time)`` falls in ``ranges[l]``; overlapping candidates
    go to the shortest event. Events that receive no position anywhere are
    assigned on level 0 ignoring the range, with a warning.
    """
    n_ev = len(annotations)
    starts = np.array([a.start / seconds_per_segment for a in annotations], dtype=np.float64)
    ends = np.array([a.end / seconds_per_segment for a in annotations], dtype=np.float64)
    classes = np.array([a.class_id for a in annotations], dtype=np.int64)
    lengths = ends - starts

    levels = []
    for T_l, stride, (lo, hi) in zip(level_lengths, strides, ranges):
        times = np.arange(T_l, dtype=np.float64) * stride
        if valid_length is not None:
            times = np.where(times < valid_length, times, np.nan)
        if n_ev:
            inside = (starts[None] <= times[:, None]) & (times[:, None] < ends[None])
            peak = np.maximum(times[:, None] - starts[None], ends[None] - times[:, None])
            cand = inside & (peak > lo) & (peak <= hi)
        else:
            cand = np.zeros((T_l, 0), dtype=bool)
        levels.append(_select(cand, times, starts, ends, classes, lengths, stride, num_classes))

    if n_ev:
        hit = np.zeros(n_ev, dtype=bool)
        for lvl in levels:
            hit[lvl.matched[lvl.matched >= 0]] = True
        orphans = np.flatnonzero(~hit)
        if orphans.size:
            warnings.warn(f"{orphans.size} event(s) got no position on any level (too short, or "
                          "shadowed by shorter overlapping events); assigning them to level 0",
                          RuntimeWarning)
            _assign_orphans(levels[0], orphans, level_lengths[0], strides[0], valid_length,
                            starts, ends, classes, lengths)
    return AssignmentResult(levels=levels)


def _select(cand, times, starts, ends, classes, lengths, stride, num_classes):
    T_l = cand.shape[0]
    positive = cand.any(axis=1)
    matched = np.full(T_l, -1, dtype=np.int64)
    if positive.any():
        dur = np.where(cand, lengths[None], np.inf)
        matched[positive] = dur[positive].argmin(axis=1)
    return _fill(positive, matched, times, starts, ends, classes, stride, num_classes)


def _fill(positive, matched, times, starts, ends, classes, stride, num_classes):
    T_l = positive.shape[0]
    cls_target = np.zeros((T_l, num_classes), dtype=np.float32)
    offsets = np.zeros((T_l, 2), dtype=np.float64)
    idx = np.flatnonzero(positive)
    if idx.size:
        ev = matched[idx]
        cls_target[idx, classes[ev]] = 1.0
        offsets[idx, 0] = (times[idx] - starts[ev]) / stride
        offsets[idx, 1] = (ends[ev] - times[idx]) / stride
    return LevelAssignment(positive=positive, cls_target=cls_target, offsets=offsets,
                           matched=matched)


def _assign_orphans(level, orphans, T_l, stride, valid_length, starts, ends, classes, lengths):
    times = np.arange(T_l, dtype=np.float64) * stride
    if valid_length is not None:
        times = np.where(times < valid_length, times, np.nan)
    positive, matched = level.positive.copy(), level.matched.copy()
    for ev in orphans:
        inside = (starts[ev] <= times) & (times < ends[ev])
        for t in np.flatnonzero(inside):
            if not positive[t] or lengths[ev] < lengths[matched[t]]:
                positive[t], matched[t] = True, ev
    filled = _fill(positive, matched, times, starts, ends, classes, stride,
                   level.cls_target.shape[1])
    level.positive, level.matched = filled.positive, filled.matched
    level.cls_target, level.offsets = filled.cls_target, filled.offsets


def focal_loss(logits, targets, mask=None, gamma=2.0, alpha=0.25, num_pos=None):
    """Binary focal loss summed over valid entries, divided by ``max(num_pos, 1)``.

    ``logits`` and ``targets`` are ``[..., C]``; ``mask`` selects valid
    positions over the leading dims.
    """
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    if mask is not None:
        loss = loss * mask[..., None].to(loss.dtype)
    if num_pos is None:
        num_pos = float(targets.sum()) if mask is None else float((targets.sum(-1) > 0)[mask].sum())
    return loss.sum() / max(num_pos, 1.0)


def giou_1d(pred, target, eps=1e-8):
    """Generalised IoU of ``[..., 2]`` (start, end) intervals."""
    inter = (torch.minimum(pred[..., 1], target[..., 1])
             - torch.maximum(pred[..., 0], target[..., 0])).clamp_min(0)
    union = (pred[..., 1] - pred[..., 0]) + (target[..., 1] - target[..., 0]) - inter
    hull = torch.maximum(pred[..., 1], target[..., 1]) - torch.minimum(pred[..., 0], target[..., 0])
    iou = inter / union.clamp_min(eps)
    return iou - (hull - union) / hull.clamp_min(eps)


def giou_loss_1d(pred_offsets, target_offsets, mask=None):
    """Mean ``1 - GIoU`` over positives; offsets are ``[..., 2]`` distances from one anchor."""
    if mask is not None:
        pred_offsets, target_offsets = pred_offsets[mask], target_offsets[mask]
    if pred_offsets.numel() == 0:
        return pred_offsets.sum() * 0.0
    pred = torch.stack([-pred_offsets[..., 0], pred_offsets[..., 1]], dim=-1)
    target = torch.stack([-target_offsets[..., 0], target_offsets[..., 1]], dim=-1)
    return (1 - giou_1d(pred, target)).mean()


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    reg: torch.Tensor
    lcf: torch.Tensor
    total: torch.Tensor
    alpha: float

    def as_floats(self):
        return {"cls": float(self.cls.detach()), "reg": float(self.reg.detach()),
                "lcf": float(self.lcf.detach()), "total": float(self.total.detach()),
                "alpha": self.alpha}


def total_loss(cls, reg, lcf, alpha=0.1):
    if not torch.is_tensor(lcf):
        lcf = torch.as_tensor(lcf, dtype=cls.dtype)
    for name, value in (("cls", cls), ("reg", reg), ("lcf", lcf)):
        if not torch.isfinite(value).all():
            raise FloatingPointError(
                f"non-finite {name} loss: cls={float(cls)} reg={float(reg)} lcf={float(lcf)}")
    return LossBreakdown(cls=cls, reg=reg, lcf=lcf, total=cls + reg + alpha * lcf, alpha=alpha)


def stack_assignments(assignments, device=None, dtype=torch.float32):
    """Batch per-video assignments into tensors concatenated over levels.

    Returns ``(positive [B, N], cls_target [B, N, C], offsets [B, N, 2],
    target_class [B, N])`` with ``N = sum(T_l)``.
    """
    pos = torch.as_tensor(np.stack([np.concatenate([l.positive for l in a.levels])
                                    for a in assignments]), device=device)
    cls_t = torch.as_tensor(np.stack([np.concatenate([l.cls_target for l in a.levels])
                                      for a in assignments]), device=device, dtype=dtype)
    off = torch.as_tensor(np.stack([np.concatenate([l.offsets for l in a.levels])
                                    for a in assignments]), device=device, dtype=dtype)
    tgt_cls = cls_t.argmax(dim=-1)
    return pos, cls_t, off, tgt_cls


def detection_losses(heads, assignments, gamma=2.0, alpha_focal=0.25):
    """Focal classification and class-aware GIoU regression losses for a batch."""
    logits = torch.cat(heads.cls_logits, dim=1)
    valid = torch.cat(heads.masks, dim=1)
    # [B, 2, C, T] -> [B, T, C, 2]
    reg = torch.cat([r.permute(0, 3, 2, 1) for r in heads.reg], dim=1)
    pos, cls_t, off, tgt_cls = stack_assignments(assignments, logits.device, logits.dtype)
    pos = pos & valid
    num_pos = float(pos.sum())
    cls_loss = focal_loss(logits, cls_t, valid, gamma, alpha_focal, num_pos=num_pos)
    pred = reg.gather(2, tgt_cls[..., None, None].expand(-1, -1, 1, 2)).squeeze(2)
    reg_loss = giou_loss_1d(pred, off, pos)
    return cls_loss, reg_loss

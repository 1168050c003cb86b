"""Training loop, checkpointing, inference and evaluation of a detector."""
import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch

from .config import ModelConfig
from .datagen import EventAnnotation, VideoSample
from .evaluation import EvalReport, evaluate
from .model import EventDetector, level_lengths
from .postprocess import decode, detections_record, soft_nms, write_detections

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the model has been rolled back to the last good state."""


@dataclass
class Batch:
    visual: torch.Tensor          # [B, T, D_in]
    audio: torch.Tensor
    mask: torch.Tensor            # [B, T] bool
    annotations: List[List[EventAnnotation]]
    valid_lengths: List[int]
    ids: List[str]
    seconds_per_segment: float


def crop_annotations(annotations, start, length, sps):
    """Shift annotations into a crop ``[start, start + length)`` segments, clipping edges."""
    lo, hi = start * sps, (start + length) * sps
    out = []
    for a in annotations:
        s, e = max(a.start, lo), min(a.end, hi)
        if e - s > 1e-9:
            out.append(EventAnnotation(s - lo, e - lo, a.class_id))
    return out


def collate(samples: List[VideoSample], T, rng=None, multiple=1):
    """Crop or pad every sample to a common length and build the padding mask.

    Samples longer than ``T`` are cropped: at a random offset when ``rng`` is
    given, otherwise from the start. ``T=None`` keeps full sequences (padded
    to the longest). The final length is rounded up to ``multiple``.
    """
    if not samples:
        raise ValueError("cannot collate an empty batch")
    sps = samples[0].seconds_per_segment
    if any(abs(s.seconds_per_segment - sps) > 1e-12 for s in samples):
        raise ValueError("all samples in a batch must share seconds_per_segment")
    target = T if T is not None else max(s.num_segments for s in samples)
    target = -(-target // multiple) * multiple
    d_in = samples[0].visual_feats.shape[1]
    B = len(samples)
    visual = np.zeros((B, target, d_in), dtype=np.float32)
    audio = np.zeros((B, target, d_in), dtype=np.float32)
    mask = np.zeros((B, target), dtype=bool)
    anns, lengths = [], []
    for i, s in enumerate(samples):
        n = s.num_segments
        start = 0
        if n > target:
            if rng is not None:
                start = int(rng.integers(0, n - target + 1))
            n = target
        visual[i, :n] = s.visual_feats[start:start + n]
        audio[i, :n] = s.audio_feats[start:start + n]
        mask[i, :n] = True
        lengths.append(n)
        anns.append(s.annotations if start == 0 and n == s.num_segments
                    else crop_annotations(s.annotations, start, n, sps))
    return Batch(visual=torch.from_numpy(visual), audio=torch.from_numpy(audio),
                 mask=torch.from_numpy(mask), annotations=anns, valid_lengths=lengths,
                 ids=[s.id for s in samples], seconds_per_segment=sps)


def lr_factor(step, warmup_steps, total_steps):
    """Linear warmup to 1, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return 1.0
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_avg_map: float = -1.0
    history: List[dict] = field(default_factory=list)


class Trainer:
    def __init__(self, cfg: ModelConfig, train_set: List[VideoSample],
                 val_set: Optional[List[VideoSample]] = None, run_dir=None,
                 dtype=torch.float32):
        cfg.validate()
        if not train_set:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.train_set = train_set
        self.val_set = val_set
        self.run_dir = run_dir
        self.dtype = dtype
        torch.manual_seed(cfg.seed)
        self.model = EventDetector(cfg).to(dtype)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr,
                                           weight_decay=cfg.weight_decay)
        self.steps_per_epoch = -(-len(train_set) // cfg.batch_size)
        self.state = TrainState()
        self._good = None
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)

    # -- schedule -----------------------------------------------------------
    def _set_lr(self):
        f = lr_factor(self.state.step, self.cfg.warmup_epochs * self.steps_per_epoch,
                      self.cfg.epochs * self.steps_per_epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = self.cfg.lr * f

    def epoch_batches(self, epoch):
        g = torch.Generator().manual_seed(self.cfg.seed * 100003 + epoch)
        order = torch.randperm(len(self.train_set), generator=g).tolist()
        rng = np.random.default_rng([self.cfg.seed, 2, epoch])
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            yield collate([self.train_set[j] for j in order[i:i + bs]], self.cfg.T, rng,
                          multiple=2 ** self.cfg.L_c)

    # -- steps ----------------------------------------------------------------
    def compute_loss(self, batch: Batch):
        model = self.model
        out = model(batch.visual.to(self.dtype), batch.audio.to(self.dtype), batch.mask)
        assignments = model.assign(batch.annotations, batch.mask.shape[1],
                                   batch.valid_lengths, batch.seconds_per_segment)
        return model.loss(out, assignments)

    def train_step(self, batch: Batch):
        self.model.train()
        self._set_lr()
        losses = self.compute_loss(batch)
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.state.step += 1
        return losses.as_floats()

    def train_epoch(self):
        epoch = self.state.epoch
        sums, n = {}, 0
        for batch in self.epoch_batches(epoch):
            try:
                rec = self.train_step(batch)
            except FloatingPointError as exc:
                self._rollback()
                raise TrainingDiverged(f"epoch {epoch} step {self.state.step}: {exc}") from exc
            for k, v in rec.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        self.state.epoch += 1
        return {k: v / n for k, v in sums.items()}

    def fit(self, log_fn=None):
        log_fn = log_fn or log.info
        self._snapshot()
        while self.state.epoch < self.cfg.epochs:
            rec = {"epoch": self.state.epoch, **self.train_epoch()}
            last = self.state.epoch == self.cfg.epochs
            if self.val_set and (last or self.state.epoch % self.cfg.eval_every == 0):
                report = self.evaluate(self.val_set)
                rec["val_avg_map"] = report.avg_map
                if report.avg_map > self.state.best_avg_map:
                    self.state.best_avg_map = report.avg_map
                    if self.run_dir:
                        self.save(os.path.join(self.run_dir, "best.pt"))
            self.state.history.append(rec)
            log_fn(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in rec.items()))
            self._snapshot()
            if self.run_dir:
                self.save(os.path.join(self.run_dir, "last.pt"))
        return self.state

    # -- checkpoints ------------------------------------------------------------
    def checkpoint(self):
        return {"config": self.cfg.to_dict(), "model": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(), "state": asdict(self.state),
                "torch_rng": torch.get_rng_state()}

    def save(self, path):
        torch.save(self.checkpoint(), path)

    def load_checkpoint(self, ckpt):
        self.model.load_state_dict(ckpt["model"])
        self.optimizer.load_state_dict(ckpt["optimizer"])
        self.state = TrainState(**ckpt["state"])
        torch.set_rng_state(ckpt["torch_rng"])

    def load(self, path):
        self.load_checkpoint(torch.load(path, weights_only=False))

    def _snapshot(self):
        self._good = copy.deepcopy(self.checkpoint())

    def _rollback(self):
        if self._good is None:
            return
        self.load_checkpoint(copy.deepcopy(self._good))
        if self.run_dir:
            path = os.path.join(self.run_dir, "last_good.pt")
            torch.save(self._good, path)
            log.error("loss diverged; restored last good state (saved to %s)", path)

    def evaluate(self, samples):
        return evaluate_model(self.model, samples, self.cfg)


def load_model(path, dtype=torch.float32):
    from .config import from_dict
    ckpt = torch.load(path, weights_only=False)
    cfg = from_dict(ckpt["config"])
    model = EventDetector(cfg).to(dtype)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg


@torch.no_grad()
def predict(model: EventDetector, samples: List[VideoSample], cfg: ModelConfig = None,
            batch_size=8):
    """Eval-mode forward, decode and Soft-NMS on full sequences -> ``{id: [Detection]}``."""
    cfg = cfg or model.cfg
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    results = {}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch = collate(chunk, None, multiple=2 ** cfg.L_c)
        T = batch.mask.shape[1]
        if T < cfg.T:
            batch = collate(chunk, cfg.T, multiple=2 ** cfg.L_c)
        out = model(batch.visual.to(dtype), batch.audio.to(dtype), batch.mask)
        probs = [p.float().cpu().numpy() for p in out.heads.cls]
        regs = [r.float().cpu().numpy() for r in out.heads.reg]
        for b, s in enumerate(chunk):
            valid = level_lengths(batch.valid_lengths[b], cfg.L_c)
            dets = decode([p[b] for p in probs], [r[b] for r in regs], model.strides,
                          s.seconds_per_segment, cfg.score_thresh, cfg.pre_nms_topk,
                          duration=s.duration, valid_lengths=valid)
            results[s.id] = soft_nms(dets, cfg.sigma_nms, cfg.final_thresh, cfg.max_per_video)
    model.train(was_training)
    return results


def infer(model, samples, out_path, cfg=None, batch_size=8):
    dets = predict(model, samples, cfg, batch_size) if samples else {}
    records = [detections_record(s.id, dets[s.id]) for s in samples]
    write_detections(out_path, records)
    return records


def evaluate_model(model, samples, cfg=None, batch_size=8) -> EvalReport:
    cfg = cfg or model.cfg
    dets = predict(model, samples, cfg, batch_size)
    return evaluate(dets, {s.id: s.annotations for s in samples}, cfg.C)


@torch.no_grad()
def unimodal_features(model: EventDetector, sample: VideoSample):
    """Encoder outputs ``(F_v, F_a)`` as ``[T, D]`` numpy arrays for one video."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    v = torch.as_tensor(sample.visual_feats, dtype=dtype)[None]
    a = torch.as_tensor(sample.audio_feats, dtype=dtype)[None]
    F_v, F_a = model.encoders(v, a)
    model.train(was_training)
    return F_v[0].float().numpy(), F_a[0].float().numpy()

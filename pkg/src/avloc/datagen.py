"""Synthetic audio-visual feature sequences with planted events.

Each class owns one prototype vector per modality. An annotated event paints
its class prototype into both modalities over a run of segments; a distractor
paints a prototype into a single modality and is never annotated. Every
segment also receives i.i.d. Gaussian noise.

On-disk layout written by :func:`save_dataset`::

    <root>/meta.json                      synth config + video index
    <root>/videos/<id>.npz                float32 arrays ``audio``, ``visual`` [T, D_in]
    <root>/videos/<id>.annotations.json   [{"start_sec", "end_sec", "class_id"}, ...]
"""
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

MAX_PROTOTYPE_RESAMPLES = 100
MAX_COSINE = 0.5


@dataclass(frozen=True)
class EventAnnotation:
    start: float
    end: float
    class_id: int

    def __post_init__(self):
        if self.start < 0:
            raise ValueError(f"event start must be >= 0, got {self.start}")
        if not self.start < self.end:
            raise ValueError(f"event start must be < end, got [{self.start}, {self.end}]")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")

    def to_json(self):
        return {"start_sec": float(self.start), "end_sec": float(self.end),
                "class_id": int(self.class_id)}


@dataclass
class VideoSample:
    id: str
    audio_feats: np.ndarray
    visual_feats: np.ndarray
    annotations: List[EventAnnotation]
    seconds_per_segment: float = 1.0
    # generator trace of unannotated single-modality events
    distractors: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.audio_feats.ndim != 2 or self.visual_feats.ndim != 2:
            raise ValueError("features must be [T, D_in] matrices")
        if self.audio_feats.shape[0] != self.visual_feats.shape[0]:
            raise ValueError(
                f"audio/visual length mismatch: {self.audio_feats.shape[0]} vs "
                f"{self.visual_feats.shape[0]}")
        if self.seconds_per_segment <= 0:
            raise ValueError("seconds_per_segment must be > 0")
        if not (np.isfinite(self.audio_feats).all() and np.isfinite(self.visual_feats).all()):
            raise ValueError(f"video {self.id}: non-finite feature entries")
        for ann in self.annotations:
            if ann.end > self.duration + 1e-9:
                raise ValueError(
                    f"video {self.id}: event end {ann.end} exceeds duration {self.duration}")

    @property
    def num_segments(self):
        return self.audio_feats.shape[0]

    @property
    def duration(self):
        return self.num_segments * self.seconds_per_segment


@dataclass
class SynthConfig:
    num_classes: int = 5
    T: int = 64
    D_in: int = 64
    # per-video event count is uniform on [1, events_per_video]
    events_per_video: int = 3
    duration_range: Tuple[int, int] = (2, 32)
    noise_std: float = 0.5
    distractor_rate: float = 0.0
    seed: int = 0
    seconds_per_segment: float = 1.0

    def __post_init__(self):
        self.duration_range = tuple(int(x) for x in self.duration_range)
        self.validate()

    def validate(self):
        lo, hi = self.duration_range
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.D_in < 2:
            raise ValueError("D_in must be >= 2")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.events_per_video < 1:
            raise ValueError("events_per_video must be >= 1")
        if lo < 1:
            raise ValueError("duration_range.min must be >= 1")
        if hi > self.T:
            raise ValueError(f"duration_range.max ({hi}) must be <= T ({self.T})")
        if lo > hi:
            raise ValueError("duration_range.min must be <= duration_range.max")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValueError("distractor_rate must lie in [0, 1]")

    def expected_event_length(self):
        """Expected total annotated length per video, in segments."""
        lo, hi = self.duration_range
        mean_dur = lo if lo == hi else (hi - lo) / math.log(hi / lo)
        mean_count = (1 + self.events_per_video) / 2
        return mean_count * mean_dur


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _max_offdiag_cosine(protos):
    if protos.shape[0] < 2:
        return -1.0
    u = _unit_rows(protos)
    gram = u @ u.T
    np.fill_diagonal(gram, -np.inf)
    return float(gram.max())


def make_class_prototypes(config: SynthConfig):
    """Return ``(audio_protos, visual_protos)``, each float32 ``[C, D_in]``.

    Rows have norm ``sqrt(D_in)`` and pairwise cosine below 0.5 within each
    modality. Raises ``ValueError`` when 100 resamples cannot satisfy that.
    """
    C, D = config.num_classes, config.D_in
    out = []
    for modality in range(2):
        rng = np.random.default_rng([config.seed, 0, modality])
        for _ in range(MAX_PROTOTYPE_RESAMPLES):
            protos = _unit_rows(rng.standard_normal((C, D))) * math.sqrt(D)
            if _max_offdiag_cosine(protos) < MAX_COSINE:
                break
        else:
            raise ValueError(
                f"could not draw {C} prototypes in D_in={D} with pairwise cosine "
                f"< {MAX_COSINE} after {MAX_PROTOTYPE_RESAMPLES} resamples")
        out.append(protos.astype(np.float32))
    return out[0], out[1]


def _sample_duration(rng, lo, hi):
    if lo == hi:
        return lo
    d = int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
    return min(max(d, lo), hi)


def _place_events(rng, config):
    """Draw (start, duration, class) triples; same-class instances stay disjoint."""
    lo, hi = config.duration_range
    n_events = int(rng.integers(1, config.events_per_video + 1))
    events = []
    for _ in range(n_events):
        dur = _sample_duration(rng, lo, hi)
        cls = int(rng.integers(config.num_classes))
        for _attempt in range(50):
            start = int(rng.integers(0, config.T - dur + 1))
            clash = any(c == cls and start < s + d and s < start + dur
                        for s, d, c in events)
            if not clash:
                events.append((start, dur, cls))
                break
    return events


def _place_distractor(rng, config, covered):
    lo, hi = config.duration_range
    dur = _sample_duration(rng, lo, hi)
    free = ~covered
    # longest free run bounds the distractor length
    runs, run_start = [], None
    for t in range(config.T + 1):
        if t < config.T and free[t]:
            run_start = t if run_start is None else run_start
        elif run_start is not None:
            runs.append((run_start, t - run_start))
            run_start = None
    if runs:
        max_run = max(r[1] for r in runs)
        dur = min(dur, max_run)
        starts = [s + k for s, n in runs if n >= dur for k in range(n - dur + 1)]
        start = int(starts[rng.integers(len(starts))])
    else:
        # no free segment left; overwrite one modality of an annotated event
        start = int(rng.integers(0, config.T - dur + 1))
    return start, dur


def generate_video(config: SynthConfig, index: int, protos=None) -> VideoSample:
    """Generate video ``index``; seeded by ``(config.seed, index)`` so videos are independent."""
    if protos is None:
        protos = make_class_prototypes(config)
    audio_protos, visual_protos = protos
    rng = np.random.default_rng([config.seed, 1, index])
    T, D = config.T, config.D_in

    audio = np.zeros((T, D), dtype=np.float32)
    visual = np.zeros((T, D), dtype=np.float32)
    covered = np.zeros(T, dtype=bool)

    events = _place_events(rng, config)
    # paint longest first so shorter overlapping events stay intact
    for start, dur, cls in sorted(events, key=lambda e: -e[1]):
        audio[start:start + dur] = audio_protos[cls]
        visual[start:start + dur] = visual_protos[cls]
        covered[start:start + dur] = True

    distractors = []
    if rng.uniform() < config.distractor_rate:
        start, dur = _place_distractor(rng, config, covered)
        cls = int(rng.integers(config.num_classes))
        modality = "audio" if rng.uniform() < 0.5 else "visual"
        target, bank = (audio, audio_protos) if modality == "audio" else (visual, visual_protos)
        target[start:start + dur] = bank[cls]
        sps = config.seconds_per_segment
        distractors.append({"start_sec": start * sps, "end_sec": (start + dur) * sps,
                            "class_id": cls, "modality": modality})

    if config.noise_std > 0:
        audio += (config.noise_std * rng.standard_normal((T, D))).astype(np.float32)
        visual += (config.noise_std * rng.standard_normal((T, D))).astype(np.float32)

    sps = config.seconds_per_segment
    annotations = [EventAnnotation(s * sps, (s + d) * sps, c)
                   for s, d, c in sorted(events)]
    return VideoSample(id=f"video_{index:05d}", audio_feats=audio, visual_feats=visual,
                       annotations=annotations, seconds_per_segment=sps,
                       distractors=distractors)


def generate_dataset(config: SynthConfig, n_videos: int, offset: int = 0) -> List[VideoSample]:
    """Generate ``n_videos`` samples with indices ``offset .. offset + n_videos - 1``.

    Disjoint index ranges under one seed give disjoint train/test splits that
    share class prototypes.
    """
    if n_videos < 1:
        raise ValueError("n_videos must be >= 1")
    if config.expected_event_length() > config.T:
        raise ValueError(
            f"expected total event length {config.expected_event_length():.1f} "
            f"exceeds T={config.T}")
    protos = make_class_prototypes(config)
    return [generate_video(config, offset + i, protos) for i in range(n_videos)]


def save_dataset(root, samples, config: Optional[SynthConfig] = None):
    os.makedirs(os.path.join(root, "videos"), exist_ok=True)
    index = []
    for s in samples:
        feat_rel = os.path.join("videos", f"{s.id}.npz")
        ann_rel = os.path.join("videos", f"{s.id}.annotations.json")
        np.savez(os.path.join(root, feat_rel),
                 audio=s.audio_feats.astype(np.float32),
                 visual=s.visual_feats.astype(np.float32))
        with open(os.path.join(root, ann_rel), "w") as f:
            json.dump([a.to_json() for a in s.annotations], f, indent=1)
        index.append({"id": s.id, "features": feat_rel, "annotations": ann_rel,
                      "num_segments": s.num_segments,
                      "seconds_per_segment": s.seconds_per_segment,
                      "distractors": s.distractors})
    meta = {"synth_config": asdict(config) if config is not None else None,
            "videos": index}
    with open(os.path.join(root, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1)


def load_dataset(root):
    """Load a directory written by :func:`save_dataset`.

    Returns ``(samples, synth_config_or_None)``. Missing optional fields
    (``seconds_per_segment``, ``distractors``, ``synth_config``) fall back to
    defaults; anything else missing raises ``KeyError``.
    """
    with open(os.path.join(root, "meta.json")) as f:
        meta = json.load(f)
    cfg = meta.get("synth_config")
    config = SynthConfig(**cfg) if cfg else None
    samples = []
    for entry in meta["videos"]:
        arrays = np.load(os.path.join(root, entry["features"]))
        with open(os.path.join(root, entry["annotations"])) as f:
            anns = [EventAnnotation(a["start_sec"], a["end_sec"], a["class_id"])
                    for a in json.load(f)]
        samples.append(VideoSample(
            id=entry["id"],
            audio_feats=arrays["audio"].astype(np.float32),
            visual_feats=arrays["visual"].astype(np.float32),
            annotations=anns,
            seconds_per_segment=float(entry.get("seconds_per_segment", 1.0)),
            distractors=list(entry.get("distractors", []))))
    return samples, config

"""Model / training configuration with validation, profiles and file loading."""
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional

import yaml

from .correspondence import G_TYPES
from .losses import check_ranges_partition, default_regression_ranges
from .pyramid import ATTENTION_MODES


class ConfigError(ValueError):
    """Raised for any invalid configuration value or cross-field violation."""


@dataclass
class ModelConfig:
    # architecture
    D: int = 128
    d_in: int = 64
    L_u: int = 2
    L_c: int = 4
    W: int = 8
    H: int = 4
    C: int = 5
    T: int = 64
    ffn_expansion: int = 4
    dropout: float = 0.1
    use_pos_enc: bool = True
    attention_mode: str = "adaptive"
    shift_even_blocks: bool = True
    prior_prob: float = 0.01
    # correspondence loss
    alpha: float = 0.1
    g_type: str = "adjustable_gaussian"
    tau_init: float = 0.07
    sigma_init: float = 1.0
    smoothing: float = 0.2
    # detection losses
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    regression_ranges: Optional[List[List[float]]] = None
    # inference
    score_thresh: float = 0.001
    pre_nms_topk: int = 2000
    sigma_nms: float = 0.5
    final_thresh: float = 0.001
    max_per_video: int = 100
    # optimisation
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    epochs: int = 40
    batch_size: int = 8
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 5

    def __post_init__(self):
        if self.regression_ranges is None:
            self.regression_ranges = [list(r) for r in default_regression_ranges(self.L_c)]
        else:
            self.regression_ranges = [[_as_bound(lo), _as_bound(hi)]
                                      for lo, hi in self.regression_ranges]

    @property
    def ranges(self):
        return [tuple(r) for r in self.regression_ranges]

    @property
    def strides(self):
        return [2 ** (l + 1) for l in range(self.L_c)]

    def validate(self):
        for name in ("D", "d_in", "L_c", "W", "H", "C", "T", "ffn_expansion", "batch_size",
                     "max_per_video", "pre_nms_topk"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("L_u", "warmup_epochs", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.D % self.H:
            raise ConfigError(f"D={self.D} must equal H*D' (not divisible by H={self.H})")
        if self.D < 2:
            raise ConfigError("D must be >= 2 so the halved projection is non-empty")
        if self.T < 2 ** self.L_c:
            raise ConfigError(f"T={self.T} must be >= 2^L_c = {2 ** self.L_c}")
        if self.g_type not in G_TYPES:
            raise ConfigError(f"g_type must be one of {G_TYPES}, got {self.g_type!r}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}, "
                              f"got {self.attention_mode!r}")
        if len(self.regression_ranges) != self.L_c:
            raise ConfigError(f"need one regression range per level ({self.L_c}), "
                              f"got {len(self.regression_ranges)}")
        try:
            check_ranges_partition(self.ranges)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0 < self.prior_prob < 1:
            raise ConfigError(f"prior_prob must be in (0, 1), got {self.prior_prob}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("tau_init", "sigma_init", "sigma_nms", "lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.smoothing < 1:
            raise ConfigError(f"smoothing must be in [0, 1), got {self.smoothing}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be >= 0")
        return self

    def to_dict(self):
        d = asdict(self)
        d["regression_ranges"] = [[lo, "inf" if math.isinf(hi) else hi]
                                  for lo, hi in self.regression_ranges]
        return d


def _as_bound(x):
    if isinstance(x, str):
        if x.lower() in ("inf", "+inf", "infinity"):
            return math.inf
        return float(x)
    return float(x)


# Desk-scale profile is the default; the full-size one documents the original setup.
PROFILES = {
    "desk": {},
    "full": {"D": 512, "L_c": 6, "T": 256, "batch_size": 16, "d_in": 1024, "C": 100},
}


def profile(name="desk", **overrides):
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
    return from_dict({**PROFILES[name], **overrides})


def from_dict(d):
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "L_c" in d and "regression_ranges" not in d:
        d = {**d, "regression_ranges": None}
    try:
        cfg = ModelConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load_config(path):
    """Read a YAML or JSON file; a top-level ``profile`` key selects the base profile."""
    with open(path) as f:
        text = f.read()
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    data = dict(data or {})
    name = data.pop("profile", "desk")
    return profile(name, **data)


def _parse_value(raw, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, str):
        return raw
    return yaml.safe_load(raw)


def apply_overrides(cfg: ModelConfig, overrides):
    """Apply ``key=value`` strings on top of ``cfg`` and re-validate."""
    updates = {}
    names = {f.name: getattr(cfg, f.name) for f in fields(ModelConfig)}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates[key] = _parse_value(raw.strip(), names[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    if "L_c" in updates and "regression_ranges" not in updates:
        updates["regression_ranges"] = None
    try:
        out = replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return out.validate()


def save_config(path, cfg: ModelConfig):
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1)

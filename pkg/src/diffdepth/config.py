"""Training configuration (JSON document mirrored by ``TrainConfig``)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .losses import LossWeights

TRINITY_MODES = ("off", "distill", "contrast", "trinity")
LEVELS = ("NIS", "DF", "IMG")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-2
    grad_clip: float = 10.0
    seed: int = 0
    # ablation switches
    pde: bool = True
    odr: bool = True
    fic: bool = True
    trinity_mode: str = "trinity"
    levels: tuple[str, ...] | None = None  # None -> stage default
    # diffusion
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    infer_steps: int = 20
    # depth-branch losses use only samples with tau <= this step
    depth_tau_max: int = 500
    # stage-0 cache refresh step (deterministic one-step estimate)
    bootstrap_tau: int = 500
    # nets / numerics
    width: int = 16
    dtype: str = "float64"
    bootstrap_gate: float = 0.3
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if self.levels is None:
            self.levels = {0: (), 1: ("NIS",), 2: ("NIS", "DF", "IMG")}.get(self.stage, ())
        self.levels = tuple(self.levels)
        self.validate()

    def validate(self) -> None:
        if self.stage not in (0, 1, 2):
            raise ConfigError(f"stage must be 0, 1 or 2, got {self.stage}")
        if self.trinity_mode not in TRINITY_MODES:
            raise ConfigError(f"trinity_mode must be one of {TRINITY_MODES}, got {self.trinity_mode!r}")
        bad = set(self.levels) - set(LEVELS)
        if bad:
            raise ConfigError(f"unknown contrast levels {sorted(bad)}; expected a subset of {LEVELS}")
        if self.stage == 0 and ({"DF", "IMG"} & set(self.levels)):
            raise ConfigError("DF and IMG levels need a teacher; stage 0 has none")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not (1 <= self.depth_tau_max <= self.T_train) or not (1 <= self.bootstrap_tau <= self.T_train):
            raise ConfigError(f"depth_tau_max and bootstrap_tau must lie in 1..{self.T_train}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "levels" in d and d["levels"] is not None:
            d["levels"] = tuple(d["levels"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        if "stage" in changes and "levels" not in changes:
            d["levels"] = None
        return TrainConfig.from_dict(d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

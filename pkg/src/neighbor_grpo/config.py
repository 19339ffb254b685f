"""Experiment configuration: one flat JSON object.

Keys mirror :class:`TrainLoopConfig` field names, plus task, reward and
output settings. Serialization is canonical (sorted keys, two-space indent,
trailing newline), so a parse/serialize round trip is byte-identical and
the SHA-256 of that text is a stable config hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .neighbor import TrainLoopConfig

SCHEMA_VERSION = 1
VARIANTS = ("neighbor", "sde", "sde_windowed")
TASKS = ("circle8", "circle8_cond")
_TRAIN_KEYS = tuple(f.name for f in fields(TrainLoopConfig))


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class ExperimentConfig:
    train: TrainLoopConfig = field(default_factory=TrainLoopConfig)
    variant: str = "neighbor"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    # task: 8 Gaussians on a circle; the conditional flavour one-hot encodes a mode
    task: str = "circle8"
    n_data: int = 20000
    data_seed: int = 0
    model_seed: int = 1
    pretrain_steps: int = 6000
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 256
    checkpoint: str | None = None
    # reward: log-density of a Gaussian mixture over a subset of the circle modes
    reward_kind: str = "target_logdensity"
    reward_modes: list = field(default_factory=lambda: [0, 1, 2])
    reward_std: float = 0.5
    reward_weights: list | None = None
    plateau_radius: float = 1.0
    plateau_value: float = 1.0
    # evaluation and output
    eval_samples: int = 2000
    eval_seed: int = 12345
    out_dir: str = "runs/default"
    record_wall_time: bool = True

    def validate(self) -> "ExperimentConfig":
        try:
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.variant == "sde_windowed" and self.train.sde_window is None:
            raise ConfigError("sde_windowed needs sde_window")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of nonnegative ints")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("duplicate seeds")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.n_data < 1 or self.pretrain_steps < 1 or self.pretrain_batch < 1:
            raise ConfigError("n_data, pretrain_steps and pretrain_batch must be positive")
        if not self.pretrain_lr > 0:
            raise ConfigError("pretrain_lr must be positive")
        if self.reward_kind not in ("target_logdensity", "neg_mode_distance", "flatness_probe"):
            raise ConfigError(f"unknown reward_kind {self.reward_kind!r}")
        if not self.reward_modes or any(not 0 <= m < 8 for m in self.reward_modes):
            raise ConfigError("reward_modes must index the 8 circle modes")
        if self.reward_weights is not None and len(self.reward_weights) != len(self.reward_modes):
            raise ConfigError("need one reward weight per reward mode")
        if not self.reward_std > 0:
            raise ConfigError("reward_std must be positive")
        if self.eval_samples < 2:
            raise ConfigError("eval_samples must be >= 2")
        return self

    # -- serialization

    def to_flat(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "train"}
        d.update(dataclasses.asdict(self.train))
        d["schema_version"] = SCHEMA_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_flat(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        own = {f.name for f in fields(cls)} - {"train"}
        unknown = set(d) - own - set(_TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            train = TrainLoopConfig(**{k: d[k] for k in _TRAIN_KEYS if k in d})
            return cls(train=train, **{k: d[k] for k in own if k in d})
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_flat(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def config_hash(self) -> str:
        """First 16 hex digits of the SHA-256 of the canonical JSON.

        ``out_dir`` is left out and the checkpoint enters by file name only:
        where files live does not change the results.
        """
        d = self.to_flat()
        d.pop("out_dir")
        if d["checkpoint"]:
            d["checkpoint"] = os.path.basename(d["checkpoint"])
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with flat-key overrides (train keys allowed)."""
        d = self.to_flat()
        d.update(changes)
        return ExperimentConfig.from_flat(d)


SWEEP_PRESETS = {
    "sigma": ("sigma", (0.1, 0.3, 0.5, 1.0)),
    "B": ("B", (2, 4, 8, 12)),
    "p": ("p", (0.5, 0.8, 1.0, 2.0)),
}

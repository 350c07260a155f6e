"""Experiment configuration.

One nested dataclass tree covers data generation, both network shapes,
training, evaluation, and the ablation sweep. Configs round-trip through
plain dicts (and hence YAML files and checkpoint headers); unknown keys
fail loudly with the offending name.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

import yaml

from .hallucinator import FhnConfig
from .losses import MEDIAN_MULTIPLIERS, LossWeights
from .recognizer import HrnConfig


class ConfigError(ValueError):
    """Bad configuration value or unknown key."""


@dataclasses.dataclass
class DataConfig:
    """Synthetic dataset shape and prior-target rendering."""

    n_identities: int = 32
    per_identity: int = 8
    image_size: int = 64
    n_landmarks: int = 5
    n_classes: int = 4
    holdout_per_identity: int = 2
    # Gaussian width of heatmap targets, in high-resolution pixels. Rendering
    # on the quarter-resolution prior grid divides this by the stride.
    heatmap_sigma: float = 3.0
    seed: int = 0


@dataclasses.dataclass
class TrainConfig:
    """Optimization schedule shared by all five phases."""

    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    kernel_multipliers: tuple[float, ...] = MEDIAN_MULTIPLIERS
    unbiased_mmd: bool = False
    e2e_coupling: bool = False  # let the student objective also update the hallucinator
    flip_augment: bool = True
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    log_every: int = 25
    # per-iteration update counts, phase order: domain adversary, generator,
    # integrator, student, assistant
    domain_updates: int = 1
    generator_updates: int = 1
    integrator_updates: int = 1
    student_updates: int = 1
    assistant_updates: int = 1

    @classmethod
    def desk(cls) -> "TrainConfig":
        """Desk-scale schedule. RMSprop's normalized updates put the
        per-coordinate step near lr regardless of loss scale, so the
        smaller step bounds the oscillation amplitude at this geometry,
        and the heavier pixel weight balances the unweighted domain term."""
        return cls(lr=1e-4, weights=LossWeights(100.0, 10.0, 1.0))


@dataclasses.dataclass
class EvalConfig:
    verify_pairs: int = 200
    threshold_start: float = 0.0
    threshold_stop: float = 2.0
    threshold_steps: int = 201
    csd_points: int = 21
    seed: int = 0

    def thresholds(self) -> list[float]:
        if self.threshold_steps < 2:
            raise ConfigError(f"threshold_steps must be >= 2, got {self.threshold_steps}")
        step = (self.threshold_stop - self.threshold_start) / (self.threshold_steps - 1)
        return [self.threshold_start + i * step for i in range(self.threshold_steps)]


@dataclasses.dataclass
class AblateConfig:
    """Component-grid settings. The KD fits use their own step size and
    batch: the grid compares converged students, so it wants the lower
    noise floor of a small lr and a batch bigger than the adversarial
    loop needs."""

    seeds: tuple[int, ...] = (0, 1, 2)
    kd_steps: int = 3000
    kd_lr: float = 3e-4
    kd_batch: int = 8
    verify_pairs: int = 300


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    fhn: FhnConfig = dataclasses.field(default_factory=FhnConfig.desk)
    hrn: HrnConfig = dataclasses.field(default_factory=HrnConfig.desk)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig.desk)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    ablate: AblateConfig = dataclasses.field(default_factory=AblateConfig)

    def validate(self) -> "ExperimentConfig":
        """Cross-field consistency; raises :class:`ConfigError` naming the
        mismatched fields."""
        pairs = [
            ("data.image_size", self.data.image_size, "fhn.image_size", self.fhn.image_size),
            ("data.n_landmarks", self.data.n_landmarks,
             "fhn.heatmap_channels", self.fhn.heatmap_channels),
            ("data.n_classes", self.data.n_classes,
             "fhn.parsing_channels", self.fhn.parsing_channels),
            ("data.image_size", self.data.image_size, "hrn.image_size", self.hrn.image_size),
        ]
        for name_a, a, name_b, b in pairs:
            if a != b:
                raise ConfigError(f"{name_a} = {a} does not match {name_b} = {b}")
        if self.data.n_landmarks < 5:
            raise ConfigError(f"data.n_landmarks must be >= 5, got {self.data.n_landmarks}")
        if self.data.n_classes < 4:
            raise ConfigError(f"data.n_classes must be >= 4, got {self.data.n_classes}")
        return self


_LEAF_TUPLES = {"kernel_multipliers", "seeds", "teacher_widths", "student_widths"}


def config_to_dict(cfg: Any) -> Any:
    if dataclasses.is_dataclass(cfg) and not isinstance(cfg, type):
        return {f.name: config_to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, tuple):
        return list(cfg)
    return cfg


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        here = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key '{here}'")
        ftype = fields[key].type
        sub = {
            "data": DataConfig, "fhn": FhnConfig, "hrn": HrnConfig,
            "train": TrainConfig, "eval": EvalConfig, "ablate": AblateConfig,
            "weights": LossWeights,
        }.get(key)
        if sub is not None:
            kwargs[key] = _build(sub, value, here)
        elif key in _LEAF_TUPLES:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "")


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a YAML experiment config; missing keys take their defaults."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))

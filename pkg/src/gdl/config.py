"""Run configuration: strict JSON schema with unknown-key rejection.

Every section is a dataclass. :func:`load_config` walks the JSON document
against the dataclass fields, rejecting unknown keys and wrong types with the
dotted path of the offending entry, then validates each section before
anything runs.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

from .samplers import GRAD_SCALINGS, GUIDANCE_MODES, LOSS_KINDS, SAMPLER_KINDS
from .schedule import VARIANCE_KINDS, expert_range
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = "posterior"

    def validate(self):
        if self.T < 1:
            raise ConfigError("schedule.T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("schedule needs 0 < beta_start <= beta_end < 1")
        if self.variance not in VARIANCE_KINDS:
            raise ConfigError(f"schedule.variance must be one of {VARIANCE_KINDS}")


@dataclass
class TaskConfig:
    K: int = 8
    R: float = 4.0
    std: float = 0.3
    train_size: int = 20000
    sharpness: float = 2.0

    def validate(self):
        if self.K < 2 or self.R <= 0 or self.std < 0 or self.train_size < 1 or self.sharpness <= 0:
            raise ConfigError("task needs K >= 2, R > 0, std >= 0, train_size >= 1, sharpness > 0")


def _diffusion_train() -> TrainConfig:
    return TrainConfig(iterations=20000, batch_size=256, learning_rate=2e-3, weight_decay=0.0,
                       lr_schedule="cosine")


def _teacher_train() -> TrainConfig:
    return TrainConfig(iterations=6000, batch_size=128, learning_rate=2e-3, weight_decay=0.0,
                       lr_schedule="cosine")


def _expert_train() -> TrainConfig:
    return TrainConfig(iterations=5000, batch_size=128, learning_rate=1e-3, weight_decay=0.05)


@dataclass
class DiffusionConfig:
    hidden_dims: list = field(default_factory=lambda: [128, 128, 128])
    time_embed_dim: int = 32
    train: TrainConfig = field(default_factory=_diffusion_train)

    def validate(self):
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigError("diffusion.hidden_dims must be a non-empty list of positive ints")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("diffusion.time_embed_dim must be a positive even integer")


@dataclass
class GuidanceNetConfig:
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    nonlinearity: str = "relu"
    loss_kind: str = "class_nll"
    time_embed_dim: int = 16
    train: TrainConfig = field(default_factory=_teacher_train)

    def validate(self):
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigError("guidance_net.hidden_dims must be a non-empty list of positive ints")
        if self.nonlinearity not in ("relu", "tanh"):
            raise ConfigError("guidance_net.nonlinearity must be 'relu' or 'tanh'")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"guidance_net.loss_kind must be one of {LOSS_KINDS}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("guidance_net.time_embed_dim must be a positive even integer")


@dataclass
class ExpertsConfig:
    """``rank`` null means full fine-tuning (a dense weight delta per layer).

    Large backbones conventionally use rank 16; the toy layers use 4.
    """

    count: int = 5
    rank: Optional[int] = 4
    alpha: float = 8.0
    kt_dataset_size: int = 50000
    train: TrainConfig = field(default_factory=_expert_train)

    def validate(self):
        if self.count < 1:
            raise ConfigError("experts.count must be >= 1")
        if self.rank is not None and self.rank < 0:
            raise ConfigError("experts.rank must be >= 0 or null")
        if self.alpha <= 0 or self.kt_dataset_size < 0:
            raise ConfigError("experts.alpha must be positive and kt_dataset_size non-negative")


@dataclass
class SamplerSection:
    kind: str = "ddim"
    steps: int = 25
    eta: float = 0.0
    seed: int = 0

    def validate(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"sampler.kind must be one of {SAMPLER_KINDS}")
        if self.steps < 1 or self.eta < 0:
            raise ConfigError("sampler.steps must be >= 1 and eta >= 0")


@dataclass
class GuidanceSection:
    """``target`` is a component index; regression and dense targets are derived from it
    unless ``target_vector`` gives an explicit descriptor."""

    mode: str = "multi_expert"
    target: int = 0
    target_vector: Optional[list] = None
    scale: float = 7.5
    grad_scaling: str = "fixed"
    rho: float = 0.3

    def validate(self):
        if self.mode not in GUIDANCE_MODES:
            raise ConfigError(f"guidance.mode must be one of {GUIDANCE_MODES}")
        if self.scale < 0:
            raise ConfigError("guidance.scale must be >= 0")
        if self.grad_scaling not in GRAD_SCALINGS:
            raise ConfigError(f"guidance.grad_scaling must be one of {GRAD_SCALINGS}")
        if not 0 < self.rho <= 1:
            raise ConfigError("guidance.rho must lie in (0, 1]")
        if self.target < 0:
            raise ConfigError("guidance.target must be a non-negative component index")


@dataclass
class MetricsConfig:
    samples_per_target: int = 300
    confidence: str = "true_class"
    t_grid_stride: int = 20
    holdout_size: int = 4000

    def validate(self):
        if self.samples_per_target < 2 or self.t_grid_stride < 1 or self.holdout_size < 1:
            raise ConfigError("metrics sizes must be positive")
        if self.confidence not in ("true_class", "max"):
            raise ConfigError("metrics.confidence must be 'true_class' or 'max'")


@dataclass
class RunConfig:
    format_version: int = CONFIG_VERSION
    seed: int = 0
    out_dir: Optional[str] = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    guidance_net: GuidanceNetConfig = field(default_factory=GuidanceNetConfig)
    experts: ExpertsConfig = field(default_factory=ExpertsConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self) -> "RunConfig":
        if self.format_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config format_version {self.format_version}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if hasattr(section, "validate"):
                section.validate()
        if not 1 <= self.sampler.steps <= self.schedule.T:
            raise ConfigError(f"sampler.steps must lie in [1, {self.schedule.T}]")
        if self.guidance.target >= self.task.K:
            raise ConfigError(f"guidance.target must be < task.K = {self.task.K}")
        try:
            expert_range(self.experts.count, self.schedule.T, 1)
        except ValueError as exc:
            raise ConfigError(f"experts.count: {exc}") from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def output_dir(self, override: Optional[str] = None) -> str:
        """CLI flag, then config, then ``$GDL_OUT``, then the working directory."""
        return override or self.out_dir or os.environ.get("GDL_OUT") or "."


def _check_type(value, hint, path):
    origin = typing.get_origin(hint)
    if origin is Union:
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    elif hint is list or origin is list:
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {getattr(hint, '__name__', hint)}, got {type(value).__name__}")
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {k: _check_type(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(data)

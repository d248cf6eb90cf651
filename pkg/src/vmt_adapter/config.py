"""Model and experiment configuration with validation.

Experiment files are YAML (JSON also loads, being a YAML subset). Unknown
keys are rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

VARIANTS = ("multiple", "shared", "vmt", "lite", "none")
NUM_STAGES = 4


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    in_channels: int = 3
    stage_dims: tuple[int, ...] = (32, 64, 128, 256)
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    mlp_ratio: int = 2
    num_tasks: int = 4
    rho: int = 4
    m: int = 2
    gating: float = 0.5
    variant: str = "vmt"
    decoder_dim: int = 32
    backbone_seed: int = 0

    def __post_init__(self):
        for name in ("stage_dims", "stage_depths", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    @classmethod
    def swin_tiny_like(cls, **overrides) -> ModelConfig:
        base = dict(image_size=224, stage_dims=(96, 192, 384, 768), stage_depths=(2, 2, 6, 2), heads=(3, 6, 12, 24), mlp_ratio=4, rho=4, m=3)
        base.update(overrides)
        return cls(**base)

    @property
    def num_layers(self) -> int:
        return sum(self.stage_depths)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def stage_side(self, stage: int) -> int:
        """Token-grid side of a 0-based stage."""
        return self.grid_size // 2**stage

    def bottleneck(self, d: int) -> int:
        return d // self.rho

    def layer_dims(self) -> list[int]:
        """Width d of every transformer layer, in order."""
        return [d for d, depth in zip(self.stage_dims, self.stage_depths) for _ in range(depth)]

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def validate(self, check_spatial: bool = True) -> ModelConfig:
        errors = []
        if self.variant not in VARIANTS:
            errors.append(f"model.variant: unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        for name in ("stage_dims", "stage_depths", "heads"):
            if len(getattr(self, name)) != NUM_STAGES:
                errors.append(f"model.{name}: expected {NUM_STAGES} entries, got {len(getattr(self, name))}")
        if any(d < 1 for d in self.stage_dims):
            errors.append("model.stage_dims: widths must be positive")
        if any(n < 0 for n in self.stage_depths) or self.num_layers < 1:
            errors.append("model.stage_depths: depths must be >= 0 with at least one layer in total")
        if self.num_tasks < 1:
            errors.append(f"tasks: need at least one task, got {self.num_tasks}")
        if not 0.0 <= self.gating <= 1.0:
            errors.append(f"model.gating: must lie in [0, 1], got {self.gating}")
        if self.rho < 1:
            errors.append(f"model.rho: must be >= 1, got {self.rho}")
        else:
            for d in self.stage_dims:
                if d % self.rho:
                    errors.append(f"model.rho: {self.rho} does not divide stage width {d}")
        if self.variant == "lite" and self.rho >= 1:
            if self.m < 1:
                errors.append(f"model.m: must be >= 1, got {self.m}")
            else:
                for d in self.stage_dims:
                    if d % self.m:
                        errors.append(f"model.m: {self.m} does not divide stage width d={d}")
                    elif d % self.rho == 0 and self.bottleneck(d) % self.m:
                        errors.append(f"model.m: {self.m} does not divide bottleneck width k={self.bottleneck(d)} (d={d}, rho={self.rho})")
        if check_spatial:
            if self.patch_size < 1 or self.image_size % self.patch_size:
                errors.append(f"model.patch_size: {self.patch_size} does not divide image_size {self.image_size}")
            elif self.grid_size % 2 ** (NUM_STAGES - 1):
                errors.append(f"model.image_size: token grid {self.grid_size} must be divisible by {2 ** (NUM_STAGES - 1)} for patch merging")
            for d, h in zip(self.stage_dims, self.heads):
                if h < 1 or d % h:
                    errors.append(f"model.heads: {h} heads do not divide width {d}")
            if self.decoder_dim < 1:
                errors.append("model.decoder_dim: must be positive")
        if errors:
            raise ConfigError("; ".join(errors))
        return self


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 8
    iterations: int = 200
    lr: float = 5e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 7
    train_pool: int = 256
    eval_size: int = 64
    log_every: int = 20
    precision: str = "f32"

    def validate(self) -> TrainingConfig:
        errors = []
        for name in ("batch_size", "train_pool", "eval_size", "log_every"):
            if getattr(self, name) < 1:
                errors.append(f"training.{name}: must be >= 1")
        if self.iterations < 0:
            errors.append("training.iterations: must be >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            errors.append("training.lr/weight_decay: must be >= 0")
        if self.precision not in ("f32", "f64"):
            errors.append(f"training.precision: expected f32 or f64, got {self.precision!r}")
        if errors:
            raise ConfigError("; ".join(errors))
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    tasks: tuple[str, ...] = ("seg", "parts", "sal", "normals")
    task_weights: tuple[float, ...] | None = None
    output_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.task_weights is not None:
            object.__setattr__(self, "task_weights", tuple(float(w) for w in self.task_weights))
        if self.model.num_tasks != len(self.tasks):
            object.__setattr__(self, "model", self.model.replace(num_tasks=len(self.tasks)))

    @property
    def weights(self) -> tuple[float, ...]:
        return self.task_weights if self.task_weights is not None else (1.0,) * len(self.tasks)

    def validate(self) -> ExperimentConfig:
        from .data import TASKS

        unknown = [t for t in self.tasks if t not in TASKS]
        if unknown:
            raise ConfigError(f"tasks.enabled: unknown task(s) {unknown}; expected names from {sorted(TASKS)}")
        if self.task_weights is not None:
            if len(self.task_weights) != len(self.tasks):
                raise ConfigError(f"tasks.weights: {len(self.task_weights)} weights for {len(self.tasks)} tasks")
            if any(w < 0 for w in self.task_weights):
                raise ConfigError("tasks.weights: weights must be >= 0")
        self.model.validate()
        self.training.validate()
        return self

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        model = dataclasses.asdict(self.model)
        model.pop("num_tasks")
        for key in ("stage_dims", "stage_depths", "heads"):
            model[key] = list(model[key])
        return {
            "model": model,
            "training": dataclasses.asdict(self.training),
            "tasks": {"enabled": list(self.tasks), "weights": list(self.weights)},
            "output": {"dir": self.output_dir},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        _reject_unknown("", raw, {"model", "training", "tasks", "output"})
        model_raw = dict(raw.get("model") or {})
        training_raw = dict(raw.get("training") or {})
        tasks_raw = dict(raw.get("tasks") or {})
        output_raw = dict(raw.get("output") or {})
        model_fields = {f.name for f in dataclasses.fields(ModelConfig)} - {"num_tasks"}
        _reject_unknown("model", model_raw, model_fields)
        _reject_unknown("training", training_raw, {f.name for f in dataclasses.fields(TrainingConfig)})
        _reject_unknown("tasks", tasks_raw, {"enabled", "weights"})
        _reject_unknown("output", output_raw, {"dir"})
        tasks = tuple(tasks_raw.get("enabled", ExperimentConfig.tasks))
        try:
            model = ModelConfig(**_coerce(ModelConfig, model_raw), num_tasks=len(tasks))
            training = TrainingConfig(**_coerce(TrainingConfig, training_raw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(
            model=model,
            training=training,
            tasks=tasks,
            task_weights=tasks_raw.get("weights"),
            output_dir=str(output_raw.get("dir", ExperimentConfig.output_dir)),
        )


def _reject_unknown(section: str, raw: dict, allowed: set[str]) -> None:
    extra = sorted(set(raw) - allowed)
    if extra:
        where = f"{section}." if section else ""
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in extra)}")


def _coerce(cls, raw: dict) -> dict:
    """Cast YAML scalars to the dataclass field types (YAML reads 1e-3 as a string)."""
    out = {}
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        default = defaults[key]
        try:
            if isinstance(default, bool):
                out[key] = bool(value)
            elif isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError
                out[key] = int(value)
            elif isinstance(default, float):
                out[key] = float(value)
            elif isinstance(default, tuple):
                out[key] = tuple(int(v) for v in value)
            else:
                out[key] = str(value)
        except (TypeError, ValueError):
            section = "model" if cls is ModelConfig else "training"
            raise ConfigError(f"{section}.{key}: cannot interpret {value!r}") from None
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return ExperimentConfig.from_dict(raw or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)

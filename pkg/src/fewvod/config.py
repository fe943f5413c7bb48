"""Run configuration: nested sections, YAML round-trip, dotted-path overrides.

Every field has a default, unknown keys are rejected, and serialize -> parse
-> serialize is a fixed point (sections and keys are emitted sorted).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Optional, Sequence, get_args, get_origin

import yaml

from .data import GeneratorConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossConfig


@dataclass
class FusionSection:
    enabled: bool = True
    tau: float = 0.94
    num_heads: int = 4
    retained_cap: int = 32

    def validate(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"fusion.tau must be in (0,1), got {self.tau}")
        if self.num_heads < 1:
            raise ConfigError("fusion.num_heads must be >= 1")
        if self.retained_cap < 1:
            raise ConfigError("fusion.retained_cap must be >= 1")


@dataclass
class HeadsSection:
    kappa: float = 0.98
    box_hidden_dim: int = 512
    temperature_init: float = 10.0
    nms_iou: Optional[float] = None

    def validate(self) -> None:
        if not 0.0 < self.kappa < 1.0:
            raise ConfigError(f"heads.kappa must be in (0,1), got {self.kappa}")
        if self.box_hidden_dim < 1:
            raise ConfigError("heads.box_hidden_dim must be >= 1")
        if self.temperature_init <= 0:
            raise ConfigError("heads.temperature_init must be > 0")
        if self.nms_iou is not None and not 0.0 <= self.nms_iou < 1.0:
            raise ConfigError(f"heads.nms_iou must be in [0,1), got {self.nms_iou}")


@dataclass
class LossSection:
    lambda_cls: float = 2.0
    lambda_box: float = 5.0
    weight_l1: float = 5.0
    weight_giou: float = 2.0
    background_weight: float = 0.1
    objectness_enabled: bool = True
    objectness_weight: float = 1.0

    def validate(self) -> None:
        self.to_loss_config().validate()
        if self.objectness_weight < 0:
            raise ConfigError("loss.objectness_weight must be >= 0")

    def to_loss_config(self) -> LossConfig:
        return LossConfig(
            lambda_cls=self.lambda_cls, lambda_box=self.lambda_box,
            weight_l1=self.weight_l1, weight_giou=self.weight_giou,
            background_weight=self.background_weight,
        )


@dataclass
class OptimSection:
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05
    grad_clip: float = 1.0
    epochs: int = 10
    eval_split: str = "novel"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("optim.learning_rate must be > 0")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("optim.weight_decay and optim.grad_clip must be >= 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("optim.warmup_fraction must be in [0,1)")
        if self.epochs < 0:
            raise ConfigError("optim.epochs must be >= 0")
        if self.eval_split not in ("train", "novel"):
            raise ConfigError("optim.eval_split must be 'train' or 'novel'")


@dataclass
class RunConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionSection = field(default_factory=FusionSection)
    heads: HeadsSection = field(default_factory=HeadsSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.fusion.validate()
        self.heads.validate()
        self.loss.validate()
        self.optim.validate()
        self.data.validate()
        if self.encoder.embed_dim % self.fusion.num_heads != 0:
            raise ConfigError(
                f"encoder.embed_dim {self.encoder.embed_dim} not divisible by "
                f"fusion.num_heads {self.fusion.num_heads}")
        if self.data.canvas_size % self.encoder.patch_size != 0:
            raise ConfigError(
                f"data.canvas_size {self.data.canvas_size} not divisible by "
                f"encoder.patch_size {self.encoder.patch_size}")


def default_config() -> RunConfig:
    return RunConfig()


def _coerce(value: Any, annotation: Any, path: str) -> Any:
    if get_origin(annotation) is not None:  # Optional[float] and friends
        args = [a for a in get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        annotation = args[0]
    if annotation is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if annotation is bool and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if annotation in (int, float, str) and not isinstance(value, annotation):
        raise ConfigError(f"{path}: expected {annotation.__name__}, got {value!r}")
    return value


def _dataclass_from_dict(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(payload).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name in known:
        if name not in payload:
            continue
        sub_path = f"{path}.{name}" if path else name
        if is_dataclass(hints[name]):
            kwargs[name] = _dataclass_from_dict(hints[name], payload[name], sub_path)
        else:
            kwargs[name] = _coerce(payload[name], hints[name], sub_path)
    return cls(**kwargs)


_SECTION_TYPES = {
    "encoder": EncoderConfig, "fusion": FusionSection, "heads": HeadsSection,
    "loss": LossSection, "optim": OptimSection, "data": GeneratorConfig,
}


def parse_config(payload: dict) -> RunConfig:
    """Build a RunConfig from a nested dict; unknown keys raise ConfigError."""
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be a mapping, got {type(payload).__name__}")
    unknown = set(payload) - set(_SECTION_TYPES) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "seed" in payload:
        kwargs["seed"] = _coerce(payload["seed"], int, "seed")
    for name, cls in _SECTION_TYPES.items():
        if name in payload:
            kwargs[name] = _dataclass_from_dict(cls, payload[name], name)
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        f.write(dump_config(cfg))


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            payload = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid config syntax in {path}: {exc}") from exc
    return parse_config(payload or {})


def apply_overrides(cfg: RunConfig, assignments: Sequence[str]) -> RunConfig:
    """Apply `section.key=value` overrides (values parsed as YAML scalars)."""
    payload = config_to_dict(cfg)
    for assignment in assignments:
        key, sep, raw = assignment.partition("=")
        if not sep:
            raise ConfigError(f"override {assignment!r} must look like key=value")
        try:
            value = yaml.safe_load(raw) if raw != "" else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {assignment!r}: bad value: {exc}") from exc
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {assignment!r}: no section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override {assignment!r}: unknown key {key!r}")
        node[parts[-1]] = value
    return parse_config(payload)

"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment. Every key has a default;
unknown keys, malformed values and out-of-range numbers raise
:class:`~mcmkd.data.ConfigError`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import ConfigError, SlideConfig
from .encoders import EncoderSpec
from .mcm import ContextConfig, FinetuneConfig, Variant
from .mil import MilConfig


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    # synthetic slides
    n_slides: int = 200
    grid: int = 16
    patch: int = 16
    s: int = 4
    min_tissue: float = 0.6
    lesion_rate: float = 0.03
    noise: float = 0.05
    blend: float = 3.0
    # encoders
    d_f: int = 64
    d_t: int = 128
    student_channels: tuple[int, ...] = (8,)
    student_kernels: tuple[int, ...] = (3,)
    teacher_channels: tuple[int, ...] = (16, 32)
    teacher_kernels: tuple[int, ...] = (3, 2)
    student_noise: float = 0.15
    student_source_stain: bool = True
    # context model
    layers: int = 2
    heads: int = 2
    mlp_hidden: int = 128
    predictor_hidden: int = 128
    # fine-tuning
    variant: str = "mcm-kd"
    mask_ratio: float = 0.5
    finetune_lr: float = 1e-3
    finetune_lr_sweep: tuple[float, ...] = ()
    finetune_epochs: int = 1
    batch: int = 8
    tau: float = 0.999
    # MIL
    mil_lr: float = 2e-3
    mil_epochs: int = 100
    accum: int = 8
    mil_hidden: int = 64
    # replicates
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def validate(self) -> None:
        positive = ("n_slides", "grid", "patch", "s", "d_f", "d_t", "layers", "heads", "mlp_hidden",
                    "predictor_hidden", "finetune_epochs", "batch", "mil_epochs", "accum", "mil_hidden")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.s > self.grid:
            raise ConfigError(f"context side s={self.s} exceeds the slide grid {self.grid}")
        if not 0.0 <= self.min_tissue <= 1.0:
            raise ConfigError(f"min_tissue {self.min_tissue} outside [0, 1]")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} must lie strictly between 0 and 1")
        if self.d_f % self.heads:
            raise ConfigError(f"d_f={self.d_f} is not divisible by heads={self.heads}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau {self.tau} outside [0, 1]")
        for key in ("finetune_lr", "mil_lr", "noise", "student_noise", "blend", "lesion_rate"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        if any(lr < 0 for lr in self.finetune_lr_sweep):
            raise ConfigError("finetune_lr_sweep holds a negative learning rate")
        if len(self.student_channels) != len(self.student_kernels) or not self.student_channels:
            raise ConfigError("student_channels and student_kernels must be non-empty and equally long")
        if len(self.teacher_channels) != len(self.teacher_kernels) or not self.teacher_channels:
            raise ConfigError("teacher_channels and teacher_kernels must be non-empty and equally long")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from "
                              f"{', '.join(v.value for v in Variant)}") from None
        for spec in (self.student_spec(), self.teacher_spec()):
            if min(spec.stage_sizes()) < 1:
                raise ConfigError(f"encoder kernels {spec.kernels} do not fit {self.patch}px patches")

    # -- views onto module configs --

    def slide_config(self) -> SlideConfig:
        return SlideConfig(grid_h=self.grid, grid_w=self.grid, patch=self.patch, lesion_rate=self.lesion_rate,
                           noise=self.noise, blend=self.blend)

    def student_spec(self) -> EncoderSpec:
        return EncoderSpec(self.student_channels, self.student_kernels, self.d_f, self.patch)

    def teacher_spec(self) -> EncoderSpec:
        return EncoderSpec(self.teacher_channels, self.teacher_kernels, self.d_t, self.patch)

    def context_config(self) -> ContextConfig:
        return ContextConfig(self.layers, self.heads, self.mlp_hidden, self.predictor_hidden)

    def finetune_config(self, lr: float | None = None) -> FinetuneConfig:
        return FinetuneConfig(lr=self.finetune_lr if lr is None else lr, batch=self.batch,
                              ratio=self.mask_ratio, tau=self.tau)

    def mil_config(self) -> MilConfig:
        return MilConfig(epochs=self.mil_epochs, accum=self.accum, lr=self.mil_lr, hidden=self.mil_hidden)

    def with_overrides(self, **kw) -> ExperimentConfig:
        cfg = replace(self, **kw)
        cfg.validate()
        return cfg


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(key: str, text: str):
    kind = type(getattr(ExperimentConfig(), key))
    default = getattr(ExperimentConfig(), key)
    try:
        if kind is bool:
            return _bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            # tuples of floats only for the lr sweep; everything else is integer lists
            return _floats(text) if key == "finetune_lr_sweep" else _ints(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (default is {default!r})") from None


def parse(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, val)
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def _format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, tuple):
        return ",".join(repr(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def serialize(cfg: ExperimentConfig) -> str:
    return "".join(f"{name} = {_format_value(getattr(cfg, name))}\n" for name in _FIELDS)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text)

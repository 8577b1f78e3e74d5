"""Flat key-value run configuration with strict parsing: `key = value` lines,
`#` comments, unknown keys rejected so ablation runs stay honest."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .dcf import FusionMode
from .errors import InvalidConfigError
from .features import ModelConfig
from .selfsup import TrainSchedule, VARIANTS
from .tracker import TrackerConfig


@dataclass
class RunConfig:
    # model
    share_weights: bool = False
    first_input: str = "rgb"
    branches: int = 2
    fusion: str = "concat"
    loss_norm: str = "l1"
    sequence_length: int = 2
    feature_channels: int = 32
    window: bool = True
    # dcf
    lam: float = 1e-4
    sigma_divisor: float = 12.5
    # tracker
    alpha: float = 0.01
    scale_factor: float = 1.0275
    scale_penalty: float = 0.9925
    padding: float = 2.0
    subpixel: bool = True
    # training
    batch_size: int = 32
    epochs: int = 30
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 5e-5
    noisy_frac: float = 0.10
    bg_frac: float = 0.25
    seed: int = 0
    variant: str = "xic2"
    precision: str = "double"
    # data
    crop_ratio: float = 0.5
    stride: int = 1
    patch_size: int = 125
    # synthetic generator
    synth_train_sequences: int = 20
    synth_test_sequences: int = 5
    synth_train_frames: int = 26
    synth_test_frames: int = 60
    synth_canvas: int = 200
    synth_velocity: float = 2.0
    synth_noise: float = 0.04

    def validate(self) -> None:
        if self.fusion not in ("concat", "average"):
            raise InvalidConfigError(f"unknown fusion {self.fusion!r}")
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {self.variant!r}")
        if self.precision not in ("double", "single"):
            raise InvalidConfigError(f"unknown precision {self.precision!r}")
        if not 0 <= self.noisy_frac and not 0 <= self.bg_frac:
            raise InvalidConfigError("drop fractions must be non-negative")
        if self.noisy_frac + self.bg_frac >= 1:
            raise InvalidConfigError("drop fractions must sum below 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("epochs and batch_size must be >= 1")
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            share_weights=self.share_weights,
            first_input=self.first_input,
            branches=3 if self.variant == "three-branch" else self.branches,
            fusion=FusionMode(self.fusion),
            loss_norm=self.loss_norm,
            sequence_length=3 if self.variant in ("xic3", "cycle3") else self.sequence_length,
            patch_size=self.patch_size,
            feature_channels=self.feature_channels,
            window=self.window,
            lam=self.lam,
            sigma_divisor=self.sigma_divisor,
        )

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            epochs=self.epochs, batch_size=self.batch_size,
            lr_start=self.lr_start, lr_end=self.lr_end,
            momentum=self.momentum, weight_decay=self.weight_decay,
            noisy_frac=self.noisy_frac, bg_frac=self.bg_frac,
            seed=self.seed, variant=self.variant, precision=self.precision,
        )

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(
            alpha=self.alpha, scale_factor=self.scale_factor,
            scale_penalty=self.scale_penalty, padding=self.padding,
            subpixel=self.subpixel,
        )

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise InvalidConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError:
        raise InvalidConfigError(f"{name}: expected a {ftype}, got {raw!r}")
    return raw


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise InvalidConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    cfg.validate()
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    with open(path) as fh:
        return parse_config(fh.read())

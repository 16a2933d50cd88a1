"""Training configuration and its ``key = value`` text format.

Keys are dotted by section (``model.dim = 64``, ``optim.lr = 0.001``) except
the top-level ``seed``.  Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import ModelConfig
from .losses import LossConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    steps: int = 5000
    warmup: int = -1  # -1 means 5% of steps
    cosine: bool = True
    clip: float = 1.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1000

    @property
    def warmup_steps(self) -> int:
        return self.warmup if self.warmup >= 0 else max(1, round(0.05 * self.steps))

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigFileError("optim.steps must be >= 0")
        if self.warmup_steps > self.steps and self.steps > 0:
            raise ConfigFileError(f"warmup {self.warmup_steps} exceeds total steps {self.steps}")
        if self.clip <= 0:
            raise ConfigFileError("optim.clip must be positive")


@dataclass
class DataConfig:
    frames_min: int = 2
    frames_max: int = 4
    size: tuple[int, int] = (56, 56)
    crop: tuple[int, int] = (0, 0)  # second training size; (0, 0) disables it
    tracks: int = 16
    tau: float = 0.02
    jitter: float = 0.1
    shuffle_frames: bool = True

    def __post_init__(self):
        if not 1 <= self.frames_min <= self.frames_max <= 24:
            raise ConfigFileError(f"frame range [{self.frames_min}, {self.frames_max}] outside [1, 24]")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    SECTIONS = ("model", "optim", "data", "loss")

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_updates(self, **updates) -> "TrainConfig":
        """Apply dotted-key overrides, e.g. ``with_updates(**{"model.dim": 32})``."""
        return from_items(updates.items(), base=self)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return "x".join(str(x) for x in v)
    return str(v)


def _coerce(text, default, key: str):
    if not isinstance(text, str):
        return text
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def from_items(items, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    sections = {s: {} for s in TrainConfig.SECTIONS}
    seed = base.seed
    for key, value in items:
        if key == "seed":
            seed = _coerce(value, 0, key)
            continue
        sec, _, name = key.partition(".")
        if sec not in sections:
            raise ConfigFileError(f"unknown config key {key!r}")
        obj = getattr(base, sec)
        known = {f.name for f in fields(obj)}
        if name not in known:
            raise ConfigFileError(f"unknown config key {key!r}")
        sections[sec][name] = _coerce(value, getattr(obj, name), key)
    try:
        parts = {sec: replace(getattr(base, sec), **vals) for sec, vals in sections.items()}
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from None
    return TrainConfig(seed=seed, **parts)


def parse_config(text: str) -> TrainConfig:
    items = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {n}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        items.append((key.strip(), value))
    return from_items(items)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())

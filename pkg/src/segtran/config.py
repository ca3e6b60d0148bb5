"""Run configuration: one flat record, a `key = value` file format, and
validation.

Precedence is file < explicit overrides (the CLI passes its flags as
overrides).  `config_to_text` round-trips through `parse_config_text`,
which is how a training run directory records the exact model recipe
for later evaluation and probing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

TRANSFORMER_TAGS = ("squeeze_expand", "mha", "expand_only", "squeeze_single")
PE_TAGS = ("none", "fixed", "discrete", "learnable")
TASK_CLASSES = {"rings": 3, "blobs": 2, "corner_cue": 3}


@dataclass
class SegtranConfig:
    # task and geometry
    task: str = "rings"
    image_size: int = 64          # square inputs, divisible by 16
    classes: int = 0              # 0 = derive from task
    in_channels: int = 1
    # architecture
    channels: tuple[int, ...] = (16, 32, 64, 64)   # backbone stage widths
    transformer: str = "squeeze_expand"
    layers: int = 3
    modes: int = 4
    codebook: int = 64
    heads: int = 4
    pe: str = "learnable"
    ffn_mult: int = 2
    layernorm: bool = True
    cnn_only: bool = False
    # training
    batch: int = 8
    iters: int = 2000
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 200
    holdout: int = 64
    precision: str = "single"     # single | double

    @property
    def width(self) -> int:
        """Transformer feature width C (the deepest backbone stage)."""
        return self.channels[-1]

    @property
    def grid(self) -> tuple[int, int]:
        """Transformer-input grid extents (1/8 of the image)."""
        return self.image_size // 8, self.image_size // 8

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def validate(self) -> "SegtranConfig":
        if self.task not in TASK_CLASSES:
            raise ConfigError(f"unknown task {self.task!r}; choose from "
                              f"{tuple(TASK_CLASSES)}")
        if self.classes == 0:
            self.classes = TASK_CLASSES[self.task]
        elif self.classes != TASK_CLASSES[self.task]:
            raise ConfigError(f"task {self.task} has {TASK_CLASSES[self.task]} "
                              f"classes, config says {self.classes}")
        if self.image_size % 16 != 0 or self.image_size < 16:
            raise ConfigError(f"image_size {self.image_size} is not divisible by 16")
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels needs 4 positive stage widths, "
                              f"got {self.channels}")
        if self.transformer not in TRANSFORMER_TAGS:
            raise ConfigError(f"unknown transformer {self.transformer!r}; choose "
                              f"from {TRANSFORMER_TAGS}")
        if self.pe not in PE_TAGS:
            raise ConfigError(f"unknown pe {self.pe!r}; choose from {PE_TAGS}")
        if not 1 <= self.layers <= 4:
            raise ConfigError(f"layers must be 1..4, got {self.layers}")
        if self.modes < 1:
            raise ConfigError(f"modes must be >= 1, got {self.modes}")
        if self.codebook < 1:
            raise ConfigError(f"codebook must be >= 1, got {self.codebook}")
        if self.heads < 1 or self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads "
                              f"{self.heads}")
        if self.pe == "fixed" and self.width % 4 != 0:
            raise ConfigError(f"fixed pe needs width divisible by 4, "
                              f"got {self.width}")
        if self.pe == "learnable" and self.width % 2 != 0:
            raise ConfigError(f"learnable pe needs even width, got {self.width}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.batch < 1 or self.iters < 0 or self.holdout < 1:
            raise ConfigError("batch/holdout must be positive and iters >= 0")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be single or double, "
                              f"got {self.precision!r}")
        return self


def _coerce_field(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected true/false, got {raw!r}")
    if kind is int or kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected integer, got {raw!r}") from None
    if kind is float or kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected number, got {raw!r}") from None
    if kind is str or kind == "str":
        return raw
    # the only structured field is the channel tuple
    try:
        return tuple(int(part) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, "
                          f"got {raw!r}") from None


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(SegtranConfig)}


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; blank lines and #-comments are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, "
                              f"got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce_field(key, _FIELD_TYPES[key], raw)
    return values


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def make_config(file_values: dict | None = None, **overrides) -> SegtranConfig:
    values = dict(file_values or {})
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return SegtranConfig(**values).validate()


def config_to_text(cfg: SegtranConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"

"""Flat ``key = value`` configuration with typed validation.

Blank lines and ``#`` comments are ignored; unknown keys are errors. The
default file is taken from the ``VOLNAV_CONFIG`` environment variable when
no path is given; command-line overrides are applied last.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .encoder import EncoderConfig
from .policy import PolicyConfig
from .scene import GridSpec

ENV_VAR = "VOLNAV_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # egocentric grid
    x_range: tuple = (-6.0, 6.0)
    y_range: tuple = (-6.0, 6.0)
    z_range: tuple = (-1.5, 2.0)
    resolution: float = 0.1
    z_cells: int = 32
    # encoder
    dim: int = 768
    view_dim: int = 768
    heads: int = 8
    samples: int = 6
    cva_layers: int = 6
    levels: int = 3
    upsample: str = "deconv"
    activation: str = "relu"
    view_features: str = "render"
    # policy
    policy_heads: int = 12
    policy_layers: int = 4
    object_head: bool = False
    sigma: float = 3.0
    neighborhood: int = 9
    w_g: float = 0.5
    # seeds
    seed: int = 0
    encoder_seed: int = 0
    policy_seed: int = 0
    view_seed: int = 0
    # navigation
    success_radius: float = 3.0
    max_steps: int = 15
    instruction_length: int = 8

    def __post_init__(self):
        side = math.isqrt(self.neighborhood)
        if side * side != self.neighborhood or side % 2 == 0:
            raise ConfigError(f"neighborhood must be an odd square (9, 25, ...), got {self.neighborhood}")
        if not 0.0 <= self.w_g <= 1.0:
            raise ConfigError(f"w_g must lie in [0, 1], got {self.w_g}")
        if self.sigma <= 0 or self.success_radius <= 0:
            raise ConfigError("sigma and success_radius must be positive")
        if self.max_steps < 0 or self.instruction_length < 1:
            raise ConfigError("max_steps must be >= 0 and instruction_length >= 1")
        if self.view_features not in ("render", "seeded"):
            raise ConfigError(f"view_features must be render or seeded, got {self.view_features!r}")
        try:
            self.encoder_config()
            self.policy_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.grid().dims[2] < self.z_cells:
            raise ConfigError(f"z_cells={self.z_cells} exceeds the grid height of {self.grid().dims[2]} cells")

    @property
    def radius(self) -> int:
        return math.isqrt(self.neighborhood) // 2

    def grid(self) -> GridSpec:
        return GridSpec(self.x_range, self.y_range, self.z_range, self.resolution)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.dim, self.view_dim, self.heads, self.samples, self.cva_layers, self.levels,
                             self.z_cells, self.upsample, self.activation, self.grid())

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(self.dim, self.policy_heads, self.policy_layers, self.object_head)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(Config)}


def _convert(key: str, raw: str):
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = tuple(float(x) for x in raw.split(","))
            if len(parts) != 2:
                raise ValueError(raw)
            return parts
        return raw
    except ValueError:
        kind = "min,max pair" if isinstance(default, tuple) else type(default).__name__
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_assignments(items, source: str = "override") -> dict:
    out = {}
    for lineno, line in enumerate(items, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _convert(key, value)
    return out


def load_config(path=None, overrides=(), use_env: bool = True) -> Config:
    """Defaults, then the config file (explicit or from $VOLNAV_CONFIG), then ``key=value`` overrides."""
    values = {}
    if path is None and use_env:
        path = os.environ.get(ENV_VAR) or None
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_assignments(p.read_text().splitlines(), str(p)))
    values.update(parse_assignments(list(overrides)))
    try:
        return replace(Config(), **values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

"""Flat ``key = value`` experiment configuration.

Lines starting with ``#`` or ``;`` are comments. Lists are comma separated.
Unknown keys are rejected so typos surface immediately.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

__all__ = ["ExperimentConfig", "load_config", "parse_config"]

_SECTION = "experiment"


@dataclass
class ExperimentConfig:
    scenario: str = "default"
    m: int = 24
    domain: str = "box:0.125,0.875"
    # a-priori subspace W
    w_kind: str = "prolate"  # prolate | partition
    w_s: int = 2  # partition cells per axis
    w_band: int = 2  # prolate band limit
    w_order: int = 2  # prolate factors per axis
    R: float = 2.0
    # frequencies
    c: str = "0.25"  # number or "auto"
    c1: float = 0.0
    zeta_cap: float = 1e6
    N: str = "auto"
    N_cap: int = 20000
    L: str = "auto"
    L_tol: float = 1e-6
    L_max: int = 80
    # phantoms
    q0_amp: float = 0.8
    delta: float = 0.001
    eps: float = 0.0
    eta: float = 0.0
    eta_list: list = field(default_factory=lambda: [2.5e-8, 5e-8, 7.5e-8, 1e-7])
    eps_list: list = field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 3e-2])
    seed: int = 0
    phantom_seed: int = 1
    eps_seed: int = 2
    # iteration
    initial: str = "zero"  # zero | q0
    tol: float = 1e-9
    max_iters: int = 200
    # reporting
    floor: str = "auto"  # auto (pipeline at 2m) | none | number
    floor_tol_factor: float = 7.0
    workers: int = 1
    out: str = "runs"
    debug_flip_sign: bool = False

    def __post_init__(self):
        if self.m < 8 or self.m % 2:
            raise ConfigError(f"m must be an even integer >= 8, got {self.m}")
        if self.w_kind not in ("prolate", "partition"):
            raise ConfigError(f"w_kind must be prolate or partition, got {self.w_kind!r}")
        if self.initial not in ("zero", "q0"):
            raise ConfigError(f"initial must be zero or q0, got {self.initial!r}")
        for key in ("c", "N", "L"):
            val = getattr(self, key)
            if val != "auto":
                try:
                    float(val)
                except ValueError as exc:
                    raise ConfigError(f"{key} must be a number or 'auto', got {val!r}") from exc
        if self.floor not in ("auto", "none"):
            try:
                float(self.floor)
            except ValueError as exc:
                raise ConfigError(f"floor must be auto, none or a number, got {self.floor!r}") from exc
        if self.R <= 0 or self.tol <= 0:
            raise ConfigError("R and tol must be positive")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ", ".join(repr(x) if not isinstance(x, str) else x for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, default):
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
        if isinstance(default, list):
            return [float(x) for x in raw.split(",") if x.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, **overrides) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    defaults = ExperimentConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(ExperimentConfig)}
    values = {}
    for key, raw in cp[_SECTION].items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, known[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path=None, **overrides) -> ExperimentConfig:
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, **overrides)

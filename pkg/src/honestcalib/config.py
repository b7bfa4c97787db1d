"""Hyperparameters, run configuration and the flat ``key = value`` config format."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    # loss weights and selection thresholds
    alpha: float = 1.0
    beta: float = 0.5
    margin_m: float = 0.3
    lambda1: float = 1.0
    lambda2: float = 0.7
    delta: float = 0.4
    tau1: float = 0.8
    tau2: float = 0.5
    # optimizer
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    projection_dim: int = 64
    init_scale: float = 0.05
    # switches for readings the method leaves open
    calibrate_temperature: bool = True
    strict_alignment: bool = True
    hard_negatives: bool = False
    use_gold_positive: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "margin_m", "lambda1", "lambda2", "delta", "tau2", "learning_rate", "init_scale"):
            value = getattr(self, name)
            if not value >= 0:
                raise ConfigError(f"{name} must be non-negative, got {value!r}")
        if not 0.0 <= self.tau1 <= 1.0:
            raise ConfigError(f"tau1 must lie in [0, 1], got {self.tau1!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.projection_dim < 2:
            raise ConfigError("projection_dim must be at least 2")

    def replace(self, **changes) -> "Hyperparams":
        return coerce(Hyperparams, {**asdict(self), **changes})


def coerce(cls, values: dict[str, Any]):
    """Build dataclass ``cls`` from loosely typed values, rejecting unknown keys."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for name, value in values.items():
        default = known[name].default
        try:
            if isinstance(default, bool):
                if isinstance(value, str):
                    if value.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(value)
                    value = value.lower() in ("true", "1")
                out[name] = bool(value)
            elif isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(value)
                out[name] = int(value)
            elif isinstance(default, float):
                out[name] = float(value)
            else:
                out[name] = value
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {name}: {value!r}") from None
    return cls(**out)


def parse_config_text(text: str) -> dict[str, Any]:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found table(s): {', '.join(nested)}")
    return data


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters plus paths and reporting options for one CLI run."""

    hyper: Hyperparams = field(default_factory=Hyperparams)
    input: Optional[str] = None
    output: Optional[str] = None
    checkpoint: Optional[str] = None
    report_format: str = "json"
    c_min: float = 0.5
    u_max_frac: float = 0.75

    def __post_init__(self):
        if self.report_format not in ("json", "csv"):
            raise ConfigError(f"report_format must be json or csv, got {self.report_format!r}")
        if not 0.0 <= self.c_min <= 1.0:
            raise ConfigError("c_min must lie in [0, 1]")
        if self.u_max_frac < 0:
            raise ConfigError("u_max_frac must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self.hyper)
        out.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "hyper"})
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        hyper_names = {f.name for f in fields(Hyperparams)}
        own_names = {f.name for f in fields(cls)} - {"hyper"}
        unknown = sorted(set(values) - hyper_names - own_names)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        hyper = coerce(Hyperparams, {k: v for k, v in values.items() if k in hyper_names})
        own = {k: v for k, v in values.items() if k in own_names}
        for key in ("c_min", "u_max_frac"):
            if key in own:
                try:
                    own[key] = float(own[key])
                except (TypeError, ValueError):
                    raise ConfigError(f"bad value for {key}: {own[key]!r}") from None
        return cls(hyper=hyper, **own)


def load_config(path: Optional[str] = None, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Read a flat config file (may be absent or empty); ``overrides`` win over file values."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(values)

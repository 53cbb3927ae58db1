"""TOML run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = ["ConfigError", "RunConfig", "load_config", "SystemBlock", "BathBlock", "BasisBlock",
           "NetworkBlock", "StageBlock", "ScheduleBlock", "IntegratorBlock", "OutputBlock",
           "GradcheckBlock"]


class ConfigError(ValueError):
    """Malformed configuration."""


@dataclass(frozen=True)
class SystemBlock:
    n_orbitals: int = 2
    eps0: float = 2.0
    u0: float = 4.0
    d_eps: float = -7.0
    d_u: float = 6.0
    t_quench: float = 0.0


@dataclass(frozen=True)
class BathBlock:
    kT: float = 3.0
    gamma: float = 1.0
    width: float = 5.0
    center_follows_mu: bool = True
    center: float = 0.0
    bias: float = 2.0
    n_pade: int = 2
    scheme: str = "pade"
    convention: str = "bare"
    initial_state: str = "thermal"
    relax_time: float = 10.0


@dataclass(frozen=True)
class BasisBlock:
    m_max: int = 2
    filter: bool = True
    cap: int = 2_000_000


@dataclass(frozen=True)
class NetworkBlock:
    n_layers: int = 4
    hidden: int = 35
    seed: int = 0
    init_scale: float = 1.0
    feature_maps: tuple = (("t", "zero", "zero"),)


@dataclass(frozen=True)
class StageBlock:
    spacing: float = 0.015
    target: float = 1e-4
    cusp_points: int = 0


@dataclass(frozen=True)
class ScheduleBlock:
    horizon: float = 2.3
    width: float = 0.23
    boundaries: tuple = ()
    stages: tuple = (StageBlock(),)
    omega_r: float = 0.2
    omega_i: float = 0.8
    omega_tr: float = 20.0
    lam: float = -3.0
    delta_t: float = 1.5e-9
    max_iter: int = 3000
    grad_tol: float = 1e-8
    time_limit: float = 0.0
    ic_source: tuple = ()
    n_subdomains: int = 0
    extrapolate_to: float = 0.0
    override_failure: bool = False


@dataclass(frozen=True)
class IntegratorBlock:
    dt: float = 5e-4
    horizon: float = 2.3
    sample_dt: float = 0.01


@dataclass(frozen=True)
class OutputBlock:
    dir: str = "out"
    sample_dt: float = 0.01


@dataclass(frozen=True)
class GradcheckBlock:
    draws: int = 20
    step: float = 1e-6
    delta_t: float = 1e-3
    tol: float = 1e-6
    seed: int = 0
    hidden: int = 6


@dataclass(frozen=True)
class RunConfig:
    system: SystemBlock = SystemBlock()
    bath: BathBlock = BathBlock()
    basis: BasisBlock = BasisBlock()
    network: NetworkBlock = NetworkBlock()
    schedule: ScheduleBlock = ScheduleBlock()
    integrator: IntegratorBlock = IntegratorBlock()
    output: OutputBlock = OutputBlock()
    gradcheck: GradcheckBlock = GradcheckBlock()

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")


def _to_plain(x):
    if isinstance(x, dict):
        return {k: _to_plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_plain(v) for v in x]
    return x


_NESTED = {("schedule", "stages"): StageBlock}


def _coerce(value: Any, default: Any, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected an array")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {prefix or 'config'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        where = f"{prefix}.{name}" if prefix else name
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where)
        elif (prefix, name) in _NESTED:
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{where}: expected a non-empty array of tables")
            kwargs[name] = tuple(_build(_NESTED[prefix, name], v, f"{where}[{i}]") for i, v in enumerate(value))
        else:
            kwargs[name] = _coerce(value, default, where)
    cfg = cls(**kwargs)
    _validate(cfg, prefix)
    return cfg


def _validate(cfg, prefix: str):
    if isinstance(cfg, BathBlock):
        if cfg.kT <= 0 or cfg.width <= 0 or cfg.gamma < 0 or cfg.n_pade < 1:
            raise ConfigError("bath: kT, width must be > 0, gamma >= 0, n_pade >= 1")
        if cfg.initial_state not in ("thermal", "relaxed"):
            raise ConfigError("bath.initial_state must be 'thermal' or 'relaxed'")
        if cfg.scheme not in ("pade", "matsubara") or cfg.convention not in ("bare", "pi"):
            raise ConfigError("bath.scheme/convention has an unknown value")
    elif isinstance(cfg, SystemBlock):
        if cfg.n_orbitals not in (1, 2):
            raise ConfigError("system.n_orbitals must be 1 or 2")
    elif isinstance(cfg, BasisBlock):
        if cfg.m_max < 0:
            raise ConfigError("basis.m_max must be >= 0")
    elif isinstance(cfg, ScheduleBlock):
        if cfg.horizon <= 0 or cfg.width <= 0:
            raise ConfigError("schedule.horizon and width must be > 0")
        targets = [s.target for s in cfg.stages]
        if any(b >= a for a, b in zip(targets, targets[1:])):
            raise ConfigError("schedule.stages targets must decrease")
        if any(s.spacing <= 0 for s in cfg.stages):
            raise ConfigError("schedule.stages spacing must be > 0")
        if any(src not in ("model", "reference") for src in cfg.ic_source):
            raise ConfigError("schedule.ic_source entries must be 'model' or 'reference'")
    elif isinstance(cfg, IntegratorBlock):
        if cfg.dt <= 0 or cfg.horizon <= 0 or cfg.sample_dt <= 0:
            raise ConfigError("integrator values must be > 0")
    elif isinstance(cfg, NetworkBlock):
        if cfg.n_layers < 1 or cfg.hidden < 1 or not cfg.feature_maps:
            raise ConfigError("network shape is invalid")


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration.

    A ``.json`` path is read as a run manifest and its ``config`` table is
    used, so any run can be repeated from its manifest alone.
    """
    path = Path(path)
    try:
        if path.suffix == ".json":
            with open(path) as fh:
                raw = json.load(fh)
            if not isinstance(raw, dict) or "config" not in raw:
                raise ConfigError(f"{path}: manifest has no 'config' table")
            raw = raw["config"]
        else:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
    except (OSError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return RunConfig.from_dict(raw)

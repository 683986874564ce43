"""Experiment configuration: key=value text files with '#' comments."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

EXPERIMENTS = ("fig1", "fig2", "stationarity", "convergence", "custom")
SOLVERS = ("exact", "characteristics", "rk4", "branch")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """All keys except ``experiment`` have defaults.

    ``dt`` is the integration step for rk4 and the sampling step for the
    closed-form solvers; rows are written every ``sample_every`` steps.  Unset
    grid keys follow the thermal width (256 nodes, 20 widths per half-axis).
    ``taper`` gives (r0, r1) in thermal widths for the windowed initial state
    used by grid solvers; ``auto`` picks (6, 9.5) for rk4 and none otherwise.
    """

    experiment: str
    m: float = 1.0
    omega: float = 1.0
    alpha: tuple = (0.95, 0.0, 0.0)
    beta: float = 1e5
    hbar: float = 1.0
    nq: int = 256
    np: int = 256
    lq: Optional[float] = None
    lp: Optional[float] = None
    gauge: str = "harmonic"
    solver: str = "exact"
    dt: Optional[float] = None
    t_final: Optional[float] = None
    sample_every: Optional[int] = None
    output_dir: str = "khs_output"
    emit_snapshots: bool = True
    snapshot_times: tuple = (0.0, 2.4, 5.7, 8.8)
    emit_svg: bool = True
    taper: object = "auto"
    seed: int = 0

    def canonical(self) -> str:
        d = asdict(self)
        d.pop("output_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _parse_float(key, v):
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _parse_int(key, v):
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def _parse_bool(key, v):
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _parse_floats(key, v):
    parts = [x for x in v.replace(" ", "").split(",") if x]
    return tuple(_parse_float(key, x) for x in parts)


_PARSERS = {
    "experiment": lambda k, v: v.strip(),
    "m": _parse_float, "omega": _parse_float, "beta": _parse_float, "hbar": _parse_float,
    "alpha": _parse_floats,
    "nq": _parse_int, "np": _parse_int,
    "lq": _parse_float, "lp": _parse_float,
    "gauge": lambda k, v: v.strip().lower(),
    "solver": lambda k, v: v.strip().lower(),
    "dt": _parse_float, "t_final": _parse_float,
    "sample_every": _parse_int,
    "output_dir": lambda k, v: v.strip(),
    "emit_snapshots": _parse_bool, "emit_svg": _parse_bool,
    "snapshot_times": _parse_floats,
    "taper": lambda k, v: v.strip().lower() if v.strip().lower() in ("auto", "none") else _parse_floats(k, v),
    "seed": _parse_int,
}

assert set(_PARSERS) == {f.name for f in fields(ExperimentConfig)}


def parse_config_text(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _PARSERS[key](key, val)
    if "experiment" not in values:
        raise ConfigError("missing required key 'experiment'")
    return validate(ExperimentConfig(**values))


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r} (expected one of {', '.join(EXPERIMENTS)})")
    if cfg.solver not in SOLVERS:
        raise ConfigError(f"unknown solver {cfg.solver!r} (expected one of {', '.join(SOLVERS)})")
    if cfg.gauge not in ("harmonic", "liouville"):
        raise ConfigError(f"unknown gauge {cfg.gauge!r}")
    if len(cfg.alpha) != 3:
        raise ConfigError("alpha must have three comma-separated components")
    if cfg.dt is not None and not cfg.dt > 0:
        raise ConfigError("dt must be positive")
    if cfg.t_final is not None and not cfg.t_final > 0:
        raise ConfigError("t_final must be positive")
    if cfg.sample_every is not None and cfg.sample_every < 1:
        raise ConfigError("sample_every must be >= 1")
    for name in ("m", "omega", "beta", "hbar"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive")
    if isinstance(cfg.taper, tuple) and (len(cfg.taper) != 2 or not 0 < cfg.taper[0] < cfg.taper[1]):
        raise ConfigError("taper must be 'auto', 'none' or r0,r1 with 0 < r0 < r1")
    return cfg


def resolved(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill experiment- and solver-dependent defaults."""
    upd = {}
    if cfg.experiment == "stationarity":
        upd["alpha"] = (0.0, 0.0, 0.0)
    rk = cfg.solver == "rk4"
    if cfg.experiment == "fig2":
        upd.setdefault("dt", cfg.dt or 1.0)
        upd["t_final"] = cfg.t_final or 2000.0
        upd["sample_every"] = cfg.sample_every or 1
    elif cfg.experiment == "convergence":
        upd["dt"] = cfg.dt or 2e-4
        upd["t_final"] = cfg.t_final or 1.0
        upd["sample_every"] = cfg.sample_every or 500
    else:
        upd["dt"] = cfg.dt or (2e-4 if rk else 0.02)
        upd["t_final"] = cfg.t_final or 10.0
        upd["sample_every"] = cfg.sample_every or (100 if rk else 1)
    if cfg.taper == "auto":
        upd["taper"] = (6.0, 9.5) if (rk or cfg.experiment == "convergence") else "none"
    out = replace(cfg, **upd)
    sq = 1.0 / (out.beta * out.m * out.omega ** 2) ** 0.5
    sp = (out.m / out.beta) ** 0.5
    return replace(out, lq=out.lq or 20.0 * sq, lp=out.lp or 20.0 * sp)

"""Experiment configuration in INI form (UTF-8, one section per concern).

Every value is validated on load; failures raise :class:`ConfigError`
whose message starts with the offending ``section.key``.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Optional

import numpy as np

from .hodgkin_huxley import Family, HHParams
from .pdmp import PdmpModel
from .toys import switching_toy, tabular_toy, constant_cost_toy

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "TOYS", "EXAMPLE_CONFIG"]


class ConfigError(ValueError):
    pass


def _zero_toy(horizon: float = 1.0, dt: float = 0.01) -> PdmpModel:
    return tabular_toy([[0.5, 0.2], [0.3, 0.3]], [[0.0, 1.0], [1.0, 0.0]], np.zeros((2, 2)), [0.0, 0.0],
                       [0.0, 1.0], horizon, dt, name="zero-cost")


TOYS = {
    "switching": switching_toy,
    "constant-cost": lambda horizon=1.0, dt=0.01: constant_cost_toy(1.0, horizon=horizon, dt=dt),
    "zero-cost": _zero_toy,
}


@dataclass
class RunSection:
    model: str = "toy"
    seed: int = 0
    paths: int = 1000
    jobs: int = 1


@dataclass
class ToySection:
    name: str = "switching"
    horizon: float = 1.0
    dt: float = 0.01
    t: float = 0.0
    mode: int = 0
    a: float = 0.0


@dataclass
class ValueSection:
    n_times: int = 101
    tol: float = 1e-8
    max_iter: int = 200
    jump_cap: int = 4
    substeps: int = 1


@dataclass
class DualSection:
    lambda0: str = "uniform"
    lambda0_mass: float = 1.0
    budget: int = 40
    nu_min: float = 0.01
    nu_max: float = 20.0
    paths: int = 500


@dataclass
class BsdeSection:
    ladder: tuple = (1, 2, 5, 10, 50)
    dt: float = 0.005
    representation: str = "grid"
    paths: int = 4000


@dataclass
class SimulateSection:
    z_points: int = 11
    policy: str = "zero"  # zero | max | constant:<a>


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    toy: ToySection = field(default_factory=ToySection)
    hh: HHParams = field(default_factory=HHParams)
    value: ValueSection = field(default_factory=ValueSection)
    dual: DualSection = field(default_factory=DualSection)
    bsde: BsdeSection = field(default_factory=BsdeSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    source_hash: str = ""

    def lambda0_weights(self, n_controls: int) -> np.ndarray:
        if self.dual.lambda0 == "uniform":
            return np.full(n_controls, self.dual.lambda0_mass / n_controls)
        w = np.array([float(v) for v in self.dual.lambda0.split(",")])
        if w.size != n_controls:
            raise ConfigError(f"dual.lambda0 needs {n_controls} weights, got {w.size}")
        return w


_SECTIONS = {"run": RunSection, "toy": ToySection, "value": ValueSection, "dual": DualSection,
             "bsde": BsdeSection, "simulate": SimulateSection}


def _convert(section: str, key: str, raw: str, default):
    where = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "on", "off", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "on", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            val = float(raw)
            if not np.isfinite(val):
                raise ValueError(raw)
            return val
        if isinstance(default, tuple) and key == "sites":
            return tuple(Family(s.strip()) for s in raw.split(",") if s.strip())
        if isinstance(default, tuple):
            return tuple(int(s) for s in raw.split(",") if s.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def _hh_from(sec) -> HHParams:
    kwargs = {}
    defaults = HHParams()
    known = {f.name for f in dc_fields(HHParams)}
    for key, raw in sec.items():
        if key not in known:
            raise ConfigError(f"hh.{key}: unknown parameter")
        if key == "V_ref":
            try:
                kwargs[key] = np.array([float(v) for v in raw.split(",") if v.strip()])
            except ValueError as exc:
                raise ConfigError(f"hh.V_ref: cannot parse {raw!r}") from exc
            continue
        kwargs[key] = _convert("hh", key, raw, getattr(defaults, key))
    try:
        params = HHParams(**kwargs)
        params.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return params


def _validate(cfg: ExperimentConfig) -> None:
    checks = [
        ("run.model", cfg.run.model in ("toy", "hh"), "must be 'toy' or 'hh'"),
        ("run.paths", cfg.run.paths >= 2, "must be at least 2"),
        ("run.jobs", cfg.run.jobs >= 1, "must be at least 1"),
        ("toy.name", cfg.toy.name in TOYS, f"must be one of {sorted(TOYS)}"),
        ("toy.horizon", cfg.toy.horizon > 0, "must be positive"),
        ("toy.dt", cfg.toy.dt > 0, "must be positive"),
        ("toy.t", 0 <= cfg.toy.t <= cfg.toy.horizon, "must lie in [0, horizon]"),
        ("toy.mode", cfg.toy.mode in (0, 1), "must be 0 or 1"),
        ("toy.a", cfg.toy.a in (0.0, 1.0), "must be 0 or 1"),
        ("value.n_times", cfg.value.n_times >= 2, "must be at least 2"),
        ("value.tol", cfg.value.tol > 0, "must be positive"),
        ("value.max_iter", cfg.value.max_iter >= 1, "must be at least 1"),
        ("value.jump_cap", cfg.value.jump_cap >= 0, "must be nonnegative"),
        ("value.substeps", cfg.value.substeps >= 1, "must be at least 1"),
        ("dual.lambda0_mass", cfg.dual.lambda0_mass > 0, "must be positive"),
        ("dual.budget", cfg.dual.budget >= 1, "must be at least 1"),
        ("dual.nu_min", 0 < cfg.dual.nu_min <= 1.0, "must lie in (0, 1]"),
        ("dual.nu_max", 1.0 <= cfg.dual.nu_max < np.inf, "must be at least 1"),
        ("dual.paths", cfg.dual.paths >= 2, "must be at least 2"),
        ("bsde.ladder", len(cfg.bsde.ladder) > 0 and all(n >= 0 for n in cfg.bsde.ladder), "needs nonnegative integers"),
        ("bsde.dt", cfg.bsde.dt > 0, "must be positive"),
        ("bsde.representation", cfg.bsde.representation in ("grid", "regression"), "must be grid or regression"),
        ("bsde.paths", cfg.bsde.paths >= 2, "must be at least 2"),
        ("simulate.z_points", cfg.simulate.z_points >= 2, "must be at least 2"),
    ]
    for where, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{where} {msg}")
    pol = cfg.simulate.policy
    if not (pol in ("zero", "max") or pol.startswith("constant:")):
        raise ConfigError("simulate.policy must be zero, max or constant:<a>")
    if cfg.dual.lambda0 != "uniform":
        try:
            w = [float(v) for v in cfg.dual.lambda0.split(",")]
        except ValueError as exc:
            raise ConfigError(f"dual.lambda0: cannot parse {cfg.dual.lambda0!r}") from exc
        if any(not np.isfinite(v) or v <= 0 for v in w):
            raise ConfigError("dual.lambda0 weights must be positive")
    mass = cfg.dual.lambda0_mass if cfg.dual.lambda0 == "uniform" else sum(
        float(v) for v in cfg.dual.lambda0.split(","))
    worst = cfg.bsde.dt * (max(cfg.bsde.ladder) + 1) * mass
    if worst >= 1:
        raise ConfigError(f"bsde.dt too large: dt (n+1) lambda0(A) = {worst:.3g} >= 1")


def load_config(path) -> ExperimentConfig:
    """Parse and validate an INI experiment file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str  # keep case (parameter names such as V_K)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig()
    for name in parser.sections():
        sec = parser[name]
        if name == "hh":
            cfg.hh = _hh_from(sec)
            continue
        if name not in _SECTIONS:
            raise ConfigError(f"{name}: unknown section")
        obj = getattr(cfg, name)
        for key, raw in sec.items():
            if not hasattr(obj, key):
                raise ConfigError(f"{name}.{key}: unknown key")
            setattr(obj, key, _convert(name, key, raw, getattr(obj, key)))
    _validate(cfg)
    cfg.source_hash = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return cfg


EXAMPLE_CONFIG = """\
; Example experiment file.  Times in ms, potentials in mV, rates in 1/ms.
[run]
model = toy          ; toy | hh
seed = 0
paths = 1000
jobs = 1

[toy]
name = switching     ; switching | constant-cost | zero-cost
horizon = 1.0        ; ms
t = 0.0              ; start time, ms
mode = 0
a = 0

[value]
n_times = 101
tol = 1e-8
jump_cap = 4

[dual]
lambda0 = uniform    ; or comma-separated weights per control
budget = 40
nu_min = 0.01
nu_max = 20
paths = 500

[bsde]
ladder = 1, 2, 5, 10, 50
dt = 0.005           ; ms

[simulate]
z_points = 11
policy = zero
"""

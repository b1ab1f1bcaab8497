"""JSON run configuration.

Defaults follow the built-in scenario; any key in the JSON overrides it.
Schema (all sections optional except ``scenario``)::

    {
      "scenario": "example1" | "manipulator",
      "observer": {"gamma", "eta", "c", "theta", "k1", "k2", "r0"},
      "disturbance": {"omega0", "omega1"},
      "filter": {"T1", "T2"},
      "cbf": {"lambdas": [...], "rho", "rho_tilde"},
      "tracking": {"alpha1", "alpha2", "eps", "position_gain"},
      "robust": {"rate_h", "rate_b"},
      "sim": {"dt", "horizon", "integrator": "sdirk3" | "rk4", "quad_nodes", "quad_segment"},
      "mode": {"oracle": bool, "controller": "iidob-cbf-qp" | "robust-cbf" | "nominal-only",
               "z0_bound": float | null},
      "output_dir": "runs/example1",
      "seed": 0
    }
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .dfilter import FilterParams
from .errors import ConfigError
from .observer import ObserverGains
from .tracking import TrackingParams

CONTROLLERS = ("iidob-cbf-qp", "robust-cbf", "nominal-only")

SCENARIO_DEFAULTS = {
    "example1": {
        "observer": {"gamma": 100.0, "eta": 100.0, "c": 0.5, "theta": 10.0, "k1": 10.0, "k2": 10.0, "r0": 1.001},
        "disturbance": {"omega0": 8.0, "omega1": 26.0},
        "filter": {"T1": 50.0, "T2": 1.0},
        "cbf": {"lambdas": [50.0, 50.0], "rho": 1.0, "rho_tilde": 1.0},
        "tracking": {"alpha1": 50.0, "alpha2": 50.0, "eps": 1e-3, "position_gain": None},
        "robust": {"rate_h": 50.0, "rate_b": 50.0},
        "sim": {"dt": 1e-3, "horizon": 20.0, "integrator": "sdirk3", "quad_nodes": 16, "quad_segment": 1.0},
    },
    "manipulator": {
        "observer": {"gamma": 250.0, "eta": 100.0, "c": 5.0, "theta": 50.0, "k1": 20.0, "k2": 20.0, "r0": 1.001},
        "disturbance": {"omega0": 11.0, "omega1": 37.0},
        "filter": {"T1": 250.0, "T2": 1.0},
        "cbf": {"lambdas": [25.0, 30.0, 50.0], "rho": 1.0, "rho_tilde": 1.0},
        "tracking": {"alpha1": 50.0, "alpha2": 50.0, "eps": 1e-3, "position_gain": 10.0},
        "robust": {"rate_h": 50.0, "rate_b": 50.0},
        "sim": {"dt": 5e-4, "horizon": 10.0, "integrator": "sdirk3", "quad_nodes": 16, "quad_segment": 1.0},
    },
}


@dataclass
class SimConfig:
    scenario: str = "example1"
    gains: ObserverGains = field(default_factory=ObserverGains)
    r0: float = 1.001
    omega0: float = 8.0
    omega1: float = 26.0
    filter: FilterParams = field(default_factory=FilterParams)
    lambdas: tuple = (50.0, 50.0)
    rho: float = 1.0
    rho_tilde: float = 1.0
    tracking: TrackingParams = field(default_factory=TrackingParams)
    position_gain: Optional[float] = None
    rate_h: float = 50.0
    rate_b: float = 50.0
    dt: float = 1e-3
    horizon: float = 20.0
    integrator: str = "sdirk3"
    quad_nodes: int = 16
    quad_segment: float = 1.0
    oracle: bool = False
    controller: str = "iidob-cbf-qp"
    z0_bound: Optional[float] = None
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.integrator not in ("sdirk3", "rk4"):
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if not (self.dt > 0 and self.horizon > 0):
            raise ConfigError("dt and horizon must be positive")

    def replace(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        g = asdict(self.gains)
        return {
            "scenario": self.scenario,
            "observer": {**g, "r0": self.r0},
            "disturbance": {"omega0": self.omega0, "omega1": self.omega1},
            "filter": asdict(self.filter),
            "cbf": {"lambdas": list(self.lambdas), "rho": self.rho, "rho_tilde": self.rho_tilde},
            "tracking": {**asdict(self.tracking), "position_gain": self.position_gain},
            "robust": {"rate_h": self.rate_h, "rate_b": self.rate_b},
            "sim": {"dt": self.dt, "horizon": self.horizon, "integrator": self.integrator,
                    "quad_nodes": self.quad_nodes, "quad_segment": self.quad_segment},
            "mode": {"oracle": self.oracle, "controller": self.controller, "z0_bound": self.z0_bound},
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: dict) -> SimConfig:
    name = raw.get("scenario", "example1")
    if name not in SCENARIO_DEFAULTS:
        raise ConfigError(f"unknown scenario {name!r}")
    known = {"scenario", "observer", "disturbance", "filter", "cbf", "tracking", "robust", "sim", "mode",
             "output_dir", "seed"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    d = _merge(SCENARIO_DEFAULTS[name], raw)
    ob = dict(d["observer"])
    r0 = ob.pop("r0", 1.001)
    tr = dict(d["tracking"])
    pgain = tr.pop("position_gain", None)
    mode = d.get("mode", {})
    sim = d["sim"]
    try:
        return SimConfig(
            scenario=name,
            gains=ObserverGains(**ob),
            r0=float(r0),
            omega0=float(d["disturbance"]["omega0"]),
            omega1=float(d["disturbance"]["omega1"]),
            filter=FilterParams(**d["filter"]),
            lambdas=tuple(float(v) for v in d["cbf"]["lambdas"]),
            rho=float(d["cbf"]["rho"]),
            rho_tilde=float(d["cbf"]["rho_tilde"]),
            tracking=TrackingParams(**tr),
            position_gain=pgain,
            rate_h=float(d["robust"]["rate_h"]),
            rate_b=float(d["robust"]["rate_b"]),
            dt=float(sim["dt"]),
            horizon=float(sim["horizon"]),
            integrator=sim.get("integrator", "sdirk3"),
            quad_nodes=int(sim.get("quad_nodes", 16)),
            quad_segment=float(sim.get("quad_segment", 1.0)),
            oracle=bool(mode.get("oracle", False)),
            controller=mode.get("controller", "iidob-cbf-qp"),
            z0_bound=mode.get("z0_bound"),
            output_dir=d.get("output_dir", "runs"),
            seed=int(d.get("seed", 0)),
        )
    except TypeError as exc:
        raise ConfigError(f"bad config section: {exc}") from exc


def default_config(name: str = "example1", **overrides) -> SimConfig:
    return config_from_dict({"scenario": name}).replace(**overrides)


def load_config(path) -> SimConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)

"""Experiment configuration: one TOML file, one table of defaults.

Every key the harness reads appears in ``DEFAULTS`` below; a key that is not
listed there is rejected so that typos fail loudly.  ``seed`` has no default.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..adjoint import UtilitySpec
from ..donsker import InsiderSpec
from ..errors import ConfigError
from ..market import MarketSpec
from ..quadrature import QuadratureConfig

SCHEMA_VERSION = 1
KINDS = ("density", "policy", "simulate", "foc", "solve-c", "verify")

# section -> key -> default (None marks a key without a default)
DEFAULTS = {
    "": {
        "schema_version": SCHEMA_VERSION,
        "seed": None,
        "n_paths": 2000,
        "out": "out",
    },
    "insider": {
        "kind": "gaussian",  # gaussian | brownian_poisson | general
        "beta": 1.0,  # scalar or one value per cell
        "T0": 1.0,
        "lam": 1.0,  # brownian_poisson intensity
        "marks": [],  # general: mark values
        "rates": [],  # general: intensity per mark
        "psi": 0.0,  # general: scalar, one row per cell, or [[...]]
    },
    "market": {
        "b0": 0.1,
        "sigma0": 0.2,
        "gamma0": 0.0,  # scalar or one value per mark
        "x0": 1.0,
        "T": 0.5,
    },
    "utility": {"kind": "log", "rho": 0.5},
    "grid": {"steps": 2048, "y_points": 401, "y_sd": 8.0},
    "quadrature": {
        "rel_tol": 1e-8,
        "abs_tol": 1e-12,
        "max_panels": 2**20,
        "truncation_eps": 1e-16,
    },
    "donsker": {"variance_floor": 1e-10},
    "density": {"times": [0.0, 0.25, 0.5], "y": [], "y_t": 0.0},
    "policy": {"times": [0.0, 0.25], "y": [-1.0, 0.0, 1.0], "y_t": [0.0]},
    "simulate": {"policy": "insider"},  # insider | merton
    "foc": {"phi": [0.0], "psi": [0.0]},
    "solve_c": {"y": [0.0], "phi_zero": False},
    "verify": {"n_paths": 2000, "steps": 512, "mc_paths": 20000},
}


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    seed: int
    n_paths: int
    out: Path
    insider: InsiderSpec
    market: MarketSpec
    utility: UtilitySpec
    quad: QuadratureConfig
    steps: int
    y_points: int
    y_sd: float
    variance_floor: float

    def section(self, name):
        return self.raw[name]


def _merge(user: dict) -> dict:
    merged = copy.deepcopy(DEFAULTS)
    for key, value in user.items():
        if isinstance(value, dict):
            if key not in DEFAULTS or key == "":
                raise ConfigError(f"unknown section [{key}]")
            for sub, v in value.items():
                if sub not in DEFAULTS[key]:
                    raise ConfigError(f"unknown key {key}.{sub}")
                merged[key][sub] = v
        else:
            if key not in DEFAULTS[""]:
                raise ConfigError(f"unknown top-level key {key!r}")
            merged[""][key] = value
    return merged


def _insider(sec) -> InsiderSpec:
    kind = sec["kind"]
    if kind == "gaussian":
        return InsiderSpec.gaussian(sec["beta"], sec["T0"])
    if kind == "brownian_poisson":
        return InsiderSpec.brownian_poisson(sec["beta"], sec["lam"], sec["T0"])
    if kind == "general":
        return InsiderSpec.general(sec["beta"], sec["marks"], sec["rates"], sec["psi"], sec["T0"])
    raise ConfigError(f"insider.kind must be gaussian, brownian_poisson or general, got {kind!r}")


def build(user: dict, *, seed=None, n_paths=None, out=None) -> ExperimentConfig:
    raw = _merge(user)
    top = raw[""]
    if top["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {top['schema_version']!r}")
    if seed is not None:
        top["seed"] = seed
    if top["seed"] is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    if n_paths is not None:
        top["n_paths"] = n_paths
    if out is not None:
        top["out"] = str(out)
    try:
        insider = _insider(raw["insider"])
        m = raw["market"]
        gamma0 = tuple(m["gamma0"]) if isinstance(m["gamma0"], list) else m["gamma0"]
        market = MarketSpec(m["b0"], m["sigma0"], gamma0, m["x0"], m["T"])
        market.check_horizon(insider)
        u = raw["utility"]
        utility = UtilitySpec.log() if u["kind"] == "log" else UtilitySpec(u["kind"], u["rho"])
        quad = QuadratureConfig(**raw["quadrature"])
        steps = int(raw["grid"]["steps"])
        if steps < 1:
            raise ValueError("grid.steps must be positive")
        if int(top["n_paths"]) < 1:
            raise ValueError("n_paths must be at least 1")
        variance_floor = float(raw["donsker"]["variance_floor"])
        if not variance_floor > 0:
            raise ValueError("donsker.variance_floor must be positive")
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        raw=raw,
        seed=int(top["seed"]),
        n_paths=int(top["n_paths"]),
        out=Path(top["out"]),
        insider=insider,
        market=market,
        utility=utility,
        quad=quad,
        steps=steps,
        y_points=int(raw["grid"]["y_points"]),
        y_sd=float(raw["grid"]["y_sd"]),
        variance_floor=variance_floor,
    )


def load(path, **overrides) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return build(user, **overrides)

"""Run configuration: YAML schema, presets, validation and object construction.

A configuration is a mapping with the blocks ``grid``, ``params``,
``noise``, ``initial``, ``run``, ``ensemble``, ``schedule`` and ``verify``
plus the top-level keys ``seed_root`` and ``out``.  Missing keys take the
defaults in :data:`DEFAULTS`; unknown keys are rejected so typos do not pass
silently.  :func:`effective_config` returns the merged mapping, which parses
back to the same run.
"""
from __future__ import annotations

import copy
import dataclasses
import math

import yaml

from .errors import ConfigurationError
from .montecarlo import EnsembleConfig
from .noise import NoiseModel, make_noise, noise_from_table
from .spectral import TorusGrid, get_grid
from .state import FluidState, RegularizationParams, initial_fields, prepare_initial

_PARAM_DEFAULTS = {f.name: f.default for f in dataclasses.fields(RegularizationParams)}

DEFAULTS = {
    "seed_root": 0,
    "out": "out",
    "grid": {"d": 1, "N": 32},
    "params": {**_PARAM_DEFAULTS, "m": 8},
    "noise": {"family": "none", "K_modes": 4, "f1": 1.0, "decay": 1.0, "budget": math.inf,
              "scale": None, "rows": None},
    "initial": {"preset": "constant", "rho_mean": 1.0, "amplitude": 0.0, "mode": 1, "velocity": 0.0,
                "n_modes": 3, "seed": 0},
    "run": {"T": 0.1, "record_every": 1, "mode": "frozen", "track": [], "path_id": 0,
            "include_viscous": True},
    "ensemble": {"n_paths": 64, "orders": [2.5, 3.0, 4.0], "block_size": 64, "n_boot": 1000,
                 "boot_seed": 12345, "first_path": 0, "archive": True},
    "schedule": {"mode": "illustrative", "alpha": None, "beta": None, "r0_exponent": None,
                 "factor": 1.5, "stages": []},
    "verify": {"tol_scale": 1.0, "only": []},
}

PRESETS = {
    "trivial": {
        "grid": {"d": 1, "N": 16},
        "params": {"a": 0.0, "m": 4, "h": 0.01, "dt": 0.01},
        "noise": {"family": "none"},
        "initial": {"preset": "constant"},
        "run": {"T": 0.1},
    },
    "reference-1d": {
        "grid": {"d": 1, "N": 32},
        "params": {"a": 0.5, "gamma": 2.0, "eps": 1.0e-3, "r1": 0.2, "r2": 0.2, "m": 4, "h": 1.0e-3,
                   "dt": 1.0e-3},
        "noise": {"family": "constant", "K_modes": 2, "f1": 0.5},
        "initial": {"preset": "single_mode", "amplitude": 0.2, "velocity": 0.3},
        "run": {"T": 0.1, "record_every": 10},
        "ensemble": {"n_paths": 64},
    },
    "quantum-2d": {
        "grid": {"d": 2, "N": 16},
        "params": {"a": 1.0, "gamma": 1.4, "eps": 1.0e-2, "kappa": 1.0e-3, "r2": 0.1, "m": 2, "h": 1.0e-3,
                   "dt": 1.0e-3},
        "noise": {"family": "density-saturating", "K_modes": 4, "f1": 0.5},
        "initial": {"preset": "random_smooth", "amplitude": 0.3, "velocity": 0.2, "n_modes": 2},
        "run": {"T": 0.05, "record_every": 5},
    },
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ConfigurationError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigurationError(f"config block {where + k!r} must be a mapping")
            out[k] = _merge(base[k], v, where + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _num(v):
    """YAML spells infinity ``.inf``; accept the strings ``inf``/``infinity`` too."""
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "infinity", ".inf"):
        return math.inf
    return v


def load_config(source=None, preset: str | None = None, seed: int | None = None, out: str | None = None) -> dict:
    """Parse a YAML file path, YAML text or mapping, apply preset and overrides, validate."""
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        text = source
        if "\n" not in str(source) and not str(source).lstrip().startswith("{"):
            try:
                with open(source) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {source}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    preset = preset or raw.pop("preset", None)
    raw.pop("preset", None)
    cfg = DEFAULTS
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
    cfg = _merge(cfg, raw)
    if seed is not None:
        cfg["seed_root"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    validate(cfg)
    return cfg


def effective_config(cfg: dict) -> str:
    """The merged configuration as YAML; :func:`load_config` on it reproduces ``cfg``."""
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


# ---------------------------------------------------------------- builders


def build_grid(cfg: dict) -> TorusGrid:
    g = cfg["grid"]
    d, N = g["d"], g["N"]
    if not isinstance(d, int) or d not in (1, 2, 3):
        raise ConfigurationError(f"grid.d must be 1, 2 or 3, got {d!r}")
    if not isinstance(N, int) or N < 4 or N % 2:
        raise ConfigurationError(f"grid.N must be an even integer >= 4, got {N!r}")
    return get_grid(d, N)


def build_params(cfg: dict) -> RegularizationParams:
    p = {k: _num(v) for k, v in cfg["params"].items()}
    for k in ("a", "gamma", "eps", "kappa", "delta", "eta", "r0", "r1", "r2", "R", "n_mv", "K", "h", "dt",
              "rho_floor", "c_stab", "gram_tol"):
        if isinstance(p.get(k), int) and not isinstance(p.get(k), bool):
            p[k] = float(p[k])
        elif not isinstance(p.get(k), float):
            raise ConfigurationError(f"params.{k} must be a number, got {p.get(k)!r}")
    return RegularizationParams(**p)


def build_noise(cfg: dict, grid: TorusGrid, m: int) -> NoiseModel | None:
    n = cfg["noise"]
    fam = n["family"]
    seed = int(cfg["seed_root"])
    budget = float(_num(n["budget"]))
    if fam in (None, "none"):
        return None
    if fam == "table":
        if not n["rows"]:
            raise ConfigurationError("noise.family=table needs noise.rows")
        return noise_from_table(grid, m, n["rows"], seed, budget)
    return make_noise(grid, m, int(n["K_modes"]), float(n["f1"]), float(n["decay"]), fam, seed, budget,
                      n["scale"])


def build_initial(cfg: dict, grid: TorusGrid, params: RegularizationParams) -> FluidState:
    i = cfg["initial"]
    rho, u = initial_fields(grid, i["preset"], float(i["rho_mean"]), float(i["amplitude"]), int(i["mode"]),
                            float(i["velocity"]), int(i["n_modes"]), int(i["seed"]))
    return prepare_initial(rho, u, params, grid)


def build_ensemble(cfg: dict, workers: int = 1) -> EnsembleConfig:
    e, r = cfg["ensemble"], cfg["run"]
    return EnsembleConfig(n_paths=int(e["n_paths"]), seed_root=int(cfg["seed_root"]),
                          orders=tuple(float(x) for x in e["orders"]), T=float(r["T"]),
                          record_every=int(r["record_every"]), workers=int(workers),
                          block_size=int(e["block_size"]), mode=r["mode"], track=tuple(r["track"]),
                          n_boot=int(e["n_boot"]), boot_seed=int(e["boot_seed"]),
                          first_path=int(e["first_path"]))


def build_all(cfg: dict, workers: int = 1):
    """Every runtime object of a configuration: ``(grid, params, noise, initial, ensemble)``."""
    grid = build_grid(cfg)
    params = build_params(cfg)
    grid.check_cutoff(params.m)
    noise = build_noise(cfg, grid, params.m)
    init = build_initial(cfg, grid, params)
    return grid, params, noise, init, build_ensemble(cfg, workers)


def validate(cfg: dict):
    """Check every block against the preconditions of the module that consumes it."""
    if not isinstance(cfg["seed_root"], int) or not 0 <= cfg["seed_root"] < 2 ** 64:
        raise ConfigurationError(f"seed_root must be an unsigned 64-bit integer, got {cfg['seed_root']!r}")
    r = cfg["run"]
    if r["mode"] not in ("frozen", "coupled"):
        raise ConfigurationError(f"run.mode must be frozen or coupled, got {r['mode']!r}")
    for b in r["track"]:
        if b not in ("energy", "bd", "mv"):
            raise ConfigurationError(f"run.track entries must be energy, bd or mv, got {b!r}")
    if not isinstance(r["T"], (int, float)) or r["T"] < 0:
        raise ConfigurationError(f"run.T must be >= 0, got {r['T']!r}")
    grid, params, noise, init, ens = build_all(cfg)
    h = params.h
    nw = r["T"] / h
    if abs(nw - round(nw)) > 1e-9 * max(1.0, nw):
        raise ConfigurationError(f"run.T={r['T']} must be a multiple of params.h={h}")
    s = cfg["schedule"]
    if s["stages"]:
        from .limits import build_schedule
        build_schedule(s, params)
    if float(cfg["verify"]["tol_scale"]) < 0:
        raise ConfigurationError("verify.tol_scale must be >= 0")
    return grid, params, noise, init, ens

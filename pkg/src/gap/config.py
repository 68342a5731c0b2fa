"""Experiment configuration: one YAML tree, strict keys, explicit defaults.

Loading merges the user file over the defaults tree, rejects unknown keys,
type-checks leaves against the default values, and returns the fully
materialized dict.  The same dict is echoed into the run manifest so every
experiment is self-describing, and its canonical-JSON hash identifies it.
"""
from __future__ import annotations

import copy
import hashlib
import json

import yaml

from .dynamics import (SystemSpec, linear_gaussian_spec, lorenz63_spec,
                       lorenz96_forced_spec, lorenz96_spec)


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/out",
    "system": {
        "kind": "lorenz96",          # lorenz63 | lorenz96 | linear_gaussian | lorenz96_forced
        "dim": 40,
        "dt": 0.05,
        "substeps": 2,
        "forcing": 8.0,
        "spec_seed": 0,
        "damping": 0.6,
        "n_forcing": 8,
        "kappa": 0.1,
        "coupling": 3.0,
        "season_amp": 1.0,
        "period_steps": 200,
        "anom_std": 1.0,
        "sigma": 10.0,
        "rho": 28.0,
        "beta": 8.0 / 3.0,
    },
    "data": {
        "n_spinup": 500,
        "n_samples": 2000,
        "thin": 1,
        "cycle_len": 0,              # 0: no phase table in the climatology
    },
    "diffusion": {
        "beta_min": 0.1,
        "beta_max": 20.0,
        "n_steps": 100,
        "hidden_sizes": [128, 128],
        "epochs": 40,
        "lr": 0.001,
        "batch": 64,
        "analytic": False,           # linear_gaussian: use the exact score
    },
    "forecaster": {
        "kind": "perfect",           # perfect | imperfect_physics | learned_mlp
        "forcing_delta": 1.0,
        "halve_substeps": False,
        "hidden_sizes": [128, 128],
        "epochs": 60,
        "lr": 0.001,
        "batch": 64,
    },
    "sampler": {
        "method": "ddim",
        "n_steps": 100,
        "eta": 0.0,
        "churn": 0.0,
    },
    "conditioning": {
        "mode": "replace",
        "guidance_lr": 1.0,
        "sigma_tau_scale": 1.0,
        "travel_every": 10,
        "travel_tau": 10,
        "travel_rounds": 2,
        "tau_star_idx": 10,
    },
    "assimilation": {
        "window_steps": 10,
        "obs_every": 1,
        "ensemble_size": 32,
        "n_obs": 8,
        "sigma_o": 1.0,
        "layout": "random_fixed",
    },
    "prediction": {
        "lead_steps": 20,
        "n_members": 16,
    },
    "climate": {
        "n_steps": 1000,
        "thin_every": 0,             # 0: no thinned trajectory
        "cycle_len": 0,
    },
    "calibration": {
        "candidates": [5, 10, 20, 40],
        "n_ens": 8,
        "bias": 0.0,
    },
    "baseline": {
        "method": "kalman",          # kalman | enkf | persistence | climatology
        "inflation": 1.05,
    },
}


def _merge(defaults, user, path: str):
    if not isinstance(user, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    out = {}
    for key, dval in defaults.items():
        if key not in user:
            out[key] = copy.deepcopy(dval)
            continue
        uval = user[key]
        here = f"{path}.{key}" if path else key
        if isinstance(dval, dict):
            out[key] = _merge(dval, uval, here)
        else:
            out[key] = _check_leaf(dval, uval, here)
    unknown = set(user) - set(defaults)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown key(s) at {where}: {sorted(unknown)}")
    return out


def _check_leaf(dval, uval, path: str):
    if isinstance(dval, bool):
        if not isinstance(uval, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return uval
    if isinstance(dval, int) and not isinstance(dval, bool):
        if isinstance(uval, bool) or not isinstance(uval, int):
            raise ConfigError(f"{path}: expected an integer")
        return uval
    if isinstance(dval, float):
        if isinstance(uval, bool) or not isinstance(uval, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(uval)
    if isinstance(dval, str):
        if not isinstance(uval, str):
            raise ConfigError(f"{path}: expected a string")
        return uval
    if isinstance(dval, list):
        if not isinstance(uval, list):
            raise ConfigError(f"{path}: expected a list")
        return [v for v in uval]
    raise ConfigError(f"{path}: unsupported config value")


def materialize(user: dict | None) -> dict:
    return _merge(DEFAULTS, user or {}, "")


def load_config(path: str | None) -> dict:
    """Read a YAML config file and return the validated, materialized tree."""
    if path is None:
        return materialize({})
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse error: {exc}")
    if raw is None:
        raw = {}
    return materialize(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def system_spec_from_config(cfg: dict) -> SystemSpec:
    s = cfg["system"]
    kind = s["kind"]
    if kind == "lorenz63":
        return lorenz63_spec(dt=s["dt"], substeps=s["substeps"],
                             sigma=s["sigma"], rho=s["rho"], beta=s["beta"])
    if kind == "lorenz96":
        return lorenz96_spec(dim=s["dim"], forcing=s["forcing"], dt=s["dt"],
                             substeps=s["substeps"])
    if kind == "linear_gaussian":
        return linear_gaussian_spec(dim=s["dim"], dt=s["dt"],
                                    seed=s["spec_seed"], damping=s["damping"])
    if kind == "lorenz96_forced":
        return lorenz96_forced_spec(dim=s["dim"], n_forcing=s["n_forcing"],
                                    forcing=s["forcing"], dt=s["dt"],
                                    substeps=s["substeps"], kappa=s["kappa"],
                                    coupling=s["coupling"],
                                    season_amp=s["season_amp"],
                                    period_steps=s["period_steps"],
                                    anom_std=s["anom_std"])
    raise ConfigError(f"unknown system kind {kind!r}")

"""Run configuration: one flat record covering scenario, model, fitter,
planner and sensor settings, loadable from an INI-style file.

File format (all keys optional; unknown sections or keys are errors):

    [run]
    scenario = multi_sofa
    model = gmm
    n_trials = 25
    seed = 7

    [fit]
    k_max = 7
    alpha = 0.1

    [mpc]
    horizon_n = 10

    [sensor]
    n_rays = 180

CLI flags override file values, which override defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .fitting import FitConfig
from .planner import MpcConfig
from .world import SCENARIO_KINDS, SensorConfig

__all__ = ["RunConfig", "MODELS", "load_config", "apply_overrides"]

MODELS = ("gmm", "ellip1", "ellip2", "gmm_no_nll", "gmm_no_empty")

# scenario kinds with more than one obstacle get the larger component budget
_MULTI_OBJECT = ("multi_sofa", "mixed")


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "chair"
    model: str = "gmm"
    n_trials: int = 20
    step_cap: int = 500
    seed: int = 0
    workers: int = 1
    workspace_half: float = 5.0
    goal_radius: float = 0.3

    # fitter knobs; k_max=None resolves per scenario/model
    k_max: Optional[int] = None
    rho: float = 0.95
    alpha: float = 0.02
    beta: float = 1.0
    smoothing_s: float = 0.2
    focal_gamma: float = 2.0
    eps_reg: float = 1e-6
    step_size: float = 5e-2
    max_iters_cold: int = 300
    max_iters_warm: int = 40
    prune_weight: float = 0.02

    mpc: MpcConfig = field(default_factory=MpcConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)

    def __post_init__(self):
        if self.scenario not in SCENARIO_KINDS:
            raise ConfigError(
                f"unknown scenario {self.scenario!r}; expected one of {SCENARIO_KINDS}"
            )
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.n_trials < 1 or self.step_cap < 1 or self.workers < 1:
            raise ConfigError("n_trials, step_cap and workers must be >= 1")

    def effective_k(self) -> int:
        """Component budget: baselines pin K, the mixture models size by
        scenario (larger budget when several obstacles are present)."""
        if self.model == "ellip1":
            return 1
        if self.model == "ellip2":
            return 2
        if self.k_max is not None:
            return self.k_max
        return 7 if self.scenario in _MULTI_OBJECT else 5

    def fit_config(self, trial_seed: int) -> FitConfig:
        alpha = 0.0 if self.model == "gmm_no_nll" else self.alpha
        beta = 0.0 if self.model == "gmm_no_empty" else self.beta
        return FitConfig(
            k_max=self.effective_k(),
            rho=self.rho,
            alpha=alpha,
            beta=beta,
            smoothing_s=self.smoothing_s,
            focal_gamma=self.focal_gamma,
            eps_reg=self.eps_reg,
            step_size=self.step_size,
            max_iters_cold=self.max_iters_cold,
            max_iters_warm=self.max_iters_warm,
            seed=trial_seed,
            prune_weight=self.prune_weight,
        )


_RUN_KEYS = (
    "scenario",
    "model",
    "n_trials",
    "step_cap",
    "seed",
    "workers",
    "workspace_half",
    "goal_radius",
)
_FIT_KEYS = (
    "k_max",
    "rho",
    "alpha",
    "beta",
    "smoothing_s",
    "focal_gamma",
    "eps_reg",
    "step_size",
    "max_iters_cold",
    "max_iters_warm",
    "prune_weight",
)


def _field_names(cls) -> tuple:
    return tuple(f.name for f in dataclasses.fields(cls))


def _convert(raw: str, name: str):
    text = raw.strip()
    target = _TYPES[name]
    if target is str:
        return text
    try:
        return target(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


# explicit conversion table (dataclass annotations are strings under
# `from __future__ import annotations`, so they can't drive this)
_TYPES = {
    "scenario": str,
    "model": str,
    "n_trials": int,
    "step_cap": int,
    "seed": int,
    "workers": int,
    "workspace_half": float,
    "goal_radius": float,
    "k_max": int,
    "rho": float,
    "alpha": float,
    "beta": float,
    "smoothing_s": float,
    "focal_gamma": float,
    "eps_reg": float,
    "step_size": float,
    "max_iters_cold": int,
    "max_iters_warm": int,
    "prune_weight": float,
    # mpc
    "horizon_n": int,
    "dt": float,
    "q_pos": float,
    "r_u": float,
    "p_term": float,
    "u_max": float,
    "gamma_min": float,
    "gamma_max": float,
    "rho_min": float,
    "rho_max": float,
    "eps_dist": float,
    "sqp_iters": int,
    "robot_radius": float,
    # sensor
    "n_rays": int,
    "fov": float,
    "max_range": float,
    "noise_sigma": float,
    "dropout_p": float,
    "grid_n": int,
    "max_free_cells": int,
}


def load_config(path) -> RunConfig:
    """Parse an INI run configuration; unknown sections/keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    sections = {
        "run": _RUN_KEYS,
        "fit": _FIT_KEYS,
        "mpc": _field_names(MpcConfig),
        "sensor": tuple(k for k in _field_names(SensorConfig) if k != "seed"),
    }
    flat: dict = {}
    mpc_kw: dict = {}
    sensor_kw: dict = {}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in sections[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            value = _convert(raw, key)
            if section == "mpc":
                mpc_kw[key] = value
            elif section == "sensor":
                sensor_kw[key] = value
            else:
                flat[key] = value
    if mpc_kw:
        flat["mpc"] = MpcConfig(**mpc_kw)
    if sensor_kw:
        flat["sensor"] = SensorConfig(**sensor_kw)
    return RunConfig(**flat)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Return a copy with non-None overrides applied (CLI flags win)."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    if not clean:
        return cfg
    return dataclasses.replace(cfg, **clean)

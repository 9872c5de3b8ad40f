"""Shared fixtures.

The closed-loop suites are the expensive part of the acceptance run, and
several criteria read the same suite (the sofa mixture arm feeds validity,
compactness and the ablation baseline; the multi-sofa pair feeds navigation
and the barrier-invariance replay).  They are therefore built once per
session, keyed by (scenario, model, n_trials), and handed out by reference.
"""

import pytest

from gmipc.config import RunConfig
from gmipc.harness import run_suite, run_trial

ACCEPT_SEED = 2026


@pytest.fixture(scope="session")
def accept_seed() -> int:
    return ACCEPT_SEED


@pytest.fixture(scope="session")
def suite_cache():
    cache = {}

    def get(scenario: str, model: str, n_trials: int):
        key = (scenario, model, n_trials)
        if key not in cache:
            cfg = RunConfig(
                scenario=scenario, model=model, n_trials=n_trials, seed=ACCEPT_SEED
            )
            cache[key] = run_suite(cfg)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def small_trial_log():
    """One cheap closed-loop log for serialization and rendering tests."""
    cfg = RunConfig(scenario="chair", model="gmm", n_trials=1, step_cap=60, seed=7)
    return run_trial(cfg, 0)

"""Closed-loop trial orchestration and suite aggregation.

One trial runs the full loop: sense, fit (warm-started), prune, build
barriers, pick the adaptive relaxation, solve the MPC, step, measure.
Suites run many trials with seeds derived from (master seed, trial index)
only — never from the model — so cross-model comparisons are paired.

Serialization discipline: everything written to the canonical outputs
(per-trial CSV, summary CSV, step records) is a pure function of (config,
seeds), so re-running a suite reproduces the files byte for byte.  Wall
clock timings are real measurements and therefore live in a separate
sidecar file that is excluded from the byte-identity contract.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .config import RunConfig
from .errors import GmipcError, ScenarioGenerationError
from .fitting import FitResult, active_components, decode, fit_frame, init_cold
from .geometry import MixtureContract
from .losses import inclusion_loss, pointwise_inclusion_losses
from .metrics import TrialMetrics, compactness, inclusion_rate, mc_union_area, trial_risk
from .planner import barriers_from_contract, solve_mpc
from .world import (
    Observation,
    RobotState,
    Scenario,
    in_collision,
    make_scenario,
    merge_observations,
    sense,
    step_dynamics,
)

__all__ = [
    "TrialSeeds",
    "StepRecord",
    "TrialLog",
    "SuiteResult",
    "ProbeFit",
    "SceneFit",
    "derive_trial_seeds",
    "run_trial",
    "run_suite",
    "probe_fit",
    "scene_fit",
    "frozen_trial_risk",
    "trial_records_jsonl",
    "trials_csv",
    "summary_csv",
    "scenario_record",
    "write_suite_outputs",
]

STEP_MC_N = 8192  # per-step union-area estimate (logged)
TABLE_MC_N = 200_000  # final-step / table-grade union-area estimate


class TrialSeeds(NamedTuple):
    scenario: int
    sensor: int
    fit: int
    mc: int


def derive_trial_seeds(master_seed: int, trial_index: int) -> TrialSeeds:
    """Independent substreams per trial, shared across models (paired)."""
    state = np.random.SeedSequence((int(master_seed), int(trial_index))).generate_state(
        4, dtype=np.uint64
    )
    return TrialSeeds(*(int(v) for v in state))


# step indices stay far below 2**32, so this marks the end-of-trial
# table-grade evaluation without colliding with any per-step stream
_FINAL_MC_TAG = 1 << 32


def _step_mc_seed(mc_seed: int, t: int) -> int:
    return int(
        np.random.SeedSequence((mc_seed, t)).generate_state(1, dtype=np.uint64)[0]
    )


@dataclass(frozen=True)
class StepRecord:
    """One executed step.  x/y are the pre-step position, nx/ny post-step.

    ``components`` is the active (post-prune) contract the planner used,
    serialized as (weight, mu_x, mu_y, s11, s12, s22) per component; empty
    when the frame was degenerate (no evidence ever seen).
    Timing fields are excluded from canonical serialization.
    """

    step: int
    x: float
    y: float
    nx: float
    ny: float
    ux: float
    uy: float
    gamma: float
    feasible: bool
    degenerate: bool
    n_gt: int
    inclusion: Optional[float]
    incl_loss: Optional[float]
    union_area: Optional[float]
    components: tuple
    solve_time: float = 0.0
    fit_time: float = 0.0


@dataclass(frozen=True)
class TrialLog:
    trial_index: int
    model: str
    scenario_kind: str
    scenario_seed: int
    workspace_half: float
    start: tuple
    goal: tuple
    obstacles: tuple  # ((kind, ((x, y), ...)), ...)
    robot_radius: float
    rho: float
    records: tuple
    metrics: TrialMetrics
    reached: bool
    collided: bool
    final_perceived: tuple = ()  # last frame's sensor points, for rendering


@dataclass(frozen=True)
class SuiteResult:
    cfg: RunConfig
    logs: tuple
    failures: tuple  # (trial_index, message)
    summary: dict


@dataclass(frozen=True)
class ProbeFit:
    """Single-frame fit from the start pose (no navigation)."""

    scenario: Scenario
    fit: FitResult
    active: MixtureContract
    seeds: TrialSeeds


@dataclass(frozen=True)
class SceneFit:
    """Cold fit on scans merged from a ring of vantage poses."""

    scenario: Scenario
    observation: Observation
    fit: FitResult
    active: MixtureContract
    seeds: TrialSeeds


def _serialize_contract(m: MixtureContract) -> tuple:
    out = []
    for c in m.components:
        out.append(
            (
                float(c.weight),
                float(c.mu.x),
                float(c.mu.y),
                float(c.sigma.a11),
                float(c.sigma.a12),
                float(c.sigma.a22),
            )
        )
    return tuple(out)


def run_trial(cfg: RunConfig, trial_index: int) -> TrialLog:
    """Execute one closed-loop trial; deterministic in (cfg, trial_index)."""
    seeds = derive_trial_seeds(cfg.seed, trial_index)
    scenario = make_scenario(cfg.scenario, seeds.scenario, cfg.workspace_half)
    sensor = dataclasses.replace(cfg.sensor, seed=seeds.sensor)
    fitcfg = cfg.fit_config(seeds.fit)

    state = RobotState(scenario.start, 0)
    goal = np.array([scenario.goal.x, scenario.goal.y])
    prev = None
    records: list[StepRecord] = []
    reached = False
    collided = False
    final_active: Optional[MixtureContract] = None
    final_gt = None
    last_perceived = np.zeros((0, 2))

    for t in range(cfg.step_cap):
        obs = sense(scenario, state, sensor)
        last_perceived = obs.perceived
        t0 = time.perf_counter()
        fit = fit_frame(prev, obs, fitcfg)
        fit_time = time.perf_counter() - t0
        if fit.degenerate:
            active = None
            barriers = []
        else:
            prev = fit.params
            active = active_components(fit.contract, fitcfg.prune_weight)
            barriers = barriers_from_contract(active, cfg.mpc.robot_radius)

        plan = solve_mpc(state, scenario.goal, barriers, cfg.mpc)
        nstate = step_dynamics(state, plan.u0, cfg.mpc.dt, cfg.workspace_half)

        n_gt = len(obs.gt_points)
        if n_gt and active is not None:
            incl = inclusion_rate(active, obs.gt_points)
            loss = inclusion_loss(active, obs.gt_points, fitcfg.smoothing_s)
            area = mc_union_area(active, STEP_MC_N, _step_mc_seed(seeds.mc, t)).area
            final_active = active
            final_gt = obs.gt_points
        else:
            incl = loss = area = None

        records.append(
            StepRecord(
                step=t,
                x=state.pos.x,
                y=state.pos.y,
                nx=nstate.pos.x,
                ny=nstate.pos.y,
                ux=float(plan.u0[0]),
                uy=float(plan.u0[1]),
                gamma=plan.gamma_used,
                feasible=plan.feasible,
                degenerate=active is None,
                n_gt=n_gt,
                inclusion=incl,
                incl_loss=loss,
                union_area=area,
                components=_serialize_contract(active) if active is not None else (),
                solve_time=plan.solve_time,
                fit_time=fit_time,
            )
        )
        state = nstate
        pos = np.array([state.pos.x, state.pos.y])
        if in_collision(scenario, pos, cfg.mpc.robot_radius):
            collided = True
            break
        if float(np.hypot(*(pos - goal))) <= cfg.goal_radius:
            reached = True
            break

    metrics = _trial_metrics(
        cfg, scenario, records, reached, collided, final_active, final_gt, seeds
    )
    return TrialLog(
        trial_index=trial_index,
        model=cfg.model,
        scenario_kind=cfg.scenario,
        scenario_seed=seeds.scenario,
        workspace_half=cfg.workspace_half,
        start=(scenario.start.x, scenario.start.y),
        goal=(scenario.goal.x, scenario.goal.y),
        obstacles=tuple(
            (ob.kind, tuple(map(tuple, ob.vertices.tolist()))) for ob in scenario.obstacles
        ),
        robot_radius=cfg.mpc.robot_radius,
        rho=cfg.rho,
        records=tuple(records),
        metrics=metrics,
        reached=reached,
        collided=collided,
        final_perceived=tuple(map(tuple, last_perceived.tolist())),
    )


def _trial_metrics(cfg, scenario, records, reached, collided, final_active, final_gt, seeds):
    incl_steps = [r.inclusion for r in records if r.inclusion is not None]
    nan = float("nan")
    mean_all = float(np.mean(incl_steps)) if incl_steps else nan
    validity_all = (
        float(np.mean([v >= 0.95 for v in incl_steps])) if incl_steps else nan
    )
    final_incl = incl_steps[-1] if incl_steps else nan
    validity_final = float(final_incl >= 0.95) if incl_steps else nan

    if final_active is not None and final_gt is not None and len(final_gt):
        comp_final = compactness(
            final_active, final_gt, TABLE_MC_N, _step_mc_seed(seeds.mc, _FINAL_MC_TAG)
        )
    else:
        comp_final = nan

    path = sum(math.hypot(r.nx - r.x, r.ny - r.y) for r in records)
    if records:
        gap = math.hypot(records[-1].nx - scenario.goal.x, records[-1].ny - scenario.goal.y)
    else:
        gap = math.hypot(scenario.start.x - scenario.goal.x, scenario.start.y - scenario.goal.y)
    # completing the path with the remaining gap keeps the ratio a true
    # efficiency (<= 1) even though trials stop within the goal radius
    path_complete = path + gap
    straight = math.hypot(scenario.goal.x - scenario.start.x, scenario.goal.y - scenario.start.y)
    efficiency = 1.0 if path_complete <= 0.0 else min(straight / path_complete, 1.0)

    ctrl_mean = float(np.mean([r.solve_time for r in records])) if records else 0.0
    return TrialMetrics(
        mean_inclusion_all=mean_all,
        mean_inclusion_final=final_incl,
        validity_all=validity_all,
        validity_final=validity_final,
        mean_compactness_final=comp_final,
        steps=len(records),
        path_len=path,
        efficiency=efficiency,
        ctrl_time_mean=ctrl_mean,
        success=bool(reached and not collided),
    )


# ---------------------------------------------------------------------------
# fit-only probes (confidence/ablation studies, frozen-policy risk)
# ---------------------------------------------------------------------------

def probe_fit(cfg: RunConfig, trial_index: int) -> ProbeFit:
    """Sense once from the start pose and cold-fit; no navigation."""
    seeds = derive_trial_seeds(cfg.seed, trial_index)
    scenario = make_scenario(cfg.scenario, seeds.scenario, cfg.workspace_half)
    sensor = dataclasses.replace(cfg.sensor, seed=seeds.sensor)
    fitcfg = cfg.fit_config(seeds.fit)
    obs = sense(scenario, RobotState(scenario.start, 0), sensor)
    fit = fit_frame(None, obs, fitcfg)
    active = fit.contract if fit.degenerate else active_components(fit.contract, fitcfg.prune_weight)
    return ProbeFit(scenario, fit, active, seeds)


def scene_fit(cfg: RunConfig, trial_index: int, n_vantages: int = 8) -> SceneFit:
    """Sense the whole scene from a boundary ring and cold-fit once.

    Navigation-free analog of a full perception snapshot: scans taken from
    ``n_vantages`` poses on a ring are merged so every obstacle is seen from
    several sides.  The vantage index doubles as the sensing frame index,
    which keeps each scan on its own RNG substream; vantages falling inside
    an obstacle are skipped.
    """
    seeds = derive_trial_seeds(cfg.seed, trial_index)
    scenario = make_scenario(cfg.scenario, seeds.scenario, cfg.workspace_half)
    sensor = dataclasses.replace(cfg.sensor, seed=seeds.sensor)
    radius = 0.85 * cfg.workspace_half
    frames = []
    for v in range(n_vantages):
        ang = 2.0 * math.pi * v / n_vantages
        pos = (radius * math.cos(ang), radius * math.sin(ang))
        if in_collision(scenario, pos, 0.0):
            continue
        frames.append(sense(scenario, RobotState(pos, v), sensor))
    obs = merge_observations(frames)
    fitcfg = cfg.fit_config(seeds.fit)
    fit = fit_frame(None, obs, fitcfg)
    active = fit.contract if fit.degenerate else active_components(fit.contract, fitcfg.prune_weight)
    return SceneFit(scenario, obs, fit, active, seeds)


def frozen_trial_risk(cfg: RunConfig, trial_index: int) -> float:
    """Trial risk under the frozen policy (cold init decoded, no optimizing).

    The policy is a fixed map from observation to contract, so trials are
    i.i.d. draws of a bounded loss — exactly the regime the Hoeffding-style
    trial bound assumes.  The risk averages per-point clipped losses, not
    one clipped aggregate: a single far-out point would otherwise pin every
    trial at the clip value and hide the trial-to-trial variation the bound
    is about.  Frames with no evidence contribute zero loss.
    """
    seeds = derive_trial_seeds(cfg.seed, trial_index)
    scenario = make_scenario(cfg.scenario, seeds.scenario, cfg.workspace_half)
    sensor = dataclasses.replace(cfg.sensor, seed=seeds.sensor)
    fitcfg = cfg.fit_config(seeds.fit)
    obs = sense(scenario, RobotState(scenario.start, 0), sensor)
    if len(obs.perceived) == 0 or len(obs.gt_points) == 0:
        return 0.0
    contract = decode(init_cold(obs, fitcfg), fitcfg)
    losses = pointwise_inclusion_losses(contract, obs.gt_points, fitcfg.smoothing_s)
    return trial_risk(losses)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def run_suite(cfg: RunConfig, out_dir=None) -> SuiteResult:
    """Run cfg.n_trials trials; aggregate; optionally write output files.

    Per-trial scenario generation failures are recorded and skipped; the
    suite always completes.  With cfg.workers > 1 trials run in a process
    pool and are reduced in trial order, so outputs are identical to the
    sequential run.
    """
    indices = list(range(cfg.n_trials))
    logs: list[TrialLog] = []
    failures: list[tuple] = []
    if cfg.workers > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = {i: pool.submit(run_trial, cfg, i) for i in indices}
            for i in indices:
                try:
                    logs.append(futs[i].result())
                except (ScenarioGenerationError, GmipcError) as exc:
                    failures.append((i, str(exc)))
    else:
        for i in indices:
            try:
                logs.append(run_trial(cfg, i))
            except (ScenarioGenerationError, GmipcError) as exc:
                failures.append((i, str(exc)))

    summary = aggregate_summary(cfg, logs, failures)
    result = SuiteResult(cfg, tuple(logs), tuple(failures), summary)
    if out_dir is not None:
        write_suite_outputs(result, out_dir)
    return result


def aggregate_summary(cfg: RunConfig, logs, failures) -> dict:
    def nanmean(values):
        arr = np.asarray(list(values), dtype=float)
        ok = arr[np.isfinite(arr)]
        return float(ok.mean()) if len(ok) else float("nan")

    ms = [lg.metrics for lg in logs]
    return {
        "scenario": cfg.scenario,
        "model": cfg.model,
        "n_trials": len(logs),
        "n_failed": len(failures),
        "success_rate": nanmean([float(m.success) for m in ms]),
        "mean_efficiency": nanmean([m.efficiency for m in ms]),
        "inclusion_final": nanmean([m.mean_inclusion_final for m in ms]),
        "inclusion_all": nanmean([m.mean_inclusion_all for m in ms]),
        "validity_final": nanmean([m.validity_final for m in ms]),
        "validity_all": nanmean([m.validity_all for m in ms]),
        "compactness_final": nanmean([m.mean_compactness_final for m in ms]),
        "mean_steps": nanmean([m.steps for m in ms]),
    }


# ---------------------------------------------------------------------------
# serialization (canonical outputs exclude all wall-clock fields)
# ---------------------------------------------------------------------------

_RECORD_FIELDS = (
    "step",
    "x",
    "y",
    "nx",
    "ny",
    "ux",
    "uy",
    "gamma",
    "feasible",
    "degenerate",
    "n_gt",
    "inclusion",
    "incl_loss",
    "union_area",
    "components",
)

_TRIAL_CSV_FIELDS = (
    "trial",
    "scenario",
    "scenario_seed",
    "model",
    "success",
    "collided",
    "steps",
    "path_len",
    "efficiency",
    "mean_inclusion_all",
    "mean_inclusion_final",
    "validity_all",
    "validity_final",
    "compactness_final",
)


def _jsonable(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def trial_records_jsonl(log: TrialLog) -> str:
    """Canonical per-step records: one JSON object per line, sorted keys,
    timing fields omitted."""
    lines = []
    for r in log.records:
        obj = {k: _jsonable(getattr(r, k)) for k in _RECORD_FIELDS}
        obj["trial"] = log.trial_index
        lines.append(json.dumps(obj, sort_keys=True))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def trials_csv(logs) -> str:
    rows = [",".join(_TRIAL_CSV_FIELDS)]
    for lg in logs:
        m = lg.metrics
        rows.append(
            ",".join(
                _fmt(v)
                for v in (
                    lg.trial_index,
                    lg.scenario_kind,
                    lg.scenario_seed,
                    lg.model,
                    m.success,
                    lg.collided,
                    m.steps,
                    m.path_len,
                    m.efficiency,
                    m.mean_inclusion_all,
                    m.mean_inclusion_final,
                    m.validity_all,
                    m.validity_final,
                    m.mean_compactness_final,
                )
            )
        )
    return "\n".join(rows) + "\n"


def summary_csv(summaries) -> str:
    """One row per (scenario, model) summary dict."""
    if isinstance(summaries, dict):
        summaries = [summaries]
    fields = (
        "scenario",
        "model",
        "n_trials",
        "n_failed",
        "success_rate",
        "mean_efficiency",
        "inclusion_final",
        "inclusion_all",
        "validity_final",
        "validity_all",
        "compactness_final",
        "mean_steps",
    )
    rows = [",".join(fields)]
    for s in summaries:
        rows.append(",".join(_fmt(s[f]) for f in fields))
    return "\n".join(rows) + "\n"


def scenario_record(log: TrialLog) -> dict:
    return {
        "trial": log.trial_index,
        "kind": log.scenario_kind,
        "seed": log.scenario_seed,
        "workspace_half": log.workspace_half,
        "start": list(log.start),
        "goal": list(log.goal),
        "obstacles": [
            {"kind": kind, "vertices": [list(v) for v in verts]}
            for kind, verts in log.obstacles
        ],
    }


def timings_csv(logs) -> str:
    rows = ["trial,ctrl_time_mean,fit_time_mean"]
    for lg in logs:
        fit_mean = (
            float(np.mean([r.fit_time for r in lg.records])) if lg.records else 0.0
        )
        rows.append(f"{lg.trial_index},{lg.metrics.ctrl_time_mean!r},{fit_mean!r}")
    return "\n".join(rows) + "\n"


def write_suite_outputs(result: SuiteResult, out_dir) -> dict:
    """Write trials.csv, summary.csv, records.jsonl, scenarios.jsonl and the
    (non-canonical) timings.csv; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{result.cfg.scenario}_{result.cfg.model}"
    paths = {
        "trials": out / f"{stem}_trials.csv",
        "summary": out / f"{stem}_summary.csv",
        "records": out / f"{stem}_records.jsonl",
        "scenarios": out / f"{stem}_scenarios.jsonl",
        "timings": out / f"{stem}_timings.csv",
    }
    paths["trials"].write_text(trials_csv(result.logs), encoding="utf-8")
    paths["summary"].write_text(summary_csv(result.summary), encoding="utf-8")
    records = "".join(trial_records_jsonl(lg) for lg in result.logs)
    paths["records"].write_text(records, encoding="utf-8")
    scen = "\n".join(json.dumps(scenario_record(lg), sort_keys=True) for lg in result.logs)
    paths["scenarios"].write_text(scen + "\n" if scen else "", encoding="utf-8")
    paths["timings"].write_text(timings_csv(result.logs), encoding="utf-8")
    return paths

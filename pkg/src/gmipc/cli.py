"""Command-line entry point.

Subcommands:

* ``simulate``   — run one closed-loop suite, write CSV/JSONL outputs
* ``validity``   — paired coverage/compactness tables (mixture vs single ellipse)
* ``confidence`` — paired equal-area solved-confidence comparison
* ``navigate``   — paired navigation outcomes (success and efficiency)
* ``ablate``     — fitted union area with and without the empty-space term
* ``plot``       — render one trial to SVG next to its step records
* ``selftest``   — fast built-in property checks

Flags override config-file values which override defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .config import MODELS, RunConfig, apply_overrides, load_config
from .errors import GmipcError
from .harness import (
    TABLE_MC_N,
    probe_fit,
    run_suite,
    run_trial,
    scene_fit,
    summary_csv,
    trial_records_jsonl,
)
from .metrics import inclusion_rate, mc_union_area, solved_confidence
from .plots import emit_plot
from .world import SCENARIO_KINDS, RobotState, sense

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gmipc",
        description="Mixture-of-ellipses obstacle contracts with barrier-constrained MPC",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("simulate", "run one suite of closed-loop trials"),
        ("validity", "coverage/compactness table, mixture vs single ellipse"),
        ("confidence", "equal-area solved confidence, mixture vs single ellipse"),
        ("navigate", "navigation success/efficiency, mixture vs single ellipse"),
        ("ablate", "union area with vs without the empty-space penalty"),
        ("plot", "render one trial to SVG"),
        ("selftest", "run quick built-in checks"),
    ):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("--scenario", choices=SCENARIO_KINDS, default=None)
        q.add_argument("--model", choices=MODELS, default=None)
        q.add_argument("--trials", type=int, default=None, help="number of trials")
        q.add_argument("--seed", type=int, default=None, help="master seed")
        q.add_argument("--config", type=str, default=None, help="INI config path")
        q.add_argument("--out", type=str, default="out", help="output directory")
        q.add_argument("--workers", type=int, default=None)
    return p


def _config_from_args(args, **forced) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(
        cfg,
        scenario=args.scenario,
        model=args.model,
        n_trials=args.trials,
        seed=args.seed,
        workers=args.workers,
    )
    return apply_overrides(cfg, **forced) if forced else cfg


def _cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    result = run_suite(cfg, out_dir=args.out)
    print(summary_csv(result.summary), end="")
    for idx, msg in result.failures:
        print(f"trial {idx} failed: {msg}", file=sys.stderr)
    return 0


def _paired_suites(args, scenario_default: str, models=("gmm", "ellip1")):
    base = _config_from_args(args)
    if args.scenario is None:
        base = apply_overrides(base, scenario=scenario_default)
    results = []
    for model in models:
        cfg = apply_overrides(base, model=model)
        results.append(run_suite(cfg, out_dir=args.out))
    return results


def _cmd_validity(args) -> int:
    results = _paired_suites(args, scenario_default="chair")
    combined = summary_csv([r.summary for r in results])
    Path(args.out).mkdir(parents=True, exist_ok=True)
    path = Path(args.out) / f"validity_{results[0].cfg.scenario}_summary.csv"
    path.write_text(combined, encoding="utf-8")
    print(combined, end="")
    print(f"wrote {path}")
    return 0


def _cmd_navigate(args) -> int:
    results = _paired_suites(args, scenario_default="multi_sofa")
    combined = summary_csv([r.summary for r in results])
    Path(args.out).mkdir(parents=True, exist_ok=True)
    path = Path(args.out) / f"navigate_{results[0].cfg.scenario}_summary.csv"
    path.write_text(combined, encoding="utf-8")
    print(combined, end="")
    print(f"wrote {path}")
    return 0


def _cmd_confidence(args) -> int:
    """Fit both models to whole-scene scans; at the true footprint area,
    report the confidence each model's union affords."""
    base = _config_from_args(args)
    if args.scenario is None:
        base = apply_overrides(base, scenario="multi_sofa")
    rows = ["trial,target_area,rho_gmm,rho_ellip,saturated_gmm,saturated_ellip"]
    gaps = []
    for i in range(base.n_trials):
        pg = scene_fit(apply_overrides(base, model="gmm"), i)
        pe = scene_fit(apply_overrides(base, model="ellip1"), i)
        target = sum(o.area for o in pg.scenario.obstacles)
        sg = solved_confidence(pg.active, target, TABLE_MC_N, pg.seeds.mc)
        se = solved_confidence(pe.active, target, TABLE_MC_N, pe.seeds.mc)
        gaps.append(sg.rho - se.rho)
        rows.append(
            f"{i},{target!r},{sg.rho!r},{se.rho!r},{int(sg.saturated)},{int(se.saturated)}"
        )
    Path(args.out).mkdir(parents=True, exist_ok=True)
    path = Path(args.out) / f"confidence_{base.scenario}_trials.csv"
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"mean solved-confidence gap (gmm - ellip1): {float(np.mean(gaps)):.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_ablate(args) -> int:
    base = _config_from_args(args)
    if args.scenario is None:
        base = apply_overrides(base, scenario="sofa")
    rows = ["trial,area_full,area_no_empty,incl_full,incl_no_empty"]
    areas_full, areas_none = [], []
    for i in range(base.n_trials):
        pf = probe_fit(apply_overrides(base, model="gmm"), i)
        pn = probe_fit(apply_overrides(base, model="gmm_no_empty"), i)
        af = mc_union_area(pf.active, TABLE_MC_N, pf.seeds.mc).area
        an = mc_union_area(pn.active, TABLE_MC_N, pn.seeds.mc).area
        incf = incn = float("nan")
        sensor = dataclasses.replace(base.sensor, seed=pf.seeds.sensor)
        gt = sense(pf.scenario, RobotState(pf.scenario.start, 0), sensor).gt_points
        if len(gt):
            incf = inclusion_rate(pf.active, gt)
            incn = inclusion_rate(pn.active, gt)
        areas_full.append(af)
        areas_none.append(an)
        rows.append(f"{i},{af!r},{an!r},{incf!r},{incn!r}")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    path = Path(args.out) / f"ablate_{base.scenario}_trials.csv"
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    ratio = float(np.mean(areas_none) / np.mean(areas_full))
    print(f"area ratio (no empty-space term / full): {ratio:.3f}")
    print(f"wrote {path}")
    return 0


def _cmd_plot(args) -> int:
    cfg = _config_from_args(args)
    log = run_trial(cfg, 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"trial_{cfg.scenario}_{cfg.model}_{cfg.seed}"
    svg = out / f"{stem}.svg"
    jsonl = out / f"{stem}_records.jsonl"
    emit_plot(log, svg)
    jsonl.write_text(trial_records_jsonl(log), encoding="utf-8")
    print(f"wrote {svg}")
    print(f"wrote {jsonl}")
    return 0


def _cmd_selftest(args) -> int:
    """A fast subset of the property suite; exits nonzero on any failure."""
    import math

    from .fitting import FitConfig, composite_loss_and_grad, fit_frame, init_cold
    from .geometry import (
        GaussianComponent,
        MixtureContract,
        Point2,
        SpdMat2,
        chi2_quantile_2d,
        mahalanobis_sq,
    )
    from .losses import coverage_prob
    from .metrics import pac_gap
    from .world import RobotState, make_scenario, sense

    checks: list[tuple[str, bool]] = []

    tau = chi2_quantile_2d(0.95)
    checks.append(("chi-square quantile (rho=0.95)", abs(tau - 5.991) < 5e-3))

    comp = GaussianComponent(Point2(0.0, 0.0), SpdMat2(1.0, 0.3, 0.5), 1.0)
    from .geometry import ellipse_from_component

    e = ellipse_from_component(comp, tau)
    bnd = e.boundary_points(32)
    worst = max(abs(mahalanobis_sq(p, comp.mu, comp.sigma) - tau) for p in bnd)
    checks.append(("ellipse boundary solves the distance equation", worst < 1e-9))

    rng = np.random.default_rng(0)
    ok_bound = True
    for _ in range(200):
        m = MixtureContract(
            (GaussianComponent(Point2(*rng.normal(size=2)), SpdMat2(1.0, 0.0, 1.0), 1.0),),
            0.95,
        )
        p = coverage_prob(m, rng.normal(size=2), 0.5)
        if 1.0 - p > -math.log(p) + 1e-12:
            ok_bound = False
    checks.append(("miscoverage bound", ok_bound))

    checks.append(("pac gap closed form", abs(pac_gap(100, 0.05) - 0.1224) < 1e-4))

    scen = make_scenario("chair", 11)
    cfg = FitConfig(k_max=3, seed=7, max_iters_cold=60)
    obs = sense(scen, RobotState(scen.start, 0), dataclasses.replace(RunConfig().sensor, seed=3))
    if len(obs.perceived):
        params = init_cold(obs, cfg)
        rep = composite_loss_and_grad(params, obs, cfg)
        fd_ok = _quick_gradcheck(params, obs, cfg, rep)
        checks.append(("analytic gradient matches finite differences", fd_ok))
        res = fit_frame(None, obs, cfg)
        checks.append(("fit reduces the composite loss", res.final_loss.total <= rep.total + 1e-12))

    failed = 0
    for name, ok in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        failed += 0 if ok else 1
    return 1 if failed else 0


def _quick_gradcheck(params, obs, cfg, rep) -> bool:
    from .fitting import FitParams, composite_loss_and_grad

    vec = params.as_vector()
    idx = np.linspace(0, len(vec) - 1, 6).astype(int)
    for i in idx:
        h = 1e-5
        vp, vm = vec.copy(), vec.copy()
        vp[i] += h
        vm[i] -= h
        fp = composite_loss_and_grad(FitParams.from_vector(vp, params.k), obs, cfg).total
        fm = composite_loss_and_grad(FitParams.from_vector(vm, params.k), obs, cfg).total
        fd = (fp - fm) / (2 * h)
        if abs(fd - rep.grad[i]) > 1e-4 * max(1.0, abs(fd)):
            return False
    return True


_COMMANDS = {
    "simulate": _cmd_simulate,
    "validity": _cmd_validity,
    "confidence": _cmd_confidence,
    "navigate": _cmd_navigate,
    "ablate": _cmd_ablate,
    "plot": _cmd_plot,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except GmipcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""gmipc: union-of-ellipses obstacle contracts with barrier-constrained MPC.

Fit a weighted union of Gaussian confidence ellipses to noisy 2D obstacle
observations (coverage + likelihood + empty-space objective, analytic
gradients, per-frame warm-started Adam), turn the active components into
control-barrier constraints for a receding-horizon planner, and evaluate
the whole loop — coverage validity, compactness, solved confidence,
navigation outcomes, trial-level risk concentration — in a seeded 2D
simulator.
"""

from .config import MODELS, RunConfig, apply_overrides, load_config
from .errors import (
    ArgumentError,
    ConfigError,
    DomainError,
    GmipcError,
    InvariantViolation,
    ScenarioGenerationError,
    UndefinedMetricError,
)
from .fitting import (
    FitConfig,
    FitParams,
    FitResult,
    LossReport,
    active_components,
    composite_loss_and_grad,
    decode,
    encode,
    fit_frame,
    init_cold,
)
from .geometry import (
    ConfidenceEllipse,
    GaussianComponent,
    MixtureContract,
    Point2,
    SpdMat2,
    canonical_angle,
    chi2_quantile_2d,
    contract_contains,
    ellipse_from_component,
    mahalanobis_sq,
)
from .harness import (
    ProbeFit,
    SceneFit,
    StepRecord,
    SuiteResult,
    TrialLog,
    derive_trial_seeds,
    frozen_trial_risk,
    probe_fit,
    run_suite,
    run_trial,
    scene_fit,
    trial_records_jsonl,
    trials_csv,
    write_suite_outputs,
)
from .losses import (
    FreeCellSet,
    LossWeights,
    coverage_prob,
    empty_loss,
    hard_coverage,
    inclusion_loss,
    nll_loss,
    pointwise_inclusion_losses,
    soft_membership,
)
from .metrics import (
    AreaEstimate,
    RiskEstimate,
    SolvedConfidence,
    StepMetrics,
    TrialMetrics,
    compactness,
    inclusion_rate,
    mc_union_area,
    pac_gap,
    solved_confidence,
    trial_risk,
)
from .planner import (
    BarrierSpec,
    MpcConfig,
    PlanResult,
    adaptive_gamma,
    barrier_value,
    barriers_from_contract,
    safe_barrier_value,
    solve_mpc,
)
from .plots import emit_plot
from .world import (
    Observation,
    Obstacle,
    RobotState,
    Scenario,
    SensorConfig,
    in_collision,
    make_scenario,
    sense,
    step_dynamics,
)

__version__ = "0.1.0"

"""Evaluation quantities for fitted contracts and closed-loop trials.

Area-type quantities are Monte-Carlo estimates over the tight axis-aligned
bounding box of the component ellipses; all randomness is via explicit
seeds so repeated evaluations agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ArgumentError, DomainError, UndefinedMetricError
from .geometry import (
    MixtureContract,
    chi2_quantile_2d,
    collect_points,
    ellipse_from_component,
    mahalanobis_sq_points,
)

__all__ = [
    "StepMetrics",
    "TrialMetrics",
    "RiskEstimate",
    "AreaEstimate",
    "SolvedConfidence",
    "inclusion_rate",
    "mc_union_area",
    "compactness",
    "solved_confidence",
    "pac_gap",
    "trial_risk",
]


@dataclass(frozen=True)
class StepMetrics:
    inclusion_rate: float
    union_area: float
    compactness: float
    n_gt: int

    def __post_init__(self):
        if not (0.0 <= self.inclusion_rate <= 1.0):
            raise ArgumentError(f"inclusion_rate {self.inclusion_rate} outside [0, 1]")
        if self.union_area < 0.0:
            raise ArgumentError("union_area must be >= 0")


@dataclass(frozen=True)
class TrialMetrics:
    mean_inclusion_all: float
    mean_inclusion_final: float
    validity_all: float
    validity_final: float
    mean_compactness_final: float
    steps: int
    path_len: float
    efficiency: float
    ctrl_time_mean: float
    success: bool

    def __post_init__(self):
        if self.efficiency > 1.0 + 1e-9:
            raise ArgumentError(f"efficiency {self.efficiency} exceeds 1")


@dataclass(frozen=True)
class RiskEstimate:
    """Empirical trial risk with its Hoeffding deviation term."""

    m_trials: int
    mean_trial_loss: float
    hoeffding_gap: float
    delta: float

    def __post_init__(self):
        expected = pac_gap(self.m_trials, self.delta)
        if abs(self.hoeffding_gap - expected) > 1e-12 * max(1.0, expected):
            raise ArgumentError("hoeffding_gap inconsistent with (m_trials, delta)")


class AreaEstimate(NamedTuple):
    area: float
    stderr: float
    n_samples: int


class SolvedConfidence(NamedTuple):
    rho: float
    saturated: bool


def inclusion_rate(m: MixtureContract, gt_points) -> float:
    """Fraction of points inside the union (hard membership at tau)."""
    pts = collect_points(gt_points)
    if len(pts) == 0:
        raise UndefinedMetricError("inclusion_rate over an empty point set")
    means, covs, _ = m.as_arrays()
    d2 = mahalanobis_sq_points(pts, means, covs)
    return float(np.mean((d2 <= m.tau).any(axis=1)))


def _union_bbox(m: MixtureContract, tau: float | None = None):
    """Tight axis-aligned bounding box of the component tau-ellipses."""
    tau = m.tau if tau is None else tau
    lo = np.array([math.inf, math.inf])
    hi = -lo
    for comp in m.components:
        e = ellipse_from_component(comp, tau)
        ct, st = math.cos(e.theta), math.sin(e.theta)
        ex = math.hypot(e.a * ct, e.b * st)
        ey = math.hypot(e.a * st, e.b * ct)
        c = np.array([e.center.x, e.center.y])
        lo = np.minimum(lo, c - [ex, ey])
        hi = np.maximum(hi, c + [ex, ey])
    return lo, hi


def mc_union_area(m: MixtureContract, n_samples: int, seed: int) -> AreaEstimate:
    """Monte-Carlo union area over the ellipses' bounding box.

    Standard error is the binomial one scaled by the box area.
    """
    if n_samples < 1000:
        raise DomainError(f"n_samples must be >= 1000, got {n_samples}")
    lo, hi = _union_bbox(m)
    box_area = float(np.prod(hi - lo))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 2))
    means, covs, _ = m.as_arrays()
    d2 = mahalanobis_sq_points(pts, means, covs)
    p_hat = float(np.mean((d2 <= m.tau).any(axis=1)))
    se = box_area * math.sqrt(p_hat * (1.0 - p_hat) / n_samples)
    return AreaEstimate(box_area * p_hat, se, n_samples)


def compactness(m: MixtureContract, gt_points, n_samples: int, seed: int) -> float:
    """Covered ground-truth point count per square meter of union area."""
    pts = collect_points(gt_points)
    if len(pts) == 0:
        raise UndefinedMetricError("compactness over an empty point set")
    means, covs, _ = m.as_arrays()
    d2 = mahalanobis_sq_points(pts, means, covs)
    covered = int(np.sum((d2 <= m.tau).any(axis=1)))
    est = mc_union_area(m, n_samples, seed)
    if est.area <= 0.0:
        raise UndefinedMetricError("compactness of a zero-area union")
    return covered / est.area


_RHO_LO = 1e-4
_RHO_HI = 1.0 - 1e-6
_SOLVE_ITERS = 60
_SOLVE_REL_TOL = 0.01


def solved_confidence(
    m: MixtureContract, target_area: float, n_samples: int, seed: int
) -> SolvedConfidence:
    """Confidence level at which the union area matches target_area.

    One fixed sample set is drawn over the bounding box at the upper rho
    bound; each sample's minimum squared Mahalanobis distance is
    precomputed, so the estimated area is exactly monotone in rho and
    bisection is well posed.  Unreachable targets return the clamped bound
    with ``saturated`` set.
    """
    if not target_area > 0.0:
        raise DomainError(f"target_area must be positive, got {target_area}")
    if n_samples < 1000:
        raise DomainError(f"n_samples must be >= 1000, got {n_samples}")
    lo, hi = _union_bbox(m, tau=chi2_quantile_2d(_RHO_HI))
    box_area = float(np.prod(hi - lo))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 2))
    means, covs, _ = m.as_arrays()
    min_d2 = mahalanobis_sq_points(pts, means, covs).min(axis=1)

    def area_at(rho: float) -> float:
        return box_area * float(np.mean(min_d2 <= chi2_quantile_2d(rho)))

    if area_at(_RHO_HI) < target_area:
        return SolvedConfidence(_RHO_HI, True)
    if area_at(_RHO_LO) > target_area:
        return SolvedConfidence(_RHO_LO, True)
    lo_r, hi_r = _RHO_LO, _RHO_HI
    rho = 0.5 * (lo_r + hi_r)
    for _ in range(_SOLVE_ITERS):
        rho = 0.5 * (lo_r + hi_r)
        a = area_at(rho)
        if abs(a - target_area) <= _SOLVE_REL_TOL * target_area:
            break
        if a < target_area:
            lo_r = rho
        else:
            hi_r = rho
    return SolvedConfidence(rho, False)


def pac_gap(m_trials: int, delta: float) -> float:
    """Hoeffding deviation sqrt(ln(1/delta) / (2 M)) for [0,1]-valued trials."""
    if m_trials < 1:
        raise DomainError(f"m_trials must be >= 1, got {m_trials}")
    if not (0.0 < delta < 1.0):
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(math.log(1.0 / delta) / (2.0 * m_trials))


def trial_risk(step_losses) -> float:
    """Mean of per-step inclusion losses, each clipped to [0, 1]."""
    arr = np.asarray(step_losses, dtype=float).reshape(-1)
    if len(arr) == 0:
        raise ArgumentError("trial_risk of an empty loss sequence")
    return float(np.mean(np.clip(arr, 0.0, 1.0)))

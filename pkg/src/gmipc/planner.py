"""Receding-horizon point-robot control with ellipse barrier constraints.

Every active mixture component becomes an elliptical barrier (inflated by
the robot radius).  The barrier value is the normalized quadratic

    h(p) = 1 - (x~/a)^2 - (y~/b)^2      (1 at the center, 0 on the boundary)

and the planner works with its negation ``h_bar = -h`` so the safe set is
``{h_bar >= 0}`` (outside the ellipse).  A discrete CBF condition

    h_bar(x_{k+1}) - h_bar(x_k) >= -gamma * h_bar(x_k)

constrains every step of the horizon; gamma is interpolated per step from
distance-weighted component confidences.

The solver is a small dense SQP: starting from the zero-input trajectory,
it repeatedly linearizes the (quadratic-in-state) barrier constraints and
solves the resulting box-constrained QP with an accelerated projected
gradient under escalating constraint penalties.  Everything is explicit
numpy on 2N-dimensional vectors; no external solver, fully deterministic.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation
from .geometry import ConfidenceEllipse, MixtureContract, Point2, ellipse_from_component

__all__ = [
    "BarrierSpec",
    "MpcConfig",
    "PlanResult",
    "barrier_value",
    "safe_barrier_value",
    "barriers_from_contract",
    "adaptive_gamma",
    "gamma_from_confidences",
    "solve_mpc",
]

_FEAS_TOL = 1e-9
_PEN_START = 10.0
_PEN_FACTOR = 10.0
_PEN_ROUNDS = 4
_INNER_ITERS = 120
_BRAKE_SCALES = (1.0, 0.5, 0.25, 0.125, 0.0)
_ESCAPE_HEADINGS = 16


@dataclass(frozen=True)
class BarrierSpec:
    """One elliptical keep-out region (semi-axes already inflated)."""

    ellipse: ConfidenceEllipse
    weight: float

    def __post_init__(self):
        if not (0.0 < self.weight <= 1.0):
            raise InvariantViolation(f"barrier weight {self.weight} outside (0, 1]")

    def quad_form(self) -> tuple[np.ndarray, np.ndarray]:
        """(W, c) with h_bar(p) = (p-c)^T W (p-c) - 1."""
        e = self.ellipse
        ct, st = math.cos(e.theta), math.sin(e.theta)
        r = np.array([[ct, -st], [st, ct]])
        w = r @ np.diag([1.0 / (e.a * e.a), 1.0 / (e.b * e.b)]) @ r.T
        return w, np.array([e.center.x, e.center.y])


@dataclass(frozen=True)
class MpcConfig:
    horizon_n: int = 10
    dt: float = 0.1
    q_pos: float = 1.0
    r_u: float = 0.1
    p_term: float = 10.0
    u_max: float = 1.0
    gamma_min: float = 0.1
    gamma_max: float = 0.8
    rho_min: float = 0.05
    rho_max: float = 1.0
    eps_dist: float = 1e-3
    sqp_iters: int = 5
    robot_radius: float = 0.3

    def __post_init__(self):
        if not (0.0 < self.gamma_min <= self.gamma_max <= 1.0):
            raise InvariantViolation("need 0 < gamma_min <= gamma_max <= 1")
        if self.horizon_n < 1:
            raise InvariantViolation("horizon_n must be >= 1")
        if not (self.rho_min < self.rho_max):
            raise InvariantViolation("need rho_min < rho_max")
        if self.dt <= 0.0 or self.u_max <= 0.0:
            raise InvariantViolation("dt and u_max must be positive")
        if min(self.q_pos, self.r_u, self.p_term) < 0.0 or self.r_u == 0.0:
            raise InvariantViolation("cost weights must be >= 0 with r_u > 0")


@dataclass(frozen=True)
class PlanResult:
    u0: np.ndarray
    predicted_states: np.ndarray  # (horizon_n + 1, 2), row 0 = current state
    gamma_used: float
    feasible: bool
    solve_time: float


def barrier_value(b: BarrierSpec, p) -> float:
    """Normalized ellipse barrier: 1 at the center, 0 on the boundary, <0 outside."""
    w, c = b.quad_form()
    d = np.array([float(p[0]), float(p[1])]) - c
    return 1.0 - float(d @ w @ d)


def safe_barrier_value(b: BarrierSpec, p) -> float:
    """Negated form used by the planner; >= 0 is safe (outside the ellipse)."""
    return -barrier_value(b, p)


def barriers_from_contract(m: MixtureContract, robot_radius: float) -> list[BarrierSpec]:
    """Inflate each component's tau-ellipse additively by the robot radius."""
    out = []
    for comp in m.components:
        e = ellipse_from_component(comp, m.tau)
        inflated = ConfidenceEllipse(
            e.center, e.a + robot_radius, e.b + robot_radius, e.theta
        )
        out.append(BarrierSpec(inflated, comp.weight))
    return out


def gamma_from_confidences(rhos, dists, cfg: MpcConfig) -> float:
    """Distance-weighted mean confidence, linearly mapped onto [gamma_min, gamma_max].

    rho_bar = sum_i w_i rho_i / sum_j w_j with w_i = 1/(dist_i + eps_dist);
    the normalization is by the weights alone, so rho_bar is a genuine
    weighted average of the rho_i rather than identically 1.
    """
    rhos = np.asarray(rhos, dtype=float)
    dists = np.asarray(dists, dtype=float)
    w = 1.0 / (dists + cfg.eps_dist)
    rho_bar = float(w @ rhos / w.sum())
    rho_bar = min(max(rho_bar, cfg.rho_min), cfg.rho_max)
    frac = (rho_bar - cfg.rho_min) / (cfg.rho_max - cfg.rho_min)
    return cfg.gamma_min + (cfg.gamma_max - cfg.gamma_min) * frac


def adaptive_gamma(barriers: list[BarrierSpec], p, cfg: MpcConfig) -> float:
    """Per-step relaxation: high confidence nearby -> aggressive gamma.

    Component confidences are the barrier weights rescaled by the frame's
    maximum weight and clamped to [rho_min, rho_max].  No barriers means
    nothing to be cautious about: returns gamma_max.
    """
    if not barriers:
        return cfg.gamma_max
    weights = np.array([b.weight for b in barriers])
    rhos = np.clip(weights / weights.max(), cfg.rho_min, cfg.rho_max)
    centers = np.array([[b.ellipse.center.x, b.ellipse.center.y] for b in barriers])
    pt = np.array([float(p[0]), float(p[1])])
    dists = np.hypot(centers[:, 0] - pt[0], centers[:, 1] - pt[1])
    return gamma_from_confidences(rhos, dists, cfg)


# ---------------------------------------------------------------------------
# solver internals
# ---------------------------------------------------------------------------

def _states_from_inputs(x0: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """(N,2) inputs -> (N+1,2) states under the single integrator."""
    return np.vstack([x0, x0 + dt * np.cumsum(u, axis=0)])


def _hbar_along(states: np.ndarray, w: np.ndarray, c: np.ndarray):
    d = states - c
    h = np.einsum("ka,ab,kb->k", d, w, d) - 1.0
    grad = 2.0 * d @ w  # (K+1, 2)
    return h, grad


def _cbf_residuals(states: np.ndarray, quads, gamma: float) -> np.ndarray:
    """Stacked nonlinear residuals h_bar(x_{k+1}) - (1-gamma) h_bar(x_k)."""
    out = []
    for w, c in quads:
        h, _ = _hbar_along(states, w, c)
        out.append(h[1:] - (1.0 - gamma) * h[:-1])
    return np.concatenate(out) if out else np.zeros(0)


def _fallback_input(x0, g, u_sqp, h0, quads, gamma: float, cfg) -> np.ndarray:
    """Best one-step-safe first input when the full horizon is rejected.

    Candidates are the SQP first input scaled toward zero plus a fixed
    ring of headings at two speeds; among those satisfying the one-step
    CBF condition against every barrier, the one ending nearest the goal
    wins.  Linearizing a curved keep-out lets the QP cut inside it, and
    pure braking then stalls on the boundary forever; a tangential slide
    is safe and makes progress.  Deep inside a keep-out no input can
    satisfy the condition, so zero (stop) is the last resort.
    """
    cands = [u_sqp * s for s in _BRAKE_SCALES]
    # tangents of the most binding barrier, tilted slightly outward: for a
    # convex quadratic barrier any outward-blended chord keeps h rising, so
    # these stay safe however the boundary curves, and whichever sign makes
    # progress wins the cost comparison below
    w_bind, c_bind = quads[int(np.argmin(h0))]
    grad = 2.0 * (w_bind @ (x0 - c_bind))
    gn = float(np.hypot(*grad))
    if gn > 0.0:
        n_out = grad / gn
        t_hat = np.array([-n_out[1], n_out[0]])
        for sign in (1.0, -1.0):
            for tilt in (0.05, 0.25):
                d = math.cos(tilt) * sign * t_hat + math.sin(tilt) * n_out
                cands.append(cfg.u_max * d)
                cands.append(0.5 * cfg.u_max * d)
    for j in range(_ESCAPE_HEADINGS):
        ang = 2.0 * math.pi * j / _ESCAPE_HEADINGS
        d = np.array([math.cos(ang), math.sin(ang)])
        cands.append(cfg.u_max * d)
        cands.append(0.5 * cfg.u_max * d)
    floor = (1.0 - gamma) * h0
    best_u = np.zeros(2)
    best_cost = math.inf
    for u_try in cands:
        x1 = x0 + cfg.dt * u_try
        h1 = np.array([_hbar_along(x1[None, :], w, c)[0][0] for w, c in quads])
        if not np.all(h1 - floor >= -_FEAS_TOL):
            continue
        cost = float(np.sum((x1 - g) ** 2))
        if cost < best_cost - 1e-12:
            best_cost = cost
            best_u = np.asarray(u_try, dtype=float)
    return best_u


def _fista_box_qp(h_mat, b_vec, a_con, r_con, u0_flat, u_max, lip_h):
    """min 1/2 u'Hu + b'u + pen*||min(A u + r, 0)||^2 over the box |u| <= u_max.

    Accelerated projected gradient with escalating penalty; returns the
    first trajectory whose linearized constraints hold (or the last one).
    """
    u = u0_flat.copy()
    pen = _PEN_START
    for _ in range(_PEN_ROUNDS):
        if a_con.shape[0]:
            lip = lip_h + 2.0 * pen * np.linalg.norm(a_con, 2) ** 2
        else:
            lip = lip_h
        y = u.copy()
        t_acc = 1.0
        for _ in range(_INNER_ITERS):
            grad = h_mat @ y + b_vec
            if a_con.shape[0]:
                act = np.minimum(a_con @ y + r_con, 0.0)
                grad = grad + (2.0 * pen) * (a_con.T @ act)
            u_new = np.clip(y - grad / lip, -u_max, u_max)
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc * t_acc))
            y = u_new + ((t_acc - 1.0) / t_new) * (u_new - u)
            u = u_new
            t_acc = t_new
        if a_con.shape[0] == 0 or float(np.min(a_con @ u + r_con)) >= -_FEAS_TOL:
            break
        pen *= _PEN_FACTOR
    return u


def solve_mpc(x, goal, barriers: list[BarrierSpec], cfg: MpcConfig) -> PlanResult:
    """One receding-horizon solve from the current state.

    Always returns; ``feasible`` is True only when the returned trajectory
    satisfies every nonlinear discrete CBF constraint to 1e-9.  When the
    SQP rounds end infeasible, the first input is replaced by the best
    one-step-safe candidate (scaled SQP input or a fixed heading ring), so
    the robot can slide along a boundary instead of stalling against it.
    """
    t_start = time.perf_counter()
    n = cfg.horizon_n
    dt = cfg.dt
    x0 = np.array([float(x.pos[0]), float(x.pos[1])])
    g = np.array([float(goal[0]), float(goal[1])])
    gamma = adaptive_gamma(barriers, x0, cfg)
    quads = [b.quad_form() for b in barriers]

    # S[k] maps the flat input vector to x_{k} - x0 (S[0] = 0)
    lower = np.tril(np.ones((n, n)))
    s_map = dt * np.einsum("kj,ab->kajb", lower, np.eye(2)).reshape(n, 2, 2 * n)
    s_full = np.concatenate([np.zeros((1, 2, 2 * n)), s_map], axis=0)

    c_k = np.full(n, cfg.q_pos)
    c_k[-1] = cfg.p_term
    h_mat = 2.0 * (
        np.einsum("k,kan,kam->nm", c_k, s_map, s_map) + cfg.r_u * np.eye(2 * n)
    )
    b_vec = 2.0 * np.einsum("k,kan,a->n", c_k, s_map, x0 - g)
    lip_h = float(np.linalg.eigvalsh(h_mat)[-1])

    u_flat = np.zeros(2 * n)
    for _ in range(max(1, cfg.sqp_iters)):
        states = _states_from_inputs(x0, u_flat.reshape(n, 2), dt)
        rows, rhs = [], []
        for w, c in quads:
            h, grad = _hbar_along(states, w, c)
            for k in range(n):
                a_row = s_full[k + 1].T @ grad[k + 1] - (1.0 - gamma) * (
                    s_full[k].T @ grad[k]
                )
                rows.append(a_row)
                # linearization offset: residual at the expansion point,
                # minus the linear part's value there
                rhs.append(
                    h[k + 1] - (1.0 - gamma) * h[k] - float(a_row @ u_flat)
                )
        a_con = np.array(rows) if rows else np.zeros((0, 2 * n))
        r_con = np.array(rhs) if rhs else np.zeros(0)

        u_new = _fista_box_qp(h_mat, b_vec, a_con, r_con, u_flat, cfg.u_max, lip_h)
        if float(np.max(np.abs(u_new - u_flat))) < 1e-10:
            u_flat = u_new
            break
        u_flat = u_new

    u = u_flat.reshape(n, 2)
    states = _states_from_inputs(x0, u, dt)
    feasible = bool(np.all(_cbf_residuals(states, quads, gamma) >= -_FEAS_TOL))

    if not feasible and quads:
        h0 = np.array([_hbar_along(x0[None, :], w, c)[0][0] for w, c in quads])
        u = u.copy()
        u[0] = _fallback_input(x0, g, u[0], h0, quads, gamma, cfg)
        states = _states_from_inputs(x0, u, dt)

    u0 = u[0].copy()
    u0.setflags(write=False)
    states.setflags(write=False)
    return PlanResult(
        u0=u0,
        predicted_states=states,
        gamma_used=gamma,
        feasible=feasible,
        solve_time=time.perf_counter() - t_start,
    )

"""Per-frame mixture fitting by first-order optimization.

Free optimizer variables map to a :class:`~gmipc.geometry.MixtureContract`
through an unconstrained reparameterization:

* means are used directly,
* each covariance is ``L L^T + eps_reg I`` with a lower-triangular ``L``
  whose diagonal passes through softplus (always SPD),
* weights are the softmax of free logits (always on the simplex).

One frame is fitted by running Adam on the composite objective from
:mod:`gmipc.losses`; consecutive frames warm-start from the previous
optimum with a smaller iteration budget.  All gradients are analytic and
chained through the reparameterization by hand — no autodiff anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ArgumentError, InvariantViolation
from .geometry import MixtureContract, chi2_quantile_2d
from .losses import (
    LossWeights,
    empty_value_and_grad,
    inclusion_value_and_grad,
    nll_value_and_grad,
)

__all__ = [
    "FitParams",
    "FitConfig",
    "LossReport",
    "FitResult",
    "decode",
    "encode",
    "init_cold",
    "composite_loss_and_grad",
    "fit_frame",
    "active_components",
]

# convergence: relative best-loss improvement over this many iterations
_CONV_WINDOW = 10
_CONV_REL_TOL = 1e-4
_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    """Inverse of softplus; requires y > 0.  Large y maps to itself."""
    y = np.asarray(y, dtype=float)
    out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return out


def _sigmoid(x):
    # softplus'(x); exp(-softplus(-x)) stays relatively accurate for x << 0
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class FitParams:
    """Unconstrained optimizer variables for a K-component mixture."""

    raw_means: np.ndarray  # (K, 2)
    raw_chol: np.ndarray  # (K, 3): below-softplus diag0, off-diag, diag1
    raw_logits: np.ndarray  # (K,)

    def __post_init__(self):
        rm = np.asarray(self.raw_means, dtype=float).reshape(-1, 2)
        rc = np.asarray(self.raw_chol, dtype=float).reshape(-1, 3)
        rl = np.asarray(self.raw_logits, dtype=float).reshape(-1)
        if not (len(rm) == len(rc) == len(rl)) or len(rm) == 0:
            raise InvariantViolation("raw parameter blocks disagree on K")
        for arr in (rm, rc, rl):
            if not np.all(np.isfinite(arr)):
                raise InvariantViolation("non-finite fit parameters")
            arr.setflags(write=False)
        object.__setattr__(self, "raw_means", rm)
        object.__setattr__(self, "raw_chol", rc)
        object.__setattr__(self, "raw_logits", rl)

    @property
    def k(self) -> int:
        return len(self.raw_logits)

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.raw_means.ravel(), self.raw_chol.ravel(), self.raw_logits]
        )

    @staticmethod
    def from_vector(vec: np.ndarray, k: int) -> "FitParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (6 * k,):
            raise ArgumentError(f"expected flat vector of length {6 * k}, got {vec.shape}")
        return FitParams(
            vec[: 2 * k].reshape(k, 2).copy(),
            vec[2 * k : 5 * k].reshape(k, 3).copy(),
            vec[5 * k :].copy(),
        )


@dataclass(frozen=True)
class FitConfig:
    """Everything the per-frame optimizer needs, with workable defaults."""

    k_max: int = 5
    rho: float = 0.95
    alpha: float = 0.02
    beta: float = 1.0
    smoothing_s: float = 0.2
    focal_gamma: float = 2.0
    eps_reg: float = 1e-6
    step_size: float = 5e-2
    max_iters_cold: int = 300
    max_iters_warm: int = 40
    seed: int = 0
    prune_weight: float = 0.02

    def __post_init__(self):
        if self.k_max < 1:
            raise InvariantViolation(f"k_max must be >= 1, got {self.k_max}")
        if not self.eps_reg > 0.0:
            raise InvariantViolation("eps_reg must be > 0")
        if self.max_iters_cold < 1 or self.max_iters_warm < 1:
            raise InvariantViolation("iteration budgets must be >= 1")
        if not (0.0 <= self.prune_weight < 1.0 / self.k_max):
            raise InvariantViolation(
                f"prune_weight must lie in [0, 1/k_max), got {self.prune_weight}"
            )
        # validates alpha/beta/s/focal_gamma ranges as a side effect
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.smoothing_s, self.focal_gamma)

    @property
    def tau(self) -> float:
        return chi2_quantile_2d(self.rho)


@dataclass(frozen=True)
class LossReport:
    """One composite evaluation: the three terms plus the flat gradient."""

    incl: float
    nll: float
    empty: float
    total: float
    grad: np.ndarray


@dataclass(frozen=True)
class FitResult:
    contract: MixtureContract
    final_loss: LossReport
    iters_used: int
    converged: bool
    params: FitParams
    degenerate: bool = False
    loss_history: tuple = ()


def _decode_arrays(params: FitParams, eps_reg: float):
    """Raw parameters -> (means, covs, weights) plus the chain-rule cache."""
    l11 = _softplus(params.raw_chol[:, 0])
    l21 = params.raw_chol[:, 1]
    l22 = _softplus(params.raw_chol[:, 2])
    k = params.k
    covs = np.empty((k, 2, 2))
    covs[:, 0, 0] = l11 * l11 + eps_reg
    covs[:, 0, 1] = covs[:, 1, 0] = l11 * l21
    covs[:, 1, 1] = l21 * l21 + l22 * l22 + eps_reg
    logits = params.raw_logits - params.raw_logits.max()
    w = np.exp(logits)
    w /= w.sum()
    cache = (
        l11,
        l21,
        l22,
        _sigmoid(params.raw_chol[:, 0]),
        _sigmoid(params.raw_chol[:, 2]),
        w,
    )
    return params.raw_means, covs, w, cache


def _chain_to_flat(d_means, d_covs, d_weights, cache) -> np.ndarray:
    """Chain dL/d(means, covs, weights) back to the flat raw vector."""
    l11, l21, l22, s11, s22, w = cache
    g11 = d_covs[:, 0, 0]
    g_off = d_covs[:, 0, 1] + d_covs[:, 1, 0]
    g22 = d_covs[:, 1, 1]
    d_l11 = 2.0 * g11 * l11 + g_off * l21
    d_l21 = g_off * l11 + 2.0 * g22 * l21
    d_l22 = 2.0 * g22 * l22
    d_chol = np.stack([d_l11 * s11, d_l21, d_l22 * s22], axis=1)
    d_logits = w * (d_weights - float(w @ d_weights))
    return np.concatenate([d_means.ravel(), d_chol.ravel(), d_logits])


def decode(params: FitParams, cfg: FitConfig) -> MixtureContract:
    """Map unconstrained parameters to a valid contract (always succeeds
    for finite inputs; FitParams construction rejects non-finite ones)."""
    means, covs, w, _ = _decode_arrays(params, cfg.eps_reg)
    return MixtureContract.from_arrays(means, covs, w, cfg.rho)


def encode(m: MixtureContract, cfg: FitConfig) -> FitParams:
    """Inverse of decode up to the eps_reg floor (exact when every
    covariance dominates eps_reg I)."""
    means, covs, weights = m.as_arrays()
    a11 = np.maximum(covs[:, 0, 0] - cfg.eps_reg, 1e-12)
    a12 = covs[:, 0, 1]
    a22 = np.maximum(covs[:, 1, 1] - cfg.eps_reg, 1e-12)
    l11 = np.sqrt(a11)
    l21 = a12 / l11
    l22 = np.sqrt(np.maximum(a22 - l21 * l21, 1e-12))
    raw_chol = np.stack([_softplus_inv(l11), l21, _softplus_inv(l22)], axis=1)
    logits = np.log(weights)
    return FitParams(means.copy(), raw_chol, logits - logits.mean())


def _workspace_fallback(half: float, cfg: FitConfig) -> FitParams:
    """Single near-workspace-sized component at the origin.

    Used when a cold start is requested with nothing perceived: downstream
    consumers treat the result as degenerate, but decoding still yields a
    legal contract.
    """
    sigma0 = 0.9 * half / math.sqrt(cfg.tau)
    raw = float(_softplus_inv(sigma0))
    return FitParams(np.zeros((1, 2)), np.array([[raw, 0.0, raw]]), np.zeros(1))


def init_cold(obs, cfg: FitConfig) -> FitParams:
    """Seed K components over the perceived cloud by farthest-point sampling.

    The first seed is drawn uniformly (seeded by cfg.seed); each further
    seed is the perceived point farthest from all chosen seeds.  With fewer
    points than components, seeds repeat (components stack).  Initial
    covariances are isotropic with tau-level semi-axes at ~25% of the
    cloud's bounding-box diagonal.
    """
    pts = np.asarray(obs.perceived, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return _workspace_fallback(obs.grid_half, cfg)
    k = cfg.k_max
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    chosen = [int(rng.integers(len(pts)))]
    min_d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        # argmax of an all-zero min_d2 stacks further seeds on point 0,
        # which is the documented behavior for clouds smaller than K
        idx = int(np.argmax(min_d2))
        chosen.append(idx)
        min_d2 = np.minimum(min_d2, np.sum((pts - pts[idx]) ** 2, axis=1))
    means = pts[chosen].copy()

    diag = math.hypot(float(np.ptp(pts[:, 0])), float(np.ptp(pts[:, 1])))
    r0 = max(0.25 * diag, 0.1)  # tau-level semi-axis; floor guards 1-point clouds
    sigma0 = r0 / math.sqrt(cfg.tau)
    raw = float(_softplus_inv(sigma0))
    raw_chol = np.tile(np.array([raw, 0.0, raw]), (k, 1))
    return FitParams(means, raw_chol, np.zeros(k))


def composite_loss_and_grad(params: FitParams, obs, cfg: FitConfig) -> LossReport:
    """Evaluate inclusion + alpha*NLL + beta*empty and the flat gradient.

    Evidence points are obs.gt_points; the empty term runs over
    obs.free_cells and is skipped (0.0, no gradient) when that set is empty.
    """
    gt = np.asarray(obs.gt_points, dtype=float).reshape(-1, 2)
    if len(gt) == 0:
        raise ArgumentError("composite loss needs at least one evidence point")
    means, covs, w, cache = _decode_arrays(params, cfg.eps_reg)
    tau, s = cfg.tau, cfg.smoothing_s

    incl, dm, dc, dw = inclusion_value_and_grad(gt, means, covs, w, tau, s)
    nll, dm_n, dc_n, dw_n = nll_value_and_grad(gt, means, covs, w)
    dm = dm + cfg.alpha * dm_n
    dc = dc + cfg.alpha * dc_n
    dw = dw + cfg.alpha * dw_n

    free = obs.free_cells.centers
    if len(free) > 0:
        empty, dm_e, dc_e = empty_value_and_grad(free, means, covs, tau, s, cfg.focal_gamma)
        dm = dm + cfg.beta * dm_e
        dc = dc + cfg.beta * dc_e
    else:
        empty = 0.0

    total = incl + cfg.alpha * nll + cfg.beta * empty
    grad = _chain_to_flat(dm, dc, dw, cache)
    return LossReport(incl, nll, empty, total, grad)


def _zero_report(params: FitParams) -> LossReport:
    return LossReport(0.0, 0.0, 0.0, 0.0, np.zeros(6 * params.k))


def fit_frame(prev: Optional[FitParams], obs, cfg: FitConfig) -> FitResult:
    """Fit one frame; warm-start from prev when given, else cold-init.

    With nothing perceived the previous parameters are returned unchanged;
    lacking those too, a near-workspace-sized single component is emitted
    and flagged degenerate so callers can treat it as "no evidence" rather
    than a real obstacle estimate.
    """
    gt = np.asarray(obs.gt_points, dtype=float).reshape(-1, 2)
    no_evidence = len(np.asarray(obs.perceived).reshape(-1, 2)) == 0 or len(gt) == 0
    if no_evidence:
        if prev is not None:
            return FitResult(decode(prev, cfg), _zero_report(prev), 0, False, prev)
        params = _workspace_fallback(obs.grid_half, cfg)
        return FitResult(
            decode(params, cfg), _zero_report(params), 0, False, params, degenerate=True
        )

    warm = prev is not None and prev.k == cfg.k_max
    params0 = prev if warm else init_cold(obs, cfg)
    budget = cfg.max_iters_warm if warm else cfg.max_iters_cold

    k = params0.k
    vec = params0.as_vector()
    m1 = np.zeros_like(vec)
    m2 = np.zeros_like(vec)
    best_vec = vec.copy()
    best_loss = math.inf
    history: list[float] = []
    converged = False
    iters = 0
    for t in range(1, budget + 1):
        iters = t
        report = composite_loss_and_grad(FitParams.from_vector(vec, k), obs, cfg)
        if report.total < best_loss:
            best_loss = report.total
            best_vec = vec.copy()
        history.append(report.total)
        if t > _CONV_WINDOW:
            window = history[-1 - _CONV_WINDOW :]
            # full spread of the raw trace, not best-so-far: a frozen best
            # during the optimizer's initial overshoot must not look like
            # convergence.  Normalizer floored at 1 so losses hovering near
            # zero (typical once everything is covered) can still trigger.
            if max(window) - min(window) <= _CONV_REL_TOL * max(abs(history[-1]), 1.0):
                converged = True
                break
        # cosine decay over the run's own budget (full restart each frame:
        # warm refits need full-scale steps to keep concentrating weight)
        frac = (t - 1) / budget
        lr = cfg.step_size * 0.5 * (1.0 + math.cos(math.pi * frac))
        g = report.grad
        m1 = _ADAM_B1 * m1 + (1.0 - _ADAM_B1) * g
        m2 = _ADAM_B2 * m2 + (1.0 - _ADAM_B2) * g * g
        mhat = m1 / (1.0 - _ADAM_B1**t)
        vhat = m2 / (1.0 - _ADAM_B2**t)
        vec = vec - lr * mhat / (np.sqrt(vhat) + _ADAM_EPS)

    best_params = FitParams.from_vector(best_vec, k)
    final = composite_loss_and_grad(best_params, obs, cfg)
    return FitResult(
        decode(best_params, cfg),
        final,
        iters,
        converged,
        best_params,
        loss_history=tuple(history),
    )


def active_components(m: MixtureContract, prune_weight: float) -> MixtureContract:
    """Drop components below the weight floor and renormalize.

    The max-weight component always survives, so the result is a valid
    contract even under an aggressive floor.
    """
    keep = [c for c in m.components if c.weight >= prune_weight]
    if not keep:
        keep = [max(m.components, key=lambda c: c.weight)]
    if len(keep) == len(m.components):
        return m
    total = sum(c.weight for c in keep)
    comps = tuple(replace(c, weight=c.weight / total) for c in keep)
    return MixtureContract(comps, m.rho)

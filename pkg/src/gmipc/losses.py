"""Composite fitting objective: coverage, likelihood, and empty-space terms.

Three ingredients, all smooth in the mixture parameters:

* inclusion loss: negative log of a soft "covered by at least one ellipse"
  probability, averaged over evidence points.  Since -log u >= 1 - u, the
  loss upper-bounds the mean soft miscoverage.
* NLL loss: plain Gaussian-mixture negative log-likelihood of the evidence.
* empty-space loss: penalizes soft coverage of cells known to be free,
  reweighted by phi(u) = u**focal_gamma to emphasize badly covered cells.

The public wrappers operate on :class:`~gmipc.geometry.MixtureContract`.
The ``*_value_and_grad`` kernels work on raw (means, covs, weights) arrays
and also return gradients with respect to those arrays; the optimizer in
:mod:`gmipc.fitting` chains them through its reparameterization.

Gradient conventions: d_means is (K,2), d_covs is (K,2,2) holding the full
symmetric matrix derivative dL/dSigma_k, d_weights is (K,) treating weights
as free coordinates (the simplex constraint is the caller's problem).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DomainError, InvariantViolation
from .geometry import (
    GaussianComponent,
    MixtureContract,
    collect_points,
    contract_contains,
)

__all__ = [
    "LossWeights",
    "FreeCellSet",
    "soft_membership",
    "coverage_prob",
    "inclusion_loss",
    "pointwise_inclusion_losses",
    "hard_coverage",
    "nll_loss",
    "empty_loss",
    "inclusion_value_and_grad",
    "nll_value_and_grad",
    "empty_value_and_grad",
]

_LOG_2PI = math.log(2.0 * math.pi)
_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class LossWeights:
    """Trade-off scalars for the composite objective.

    ``smoothing_s`` is the logistic softness in squared-Mahalanobis units;
    it is shared by the inclusion and empty terms.  ``focal_gamma`` is the
    exponent of the empty-space reweighting phi(u) = u**focal_gamma.
    """

    alpha: float = 0.02
    beta: float = 1.0
    smoothing_s: float = 0.2
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "beta", "smoothing_s", "focal_gamma"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvariantViolation(f"{name} must be finite, got {v}")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise InvariantViolation("alpha and beta must be >= 0")
        if self.smoothing_s <= 0.0:
            raise InvariantViolation("smoothing_s must be > 0")
        if self.focal_gamma <= 0.0:
            raise InvariantViolation("focal_gamma must be > 0")


@dataclass(frozen=True)
class FreeCellSet:
    """Centers of occupancy cells known to be obstacle-free."""

    centers: np.ndarray
    cell_area: float

    def __post_init__(self):
        arr = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "centers", arr)
        if not (self.cell_area > 0.0) or not math.isfinite(self.cell_area):
            raise InvariantViolation(f"cell_area must be positive, got {self.cell_area}")

    def __len__(self) -> int:
        return len(self.centers)


def _sigmoid(z):
    # exp(-softplus(-z)) keeps full *relative* accuracy for z << 0, where
    # the usual tanh form underflows to exactly zero and would silently
    # drop the gradient contribution of deeply uncovered points
    return np.exp(-np.logaddexp(0.0, -np.asarray(z, dtype=float)))


def _softplus(z):
    return np.logaddexp(0.0, np.asarray(z, dtype=float))


def _log_softplus(z):
    # log(softplus(z)); for z << 0 softplus(z) equals e^z to machine
    # precision, so the log is z itself and never underflows
    z = np.asarray(z, dtype=float)
    return np.where(z > -30.0, np.log(_softplus(np.maximum(z, -30.0))), z)


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _log_coverage(log_terms: np.ndarray):
    """(s_n, log p_n) for p = 1 - e^{-s}, s_n = sum_k exp(log_terms[n, k]).

    log p via the series p = s(1 - s/2 + s^2/6 - ...) once -expm1(-s)
    would lose all relative precision.
    """
    log_s = _logsumexp_rows(log_terms)
    s_n = np.exp(log_s)
    small = s_n < 1e-3
    log_p = np.where(
        small,
        log_s + np.log1p(-0.5 * s_n + s_n * s_n / 6.0),
        np.log(np.maximum(-np.expm1(-s_n), _TINY)),
    )
    return s_n, log_p


def _prep(points: np.ndarray, means: np.ndarray, covs: np.ndarray):
    """Shared per-pair quantities.

    Returns (sinv (K,2,2), g (N,K,2), d2 (N,K), logdet (K,)) where
    g = Sigma^{-1} (y - mu) and d2 is the squared Mahalanobis distance.
    """
    a11 = covs[:, 0, 0]
    a12 = covs[:, 0, 1]
    a22 = covs[:, 1, 1]
    det = a11 * a22 - a12 * a12
    if np.any(det <= 0.0) or np.any(a11 <= 0.0):
        raise InvariantViolation("covariance is not positive definite")
    sinv = np.empty_like(covs)
    sinv[:, 0, 0] = a22 / det
    sinv[:, 1, 1] = a11 / det
    sinv[:, 0, 1] = sinv[:, 1, 0] = -a12 / det
    delta = points[:, None, :] - means[None, :, :]
    g = np.einsum("kij,nkj->nki", sinv, delta)
    d2 = np.einsum("nki,nki->nk", delta, g)
    return sinv, g, d2, np.log(det)


# ---------------------------------------------------------------------------
# array kernels (value + gradient)
# ---------------------------------------------------------------------------

def inclusion_value_and_grad(points, means, covs, weights, tau, s):
    """Inclusion loss and its gradients over raw mixture arrays.

    loss = -(1/N) sum_n log p_n with
    p_n = 1 - prod_k (1 - q_{nk})^{w_k},  q = sigmoid((tau - d2)/s).

    Everything is assembled in log space: log(1 - q) = -softplus(z) with
    z = (tau - d2)/s, so log s_n = logsumexp_k(log w_k + log softplus(z)),
    and the gradient coefficient exp(-s_n - log p_n + log w_k + log q_nk)
    stays exact even where e^z is not representable (a point hundreds of
    Mahalanobis units outside still contributes its full 1/(n s) weight).
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    _, g, d2, _ = _prep(points, means, covs)
    z = (tau - d2) / s
    log_w = np.log(weights)
    log_sp = _log_softplus(z)
    s_n, log_p = _log_coverage(log_w[None, :] + log_sp)
    loss = float(-np.mean(log_p))

    log_sig = -_softplus(-z)
    scale = (-s_n - log_p)[:, None]
    coeff = np.exp(scale + log_w[None, :] + log_sig - math.log(n * s))  # dL/d d2
    d_means = -2.0 * np.einsum("nk,nki->ki", coeff, g)
    d_covs = -np.einsum("nk,nki,nkj->kij", coeff, g, g)
    d_weights = -np.exp(scale + log_sp).sum(axis=0) / n
    return loss, d_means, d_covs, d_weights


def nll_value_and_grad(points, means, covs, weights):
    """Gaussian-mixture NLL and gradients over raw mixture arrays."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    sinv, g, d2, logdet = _prep(points, means, covs)
    log_n = -_LOG_2PI - 0.5 * logdet[None, :] - 0.5 * d2
    a = np.log(weights)[None, :] + log_n
    ell = _logsumexp_rows(a)
    loss = float(-np.mean(ell))

    r = np.exp(a - ell[:, None])  # responsibilities, rows sum to 1
    d_means = -np.einsum("nk,nki->ki", r, g) / n
    r_tot = r.sum(axis=0)
    d_covs = (0.5 / n) * (
        r_tot[:, None, None] * sinv - np.einsum("nk,nki,nkj->kij", r, g, g)
    )
    # r/w computed without the division so vanishing weights stay finite
    d_weights = -np.exp(log_n - ell[:, None]).sum(axis=0) / n
    return loss, d_means, d_covs, d_weights


def empty_value_and_grad(cells, means, covs, tau, s, focal_gamma):
    """Empty-space penalty and gradients over raw mixture arrays.

    loss = (1/M) sum_c phi(P_c), P_c = 1 - prod_k (1 - q_{ck}) with
    unweighted per-component memberships, phi(u) = u**focal_gamma.

    Log-space assembly as in the inclusion kernel; this also keeps the
    gradient finite for focal_gamma < 1, where P_c**(focal_gamma-1) alone
    would overflow at barely-covered cells.
    """
    cells = np.asarray(cells, dtype=float)
    m = len(cells)
    _, g, d2, _ = _prep(cells, means, covs)
    z = (tau - d2) / s
    log_sp = _log_softplus(z)
    t, log_pu = _log_coverage(log_sp)
    loss = float(np.mean(np.exp(focal_gamma * log_pu)))

    log_sig = -_softplus(-z)
    scale = (math.log(focal_gamma / m) + (focal_gamma - 1.0) * log_pu - t)[:, None]
    coeff = -np.exp(scale + log_sig - math.log(s))  # dL/d d2 <= 0
    d_means = -2.0 * np.einsum("mk,mki->ki", coeff, g)
    d_covs = -np.einsum("mk,mki,mkj->kij", coeff, g, g)
    return loss, d_means, d_covs


# ---------------------------------------------------------------------------
# contract-level wrappers
# ---------------------------------------------------------------------------

def soft_membership(y, c: GaussianComponent, tau: float, s: float) -> float:
    """Logistic membership sigma((tau - d2)/s); 0.5 exactly on the boundary."""
    if not s > 0.0:
        raise DomainError(f"smoothing scale must be positive, got {s}")
    from .geometry import mahalanobis_sq

    d2 = mahalanobis_sq(y, c.mu, c.sigma)
    return float(_sigmoid((tau - d2) / s))


def coverage_prob(m: MixtureContract, y, s: float) -> float:
    """Soft probability that y is covered by at least one component.

    p = 1 - prod_k (1 - q_k)^{w_k}, evaluated in log space.
    """
    if not s > 0.0:
        raise DomainError(f"smoothing scale must be positive, got {s}")
    means, covs, weights = m.as_arrays()
    pts = collect_points(y)
    _, _, d2, _ = _prep(pts, means, covs)
    s_n = _softplus((m.tau - d2) / s) @ weights
    return float(max(-np.expm1(-s_n[0]), _TINY))


def inclusion_loss(m: MixtureContract, gt_points, s: float) -> float:
    """Mean negative log soft-coverage over evidence points."""
    pts = collect_points(gt_points)
    if len(pts) == 0:
        raise ArgumentError("inclusion_loss needs at least one evidence point")
    if not s > 0.0:
        raise DomainError(f"smoothing scale must be positive, got {s}")
    means, covs, weights = m.as_arrays()
    loss, _, _, _ = inclusion_value_and_grad(pts, means, covs, weights, m.tau, s)
    return loss


def pointwise_inclusion_losses(m: MixtureContract, gt_points, s: float) -> np.ndarray:
    """Per-point negative log soft-coverage (the summands of inclusion_loss)."""
    pts = collect_points(gt_points)
    if len(pts) == 0:
        raise ArgumentError("pointwise losses need at least one evidence point")
    if not s > 0.0:
        raise DomainError(f"smoothing scale must be positive, got {s}")
    means, covs, weights = m.as_arrays()
    _, _, d2, _ = _prep(pts, means, covs)
    log_sp = _log_softplus((m.tau - d2) / s)
    _, log_p = _log_coverage(np.log(weights)[None, :] + log_sp)
    return -log_p


def hard_coverage(m: MixtureContract, y) -> bool:
    """Non-smooth reference membership (union of hard ellipses)."""
    return contract_contains(m, y)


def nll_loss(m: MixtureContract, gt_points) -> float:
    """Gaussian-mixture negative log-likelihood of the evidence points."""
    pts = collect_points(gt_points)
    if len(pts) == 0:
        raise ArgumentError("nll_loss needs at least one evidence point")
    means, covs, weights = m.as_arrays()
    loss, _, _, _ = nll_value_and_grad(pts, means, covs, weights)
    return loss


def empty_loss(m: MixtureContract, free: FreeCellSet, s: float, focal_gamma: float = 2.0) -> float:
    """Mean focal-reweighted soft union coverage over known-free cells."""
    if len(free) == 0:
        raise ArgumentError("empty_loss needs a nonempty free-cell set")
    if not s > 0.0:
        raise DomainError(f"smoothing scale must be positive, got {s}")
    means, covs, _ = m.as_arrays()
    loss, _, _ = empty_value_and_grad(free.centers, means, covs, m.tau, s, focal_gamma)
    return loss

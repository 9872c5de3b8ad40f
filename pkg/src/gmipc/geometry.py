"""Geometric and probabilistic primitives for planar Gaussian confidence sets.

A contract is a weighted union of confidence ellipses: each Gaussian
component induces the sublevel set of its squared Mahalanobis distance at a
chi-square quantile, and a query point belongs to the contract if it belongs
to at least one component ellipse.

Everything here is pure and immutable; the heavy array math used by the
fitting loop lives in :mod:`gmipc.losses`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ArgumentError, DomainError, InvariantViolation

__all__ = [
    "Point2",
    "SpdMat2",
    "GaussianComponent",
    "MixtureContract",
    "ConfidenceEllipse",
    "chi2_quantile_2d",
    "mahalanobis_sq",
    "ellipse_from_component",
    "contract_contains",
    "canonical_angle",
]

_WEIGHT_TOL = 1e-6
_TAU_TOL = 1e-9


class Point2(NamedTuple):
    """A planar point in meters."""

    x: float
    y: float


def _as_xy(p) -> tuple[float, float]:
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InvariantViolation(f"non-finite point ({x}, {y})")
    return x, y


@dataclass(frozen=True)
class SpdMat2:
    """Symmetric positive-definite 2x2 matrix, stored as its upper triangle."""

    a11: float
    a12: float
    a22: float

    def __post_init__(self):
        for v in (self.a11, self.a12, self.a22):
            if not math.isfinite(v):
                raise InvariantViolation("non-finite covariance entry")
        if self.a11 <= 0.0 or self.det <= 0.0:
            raise InvariantViolation(
                f"matrix [[{self.a11}, {self.a12}], [{self.a12}, {self.a22}]] "
                "is not positive definite"
            )

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a12

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a12, self.a22]], dtype=float)

    @staticmethod
    def from_matrix(m) -> "SpdMat2":
        m = np.asarray(m, dtype=float)
        if m.shape != (2, 2) or abs(m[0, 1] - m[1, 0]) > 1e-9 * max(1.0, abs(m[0, 1])):
            raise InvariantViolation("expected a symmetric 2x2 matrix")
        return SpdMat2(float(m[0, 0]), 0.5 * float(m[0, 1] + m[1, 0]), float(m[1, 1]))


@dataclass(frozen=True)
class GaussianComponent:
    """One weighted Gaussian component (mean, covariance, mixture weight)."""

    mu: Point2
    sigma: SpdMat2
    weight: float

    def __post_init__(self):
        if not isinstance(self.mu, Point2):
            object.__setattr__(self, "mu", Point2(*_as_xy(self.mu)))
        _as_xy(self.mu)
        if not (0.0 < self.weight <= 1.0) or not math.isfinite(self.weight):
            raise InvariantViolation(f"component weight {self.weight} outside (0, 1]")


def chi2_quantile_2d(rho: float) -> float:
    """Chi-square quantile with 2 degrees of freedom: tau = -2 ln(1 - rho).

    Only the planar case is implemented; the closed form makes a general
    incomplete-gamma inverse unnecessary.
    """
    rho = float(rho)
    if not (0.0 < rho < 1.0):
        raise DomainError(f"confidence level must lie in (0, 1), got {rho}")
    return -2.0 * math.log1p(-rho)


@dataclass(frozen=True)
class MixtureContract:
    """Union-of-ellipses uncertainty set induced by a Gaussian mixture.

    The set at confidence ``rho`` is the union over components of
    ``{y : (y - mu)^T sigma^{-1} (y - mu) <= tau}`` with
    ``tau = chi2_quantile_2d(rho)``.  Weights live on the simplex.
    """

    components: tuple[GaussianComponent, ...]
    rho: float
    tau: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) < 1:
            raise InvariantViolation("a contract needs at least one component")
        expected_tau = chi2_quantile_2d(self.rho)
        if self.tau is None:
            object.__setattr__(self, "tau", expected_tau)
        elif abs(self.tau - expected_tau) > _TAU_TOL * max(1.0, expected_tau):
            raise InvariantViolation(
                f"tau={self.tau} inconsistent with rho={self.rho} "
                f"(expected {expected_tau})"
            )
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise InvariantViolation(f"component weights sum to {total}, not 1")

    @property
    def k(self) -> int:
        return len(self.components)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (means (K,2), covariances (K,2,2), weights (K,))."""
        means = np.array([[c.mu.x, c.mu.y] for c in self.components], dtype=float)
        covs = np.array([c.sigma.as_matrix() for c in self.components], dtype=float)
        weights = np.array([c.weight for c in self.components], dtype=float)
        return means, covs, weights

    @staticmethod
    def from_arrays(means, covs, weights, rho: float) -> "MixtureContract":
        means = np.asarray(means, dtype=float).reshape(-1, 2)
        covs = np.asarray(covs, dtype=float).reshape(-1, 2, 2)
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if not (len(means) == len(covs) == len(weights)):
            raise ArgumentError("means, covs and weights must have equal length")
        total = float(weights.sum())
        if total <= 0.0 or not np.isfinite(total):
            raise InvariantViolation("weights must have a positive finite sum")
        weights = weights / total
        comps = tuple(
            GaussianComponent(
                Point2(float(m[0]), float(m[1])),
                SpdMat2.from_matrix(c),
                float(w),
            )
            for m, c, w in zip(means, covs, weights)
        )
        return MixtureContract(comps, float(rho))


@dataclass(frozen=True)
class ConfidenceEllipse:
    """Geometric ellipse: center, semi-axes a >= b > 0, orientation theta.

    ``theta`` is the atan2 angle of the major-axis direction in (-pi, pi];
    use :func:`canonical_angle` to fold it into (-pi/2, pi/2] when only the
    undirected axis matters.
    """

    center: Point2
    a: float
    b: float
    theta: float

    def __post_init__(self):
        if not isinstance(self.center, Point2):
            object.__setattr__(self, "center", Point2(*_as_xy(self.center)))
        if not (self.a >= self.b > 0.0):
            raise InvariantViolation(f"semi-axes must satisfy a >= b > 0, got {self.a}, {self.b}")
        if not (-math.pi < self.theta <= math.pi):
            raise InvariantViolation(f"theta {self.theta} outside (-pi, pi]")

    def boundary_points(self, n: int = 64) -> np.ndarray:
        """Evenly parameterized boundary samples, shape (n, 2)."""
        t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
        c, s = math.cos(self.theta), math.sin(self.theta)
        px = self.a * np.cos(t)
        py = self.b * np.sin(t)
        return np.stack(
            [self.center.x + c * px - s * py, self.center.y + s * px + c * py], axis=1
        )

    def contains(self, points) -> np.ndarray:
        """Boolean membership of points (N,2) in the closed ellipse."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = pts[:, 0] - self.center.x
        dy = pts[:, 1] - self.center.y
        u = (c * dx + s * dy) / self.a
        v = (-s * dx + c * dy) / self.b
        return u * u + v * v <= 1.0


def canonical_angle(theta: float) -> float:
    """Fold an axis angle into (-pi/2, pi/2] using ellipse symmetry."""
    t = math.fmod(theta, math.pi)
    if t > 0.5 * math.pi:
        t -= math.pi
    elif t <= -0.5 * math.pi:
        t += math.pi
    return t


def mahalanobis_sq(y, mu, sigma: SpdMat2) -> float:
    """Squared Mahalanobis distance (y - mu)^T sigma^{-1} (y - mu)."""
    if not isinstance(sigma, SpdMat2):
        sigma = SpdMat2.from_matrix(sigma)
    yx, yy = _as_xy(y)
    mx, my = _as_xy(mu)
    dx, dy = yx - mx, yy - my
    det = sigma.det
    return (sigma.a22 * dx * dx - 2.0 * sigma.a12 * dx * dy + sigma.a11 * dy * dy) / det


def mahalanobis_sq_points(points: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Vectorized squared Mahalanobis distances, shape (N, K).

    ``points`` is (N,2), ``means`` (K,2), ``covs`` (K,2,2).  Covariances must
    be SPD; no validation is performed here (hot path).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    delta_x = pts[:, None, 0] - means[None, :, 0]
    delta_y = pts[:, None, 1] - means[None, :, 1]
    a11 = covs[:, 0, 0]
    a12 = covs[:, 0, 1]
    a22 = covs[:, 1, 1]
    det = a11 * a22 - a12 * a12
    return (a22 * delta_x * delta_x - 2.0 * a12 * delta_x * delta_y + a11 * delta_y * delta_y) / det


def eig2x2_sym(sigma: SpdMat2) -> tuple[float, float, float]:
    """Closed-form eigendecomposition of a symmetric 2x2 matrix.

    Returns (lambda_max, lambda_min, theta) where theta is the atan2 angle of
    the eigenvector for lambda_max.  Ties (circles) report theta = 0.
    """
    half_tr = 0.5 * (sigma.a11 + sigma.a22)
    half_gap = 0.5 * (sigma.a11 - sigma.a22)
    disc = math.hypot(half_gap, sigma.a12)
    lmax = half_tr + disc
    lmin = half_tr - disc
    if disc <= 1e-15 * max(abs(half_tr), 1.0):
        theta = 0.0
    elif sigma.a12 == 0.0:
        theta = 0.0 if sigma.a11 >= sigma.a22 else 0.5 * math.pi
    else:
        # (A - lmax I) annihilates (lmax - a22, a12); see 2x2 characteristic eq.
        theta = math.atan2(sigma.a12, lmax - sigma.a22)
    return lmax, lmin, theta


def ellipse_from_component(c: GaussianComponent, tau: float) -> ConfidenceEllipse:
    """Confidence ellipse of one component at Mahalanobis level tau.

    Semi-axes are sqrt(lambda * tau) along the covariance eigenvectors, so
    boundary points sit exactly at squared Mahalanobis distance tau.
    """
    if not tau > 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    lmax, lmin, theta = eig2x2_sym(c.sigma)
    lmin = max(lmin, 1e-300)
    return ConfidenceEllipse(c.mu, math.sqrt(lmax * tau), math.sqrt(lmin * tau), theta)


def contract_contains(m: MixtureContract, y) -> bool:
    """True iff y lies inside at least one component's tau-ellipse."""
    return any(mahalanobis_sq(y, c.mu, c.sigma) <= m.tau for c in m.components)


def contract_contains_points(m: MixtureContract, points) -> np.ndarray:
    """Vectorized union membership for points (N,2)."""
    means, covs, _ = m.as_arrays()
    d2 = mahalanobis_sq_points(points, means, covs)
    return (d2 <= m.tau).any(axis=1)


def collect_points(points: Iterable | np.ndarray | Sequence) -> np.ndarray:
    """Normalize a point collection to an (N,2) float array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ArgumentError(f"expected points of shape (N, 2), got {arr.shape}")
    return arr

"""A small 2D indoor world: polygon obstacles, a ray sensor, a point robot.

Scenarios place rectangular "chair" and L-shaped "sofa" footprints uniformly
at random inside a square workspace with clearance constraints, and choose a
start/goal pair near opposite regions of the boundary.  Sensing casts rays
from the robot, perturbs the hits with isotropic noise, drops some of them,
rasterizes survivors into a fixed occupancy grid and collects the traversed
cells as known-free space.  The evaluation side additionally exposes
fixed-density footprint samples of every obstacle the sensor saw at least
once — the "true obstacle region" a contract is supposed to cover, occluded
parts included.

Coordinates are meters, world frame, workspace = [-half, half]^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ArgumentError, InvariantViolation, ScenarioGenerationError
from .geometry import Point2
from .losses import FreeCellSet

__all__ = [
    "Obstacle",
    "Scenario",
    "RobotState",
    "Observation",
    "SensorConfig",
    "SCENARIO_KINDS",
    "make_scenario",
    "sense",
    "merge_observations",
    "step_dynamics",
    "in_collision",
]

SCENARIO_KINDS = ("chair", "sofa", "multi_sofa", "mixed", "empty")

_RECT_SIDE = 0.6  # chair footprint, square
_SOFA_W, _SOFA_H = 2.0, 1.6  # sofa bounding box
_NOTCH_W, _NOTCH_H = 1.0, 0.8  # cut from one corner -> L shape
_PAIR_CLEARANCE = 1.2  # m between obstacle polygons
_SG_CLEARANCE = 1.0  # m from start/goal to any obstacle
_SG_BAND = 0.5  # start/goal live within this band of the boundary
_SG_SEP_FACTOR = 1.5  # |goal-start| >= factor * workspace_half
_PLACE_TRIES = 1000
_BOUNDARY_STEP = 0.1  # footprint boundary sample spacing
_INTERIOR_STEP = 0.2  # footprint interior lattice spacing


# ---------------------------------------------------------------------------
# polygon helpers
# ---------------------------------------------------------------------------

def _shoelace(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _point_in_polygon(p, verts: np.ndarray) -> bool:
    """Even-odd rule; boundary points may land either way (callers that
    care about the boundary use distances instead)."""
    x, y = float(p[0]), float(p[1])
    inside = False
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xi:
                inside = not inside
    return inside


def _dist_point_segment(p, a, b) -> float:
    ab = (b[0] - a[0], b[1] - a[1])
    ap = (p[0] - a[0], p[1] - a[1])
    denom = ab[0] * ab[0] + ab[1] * ab[1]
    t = 0.0 if denom == 0.0 else max(0.0, min(1.0, (ap[0] * ab[0] + ap[1] * ab[1]) / denom))
    dx = p[0] - (a[0] + t * ab[0])
    dy = p[1] - (a[1] + t * ab[1])
    return math.hypot(dx, dy)


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True
    return False


def _polygon_distance(p, verts: np.ndarray) -> float:
    """Distance from a point to a filled polygon (0 inside)."""
    if _point_in_polygon(p, verts):
        return 0.0
    n = len(verts)
    return min(
        _dist_point_segment(p, verts[i], verts[(i + 1) % n]) for i in range(n)
    )


def _polygon_clearance(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum distance between two filled polygons (0 when overlapping)."""
    if _point_in_polygon(a[0], b) or _point_in_polygon(b[0], a):
        return 0.0
    na, nb = len(a), len(b)
    best = math.inf
    for i in range(na):
        p1, p2 = a[i], a[(i + 1) % na]
        for j in range(nb):
            q1, q2 = b[j], b[(j + 1) % nb]
            if _segments_intersect(p1, p2, q1, q2):
                return 0.0
            best = min(
                best,
                _dist_point_segment(p1, q1, q2),
                _dist_point_segment(p2, q1, q2),
                _dist_point_segment(q1, p1, p2),
                _dist_point_segment(q2, p1, p2),
            )
    return best


def _footprint_samples(verts: np.ndarray) -> np.ndarray:
    """Boundary samples at _BOUNDARY_STEP plus an interior lattice."""
    pieces = []
    n = len(verts)
    for i in range(n):
        a, b = verts[i], verts[(i + 1) % n]
        length = math.hypot(b[0] - a[0], b[1] - a[1])
        m = max(1, int(math.ceil(length / _BOUNDARY_STEP)))
        t = np.arange(m) / m  # excludes endpoint; next edge supplies it
        pieces.append(a[None, :] + t[:, None] * (b - a)[None, :])
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    xs = np.arange(lo[0] + 0.5 * _INTERIOR_STEP, hi[0], _INTERIOR_STEP)
    ys = np.arange(lo[1] + 0.5 * _INTERIOR_STEP, hi[1], _INTERIOR_STEP)
    if len(xs) and len(ys):
        gx, gy = np.meshgrid(xs, ys)
        cand = np.stack([gx.ravel(), gy.ravel()], axis=1)
        keep = np.array([_point_in_polygon(c, verts) for c in cand], dtype=bool)
        if keep.any():
            pieces.append(cand[keep])
    return np.concatenate(pieces, axis=0)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Obstacle:
    """Simple CCW polygon footprint with precomputed evaluation samples."""

    polygon: tuple[Point2, ...]
    kind: str  # "rect_chair" | "l_sofa"

    def __post_init__(self):
        if self.kind not in ("rect_chair", "l_sofa"):
            raise InvariantViolation(f"unknown obstacle kind {self.kind!r}")
        poly = tuple(Point2(float(p[0]), float(p[1])) for p in self.polygon)
        object.__setattr__(self, "polygon", poly)
        want = 4 if self.kind == "rect_chair" else 6
        if len(poly) != want:
            raise InvariantViolation(f"{self.kind} needs {want} vertices, got {len(poly)}")
        verts = np.array(poly, dtype=float)
        if _shoelace(verts) <= 1e-9:
            raise InvariantViolation("polygon must be counterclockwise with nonzero area")
        verts.setflags(write=False)
        fp = _footprint_samples(verts)
        fp.setflags(write=False)
        object.__setattr__(self, "_verts", verts)
        object.__setattr__(self, "_footprint", fp)

    @property
    def vertices(self) -> np.ndarray:
        return self._verts  # type: ignore[attr-defined]

    @property
    def footprint(self) -> np.ndarray:
        """Fixed-density ground-truth samples (boundary + interior), (F, 2)."""
        return self._footprint  # type: ignore[attr-defined]

    @property
    def area(self) -> float:
        return _shoelace(self.vertices)


@dataclass(frozen=True)
class Scenario:
    obstacles: tuple[Obstacle, ...]
    start: Point2
    goal: Point2
    workspace_half: float
    seed: int
    kind: str = ""

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.workspace_half <= 0.0:
            raise InvariantViolation("workspace_half must be positive")
        half = self.workspace_half
        for name, p in (("start", self.start), ("goal", self.goal)):
            if max(abs(p.x), abs(p.y)) > half:
                raise InvariantViolation(f"{name} outside workspace")
            if half - max(abs(p.x), abs(p.y)) > _SG_BAND + 1e-9:
                raise InvariantViolation(f"{name} farther than {_SG_BAND} m from the boundary")


@dataclass(frozen=True)
class RobotState:
    pos: Point2
    t: int = 0

    def __post_init__(self):
        if not isinstance(self.pos, Point2):
            object.__setattr__(self, "pos", Point2(float(self.pos[0]), float(self.pos[1])))


@dataclass(frozen=True)
class SensorConfig:
    """Ray sensor + rasterization settings."""

    n_rays: int = 180
    fov: float = 2.0 * math.pi
    max_range: float = 8.0
    noise_sigma: float = 0.03
    dropout_p: float = 0.1
    seed: int = 0
    grid_n: int = 64
    max_free_cells: int = 400  # stride-subsampled cap fed to the empty loss

    def __post_init__(self):
        if self.n_rays < 8:
            raise InvariantViolation(f"n_rays must be >= 8, got {self.n_rays}")
        if not (0.0 <= self.dropout_p < 1.0):
            raise InvariantViolation(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.grid_n < 8:
            raise InvariantViolation(f"grid_n must be >= 8, got {self.grid_n}")
        if not (0.0 < self.fov <= 2.0 * math.pi + 1e-12):
            raise InvariantViolation("fov must lie in (0, 2*pi]")
        if self.max_range <= 0.0 or self.noise_sigma < 0.0:
            raise InvariantViolation("max_range must be > 0 and noise_sigma >= 0")
        if self.max_free_cells < 1:
            raise InvariantViolation("max_free_cells must be >= 1")


@dataclass(frozen=True)
class Observation:
    """One sensing frame.

    ``perceived`` are the surviving noisy hits (world frame); ``grid`` is
    the boolean occupancy raster over the workspace (x-major indexing);
    ``free_cells`` are centers of cells rays traversed without terminating;
    ``gt_points`` are footprint samples of obstacles with at least one
    surviving hit — evaluation/supervision data, not sensor output.
    """

    perceived: np.ndarray
    grid: np.ndarray
    free_cells: FreeCellSet
    gt_points: np.ndarray
    grid_half: float
    n_rays: int
    n_dropped: int
    n_misses: int

    def __post_init__(self):
        for name in ("perceived", "gt_points"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1, 2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


# ---------------------------------------------------------------------------
# scenario construction
# ---------------------------------------------------------------------------

def _chair_local() -> np.ndarray:
    h = 0.5 * _RECT_SIDE
    return np.array([[-h, -h], [h, -h], [h, h], [-h, h]])


def _sofa_local() -> np.ndarray:
    verts = np.array(
        [
            [0.0, 0.0],
            [_SOFA_W, 0.0],
            [_SOFA_W, _SOFA_H - _NOTCH_H],
            [_SOFA_W - _NOTCH_W, _SOFA_H - _NOTCH_H],
            [_SOFA_W - _NOTCH_W, _SOFA_H],
            [0.0, _SOFA_H],
        ]
    )
    area = _shoelace(verts)
    cx = np.sum((verts[:, 0] + np.roll(verts[:, 0], -1)) * _cross_terms(verts)) / (6 * area)
    cy = np.sum((verts[:, 1] + np.roll(verts[:, 1], -1)) * _cross_terms(verts)) / (6 * area)
    return verts - np.array([cx, cy])


def _cross_terms(verts: np.ndarray) -> np.ndarray:
    x, y = verts[:, 0], verts[:, 1]
    return x * np.roll(y, -1) - np.roll(x, -1) * y


def _place(local: np.ndarray, center, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=float)


def _obstacle_kinds_for(kind: str) -> list[str]:
    table = {
        "chair": ["rect_chair"],
        "sofa": ["l_sofa"],
        "multi_sofa": ["l_sofa", "l_sofa"],
        "mixed": ["l_sofa", "rect_chair"],
        "empty": [],
    }
    if kind not in table:
        raise ArgumentError(f"unknown scenario kind {kind!r}; expected one of {SCENARIO_KINDS}")
    return table[kind]


def _sample_boundary_point(rng, half: float) -> Point2:
    side = int(rng.integers(4))
    along = float(rng.uniform(-half + _SG_BAND, half - _SG_BAND))
    depth = float(rng.uniform(half - _SG_BAND, half - 0.15))
    if side == 0:
        return Point2(along, -depth)
    if side == 1:
        return Point2(depth, along)
    if side == 2:
        return Point2(along, depth)
    return Point2(-depth, along)


def make_scenario(kind: str, seed: int, workspace_half: float = 5.0) -> Scenario:
    """Sample a scenario of the given kind, deterministically in seed.

    Obstacles are placed uniformly (position and rotation) with pairwise
    clearance >= 1.2 m, fully inside the workspace.  Start and goal lie in
    the 0.5 m boundary band, >= 1.0 m clear of every obstacle, and at least
    1.5 * workspace_half apart so every trial actually crosses the room.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xA11CE)))
    half = workspace_half
    obstacles: list[Obstacle] = []
    for ob_kind in _obstacle_kinds_for(kind):
        local = _chair_local() if ob_kind == "rect_chair" else _sofa_local()
        circum = float(np.max(np.hypot(local[:, 0], local[:, 1])))
        lim = half - circum - 0.6
        if lim <= 0:
            raise ScenarioGenerationError("workspace too small for obstacle footprint")
        for attempt in range(_PLACE_TRIES + 1):
            if attempt == _PLACE_TRIES:
                raise ScenarioGenerationError(
                    f"could not place {ob_kind} after {_PLACE_TRIES} samples (seed {seed})"
                )
            center = rng.uniform(-lim, lim, size=2)
            angle = float(rng.uniform(0.0, 2.0 * math.pi))
            verts = _place(local, center, angle)
            if all(
                _polygon_clearance(verts, ob.vertices) >= _PAIR_CLEARANCE
                for ob in obstacles
            ):
                obstacles.append(Obstacle(tuple(map(tuple, verts)), ob_kind))
                break

    min_sep = _SG_SEP_FACTOR * half
    for attempt in range(_PLACE_TRIES + 1):
        if attempt == _PLACE_TRIES:
            raise ScenarioGenerationError(
                f"could not place start/goal after {_PLACE_TRIES} samples (seed {seed})"
            )
        start = _sample_boundary_point(rng, half)
        goal = _sample_boundary_point(rng, half)
        if math.hypot(goal.x - start.x, goal.y - start.y) < min_sep:
            continue
        if all(
            _polygon_distance(p, ob.vertices) >= _SG_CLEARANCE
            for ob in obstacles
            for p in (start, goal)
        ):
            break
    return Scenario(tuple(obstacles), start, goal, half, int(seed), kind=kind)


# ---------------------------------------------------------------------------
# sensing
# ---------------------------------------------------------------------------

def _cast_rays(origin: np.ndarray, dirs: np.ndarray, obstacles) -> tuple[np.ndarray, np.ndarray]:
    """Nearest intersection distance per ray and the obstacle index hit.

    Returns (t (n,), obstacle index (n,) with -1 for no hit); t is inf where
    nothing is hit.
    """
    n = len(dirs)
    t_best = np.full(n, np.inf)
    idx_best = np.full(n, -1, dtype=int)
    segs_p, segs_q, segs_ob = [], [], []
    for oi, ob in enumerate(obstacles):
        v = ob.vertices
        segs_p.append(v)
        segs_q.append(np.roll(v, -1, axis=0))
        segs_ob.append(np.full(len(v), oi))
    if not segs_p:
        return t_best, idx_best
    p = np.concatenate(segs_p)  # (m, 2)
    q = np.concatenate(segs_q)
    ob_of_seg = np.concatenate(segs_ob)
    e = q - p
    w = p - origin[None, :]
    denom = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
        u = (w[None, :, 0] * dirs[:, None, 1] - w[None, :, 1] * dirs[:, None, 0]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    j = np.argmin(t, axis=1)
    rows = np.arange(n)
    t_best = t[rows, j]
    idx_best = np.where(np.isfinite(t_best), ob_of_seg[j], -1)
    return t_best, idx_best


def sense(s: Scenario, x: RobotState, cfg: SensorConfig) -> Observation:
    """Cast rays, apply noise and dropout, rasterize, collect free cells.

    Deterministic given (scenario, state.t, cfg.seed): the RNG stream is
    derived from (cfg.seed, state.t) so repeated frames at the same step
    index reproduce bit-identically.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), int(x.t))))
    half = s.workspace_half
    origin = np.array([x.pos.x, x.pos.y])
    offsets = (np.arange(cfg.n_rays) + 0.5) / cfg.n_rays - 0.5
    angles = offsets * cfg.fov
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    t_hit, ob_idx = _cast_rays(origin, dirs, s.obstacles)
    hit_mask = t_hit <= cfg.max_range
    n_hits = int(hit_mask.sum())
    n_misses = cfg.n_rays - n_hits

    hit_pts = origin[None, :] + t_hit[hit_mask, None] * dirs[hit_mask]
    noise = rng.normal(0.0, cfg.noise_sigma, size=(n_hits, 2)) if n_hits else np.zeros((0, 2))
    keep = rng.random(n_hits) >= cfg.dropout_p if n_hits else np.zeros(0, dtype=bool)
    perceived = hit_pts + noise
    perceived = perceived[keep]
    n_dropped = n_hits - int(keep.sum())

    cell = 2.0 * half / cfg.grid_n

    def to_cell(pts):
        ij = np.floor((pts + half) / cell).astype(int)
        return np.clip(ij, 0, cfg.grid_n - 1)

    grid = np.zeros((cfg.grid_n, cfg.grid_n), dtype=bool)
    if len(perceived):
        occ = to_cell(perceived)
        grid[occ[:, 0], occ[:, 1]] = True

    # march along each ray, stopping one cell short of its termination so
    # the cell holding the surface never counts as free
    step = 0.5 * cell
    ts = np.arange(step, cfg.max_range, step)
    t_end = np.where(hit_mask, t_hit - cell, cfg.max_range)
    pts = origin[None, None, :] + ts[None, :, None] * dirs[:, None, :]
    traversed = ts[None, :] < t_end[:, None]
    inside = np.all(np.abs(pts) < half, axis=2)
    sel = pts[traversed & inside]
    if len(sel):
        ij = to_cell(sel)
        flat = np.unique(ij[:, 0] * cfg.grid_n + ij[:, 1])
        occ_flat = np.flatnonzero(grid.ravel())
        flat = np.setdiff1d(flat, occ_flat, assume_unique=True)
        if len(flat) > cfg.max_free_cells:
            stride = int(math.ceil(len(flat) / cfg.max_free_cells))
            flat = flat[::stride]
        centers = np.stack(
            [(flat // cfg.grid_n + 0.5) * cell - half, (flat % cfg.grid_n + 0.5) * cell - half],
            axis=1,
        )
    else:
        centers = np.zeros((0, 2))
    free_cells = FreeCellSet(centers, cell * cell)

    seen = np.unique(ob_idx[hit_mask][keep]) if n_hits else np.zeros(0, dtype=int)
    gt_list = [s.obstacles[i].footprint for i in seen if i >= 0]
    gt_points = np.concatenate(gt_list) if gt_list else np.zeros((0, 2))

    return Observation(
        perceived=perceived,
        grid=grid,
        free_cells=free_cells,
        gt_points=gt_points,
        grid_half=half,
        n_rays=cfg.n_rays,
        n_dropped=n_dropped,
        n_misses=n_misses,
    )


def merge_observations(frames) -> Observation:
    """Fuse several sensing frames of one scenario into a single view.

    Perceived points concatenate, occupancy grids OR together, free cells
    union (minus any cell that ever rasterized as occupied), and gt_points
    deduplicate — footprint samples are deterministic per obstacle, so
    repeated sightings collapse exactly.
    """
    frames = list(frames)
    if not frames:
        raise ArgumentError("merge_observations needs at least one frame")
    half = frames[0].grid_half
    shape = frames[0].grid.shape
    for f in frames:
        if f.grid_half != half or f.grid.shape != shape:
            raise ArgumentError("cannot merge frames over different grids")
    grid = np.zeros(shape, dtype=bool)
    for f in frames:
        grid |= f.grid
    n = shape[0]
    cell = 2.0 * half / n

    free_flats = []
    for f in frames:
        c = f.free_cells.centers
        if len(c):
            ij = np.clip(np.floor((c + half) / cell).astype(int), 0, n - 1)
            free_flats.append(ij[:, 0] * n + ij[:, 1])
    if free_flats:
        flat = np.unique(np.concatenate(free_flats))
        flat = np.setdiff1d(flat, np.flatnonzero(grid.ravel()), assume_unique=True)
        centers = np.stack(
            [(flat // n + 0.5) * cell - half, (flat % n + 0.5) * cell - half], axis=1
        )
    else:
        centers = np.zeros((0, 2))

    perceived = np.concatenate([np.asarray(f.perceived).reshape(-1, 2) for f in frames])
    gts = [np.asarray(f.gt_points).reshape(-1, 2) for f in frames if len(f.gt_points)]
    gt = np.unique(np.concatenate(gts), axis=0) if gts else np.zeros((0, 2))
    return Observation(
        perceived=perceived,
        grid=grid,
        free_cells=FreeCellSet(centers, cell * cell),
        gt_points=gt,
        grid_half=half,
        n_rays=sum(f.n_rays for f in frames),
        n_dropped=sum(f.n_dropped for f in frames),
        n_misses=sum(f.n_misses for f in frames),
    )


# ---------------------------------------------------------------------------
# dynamics and collision
# ---------------------------------------------------------------------------

def step_dynamics(x: RobotState, u, dt: float, workspace_half: float = 5.0) -> RobotState:
    """Single integrator: pos + u*dt, clamped to the workspace square."""
    nx = min(max(x.pos.x + float(u[0]) * dt, -workspace_half), workspace_half)
    ny = min(max(x.pos.y + float(u[1]) * dt, -workspace_half), workspace_half)
    return RobotState(Point2(nx, ny), x.t + 1)


def in_collision(s: Scenario, p, robot_radius: float) -> bool:
    """True iff p is strictly closer than robot_radius to any obstacle."""
    return any(
        _polygon_distance((float(p[0]), float(p[1])), ob.vertices) < robot_radius
        for ob in s.obstacles
    )

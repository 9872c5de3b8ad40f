"""Scenario sampling, the ray sensor, frame merging, dynamics."""

import dataclasses
import math

import numpy as np
import pytest

from gmipc.config import RunConfig
from gmipc.errors import ArgumentError, InvariantViolation
from gmipc.world import (
    Obstacle,
    RobotState,
    SensorConfig,
    in_collision,
    make_scenario,
    merge_observations,
    sense,
    step_dynamics,
)

SENSOR = dataclasses.replace(RunConfig().sensor, seed=3)


# ---------------------------------------------------------------------------
# obstacles
# ---------------------------------------------------------------------------

def test_obstacle_areas_match_footprint_dimensions():
    chair = make_scenario("chair", 0).obstacles[0]
    assert chair.kind == "rect_chair"
    assert chair.area == pytest.approx(0.6 * 0.6, rel=1e-9)
    sofa = make_scenario("sofa", 0).obstacles[0]
    assert sofa.kind == "l_sofa"
    # 2.0 x 1.6 bounding box minus the 1.0 x 0.8 corner notch
    assert sofa.area == pytest.approx(2.0 * 1.6 - 1.0 * 0.8, rel=1e-9)


def test_obstacle_footprint_samples_lie_on_or_in_polygon():
    sofa = make_scenario("sofa", 1).obstacles[0]
    fp = sofa.footprint
    assert len(fp) > 50
    verts = sofa.vertices
    n = len(verts)
    for p in fp[:: max(1, len(fp) // 40)]:
        edge = min(
            _dist_seg(p, verts[i], verts[(i + 1) % n]) for i in range(n)
        )
        assert _in_poly(p, verts) or edge < 1e-9


def _dist_seg(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
    return float(np.hypot(*(p - (a + t * ab))))


def _in_poly(p, verts):
    x, y = p
    inside = False
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if (y1 > y) != (y2 > y) and x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
            inside = not inside
    return inside


def test_obstacle_rejects_clockwise_polygon():
    with pytest.raises(InvariantViolation):
        Obstacle(((0, 0), (0, 1), (1, 1), (1, 0)), "rect_chair")


# ---------------------------------------------------------------------------
# scenario sampling
# ---------------------------------------------------------------------------

def test_make_scenario_is_deterministic():
    a = make_scenario("multi_sofa", 42)
    b = make_scenario("multi_sofa", 42)
    assert a.start == b.start and a.goal == b.goal
    for oa, ob in zip(a.obstacles, b.obstacles):
        np.testing.assert_array_equal(oa.vertices, ob.vertices)
    c = make_scenario("multi_sofa", 43)
    assert not np.array_equal(a.obstacles[0].vertices, c.obstacles[0].vertices)


def test_scenario_respects_clearances():
    for seed in range(15):
        s = make_scenario("multi_sofa", seed)
        assert len(s.obstacles) == 2
        half = s.workspace_half
        for ob in s.obstacles:
            assert np.all(np.abs(ob.vertices) <= half)
        for p in (s.start, s.goal):
            assert not in_collision(s, p, 0.99)  # >= 1 m start/goal clearance
        assert math.hypot(s.goal.x - s.start.x, s.goal.y - s.start.y) >= 1.5 * half


def test_empty_scenario_has_no_obstacles():
    s = make_scenario("empty", 5)
    assert s.obstacles == ()
    assert not in_collision(s, (0.0, 0.0), 10.0)


def test_unknown_kind_raises():
    with pytest.raises(ArgumentError):
        make_scenario("desk", 0)


# ---------------------------------------------------------------------------
# sensing
# ---------------------------------------------------------------------------

def test_sense_is_deterministic_per_step_index():
    s = make_scenario("sofa", 2)
    a = sense(s, RobotState(s.start, 4), SENSOR)
    b = sense(s, RobotState(s.start, 4), SENSOR)
    np.testing.assert_array_equal(a.perceived, b.perceived)
    np.testing.assert_array_equal(a.grid, b.grid)
    c = sense(s, RobotState(s.start, 5), SENSOR)
    assert a.perceived.shape != c.perceived.shape or not np.array_equal(
        a.perceived, c.perceived
    )


def test_perceived_points_hug_obstacle_boundaries():
    s = make_scenario("sofa", 2)
    # stand near the obstacle so plenty of rays hit
    ob = s.obstacles[0]
    center = ob.vertices.mean(axis=0)
    pos = center + np.array([3.0, 0.0])
    obs = sense(s, RobotState((pos[0], pos[1]), 0), SENSOR)
    assert len(obs.perceived) > 10
    verts = ob.vertices
    n = len(verts)
    for p in obs.perceived:
        d = min(_dist_seg(p, verts[i], verts[(i + 1) % n]) for i in range(n))
        # 0.03 m noise: 6 sigma plus slack for corner geometry
        assert d < 0.25


def test_sense_accounts_for_every_ray():
    s = make_scenario("multi_sofa", 7)
    obs = sense(s, RobotState(s.start, 0), SENSOR)
    n_hits = len(obs.perceived) + obs.n_dropped
    assert n_hits + obs.n_misses == obs.n_rays == SENSOR.n_rays


def test_free_cells_exclude_occupied_cells():
    s = make_scenario("sofa", 2)
    obs = sense(s, RobotState(s.start, 0), SENSOR)
    assert len(obs.free_cells) > 0
    n = obs.grid.shape[0]
    cell = 2.0 * obs.grid_half / n
    ij = np.floor((obs.free_cells.centers + obs.grid_half) / cell).astype(int)
    assert not obs.grid[ij[:, 0], ij[:, 1]].any()
    assert obs.free_cells.cell_area == pytest.approx(cell * cell, rel=1e-12)
    assert len(obs.free_cells) <= SENSOR.max_free_cells


def test_gt_points_appear_only_for_seen_obstacles():
    s = make_scenario("sofa", 2)
    far = RobotState((-s.workspace_half + 0.1, -s.workspace_half + 0.1), 0)
    blind = sense(s, far, dataclasses.replace(SENSOR, max_range=0.5))
    assert len(blind.gt_points) == 0
    near = sense(s, RobotState(s.start, 0), SENSOR)
    if len(near.perceived):
        assert len(near.gt_points) == len(s.obstacles[0].footprint)


def test_no_dropout_keeps_all_hits():
    s = make_scenario("chair", 11)
    cfg = dataclasses.replace(SENSOR, dropout_p=0.0)
    obs = sense(s, RobotState(s.start, 0), cfg)
    assert obs.n_dropped == 0


def test_sensor_config_validation():
    with pytest.raises(InvariantViolation):
        SensorConfig(n_rays=4)
    with pytest.raises(InvariantViolation):
        SensorConfig(dropout_p=1.0)
    with pytest.raises(InvariantViolation):
        SensorConfig(noise_sigma=-0.1)


# ---------------------------------------------------------------------------
# merging
# ---------------------------------------------------------------------------

def test_merge_observations_unions_evidence():
    s = make_scenario("multi_sofa", 3)
    half = s.workspace_half
    ring = [
        (0.85 * half * math.cos(a), 0.85 * half * math.sin(a))
        for a in np.linspace(0.0, 2.0 * math.pi, 6, endpoint=False)
    ]
    frames = [
        sense(s, RobotState(p, t), SENSOR)
        for t, p in enumerate(ring)
        if not in_collision(s, p, 0.0)
    ]
    merged = merge_observations(frames)
    assert len(merged.perceived) == sum(len(f.perceived) for f in frames)
    assert merged.n_rays == sum(f.n_rays for f in frames)
    # grid is the union
    want = np.zeros_like(frames[0].grid)
    for f in frames:
        want |= f.grid
    np.testing.assert_array_equal(merged.grid, want)
    # gt points deduplicate: never more than the union of footprints
    total_fp = sum(len(ob.footprint) for ob in s.obstacles)
    assert 0 < len(merged.gt_points) <= total_fp
    assert len(np.unique(merged.gt_points, axis=0)) == len(merged.gt_points)
    # merged free cells never collide with merged occupancy
    n = merged.grid.shape[0]
    cell = 2.0 * half / n
    ij = np.floor((merged.free_cells.centers + half) / cell).astype(int)
    assert not merged.grid[ij[:, 0], ij[:, 1]].any()


def test_merge_single_frame_is_identity_on_evidence():
    s = make_scenario("chair", 11)
    f = sense(s, RobotState(s.start, 0), SENSOR)
    m = merge_observations([f])
    np.testing.assert_array_equal(m.perceived, f.perceived)
    np.testing.assert_array_equal(m.grid, f.grid)
    np.testing.assert_array_equal(
        np.unique(m.gt_points, axis=0), np.unique(f.gt_points, axis=0)
    )


def test_merge_rejects_mismatched_grids():
    s = make_scenario("chair", 11)
    a = sense(s, RobotState(s.start, 0), SENSOR)
    b = sense(s, RobotState(s.start, 0), dataclasses.replace(SENSOR, grid_n=32))
    with pytest.raises(ArgumentError):
        merge_observations([a, b])
    with pytest.raises(ArgumentError):
        merge_observations([])


# ---------------------------------------------------------------------------
# dynamics and collision
# ---------------------------------------------------------------------------

def test_step_dynamics_integrates_and_clamps():
    x = RobotState((0.0, 0.0), 3)
    nxt = step_dynamics(x, (1.0, -0.5), 0.1, 5.0)
    assert nxt.pos.x == pytest.approx(0.1)
    assert nxt.pos.y == pytest.approx(-0.05)
    assert nxt.t == 4
    edge = step_dynamics(RobotState((4.95, 0.0), 0), (10.0, 0.0), 1.0, 5.0)
    assert edge.pos.x == 5.0


def test_in_collision_respects_radius():
    s = make_scenario("chair", 0)
    ob = s.obstacles[0]
    center = ob.vertices.mean(axis=0)
    # the check is strict ("closer than radius"), so radius 0 never collides
    assert not in_collision(s, center, 0.0)
    assert in_collision(s, center, 0.01)
    far = center + np.array([3.0, 0.0])
    assert not in_collision(s, far, 0.3)
    assert in_collision(s, far, 3.5)

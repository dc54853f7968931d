import math

import numpy as np
import pytest

from lgc import flocking
from lgc.flocking import (
    DEGENERATE_REPULSION,
    ScenarioConfig,
    SimulationDiverged,
    World,
    build_comm_graph,
    ca_gradient,
    expert_controls,
    expert_follower,
    expert_leader,
    extract_features,
    flocking_error,
    generate_dataset,
    leader_error,
    make_expert_controller,
    rollout,
    sample_positions,
    sample_world,
    split_counts,
    step_dynamics,
    trajectory_from_dict,
    trajectory_to_dict,
)

from conftest import support_of


def _world(positions, velocities=None, leader=0, target=(0.0, 0.0), **kw):
    positions = np.asarray(positions, dtype=np.float64)
    if velocities is None:
        velocities = np.zeros_like(positions)
    return World(
        positions=positions,
        velocities=np.asarray(velocities, dtype=np.float64),
        leader=leader,
        target=np.asarray(target, dtype=np.float64),
        **kw,
    )


def _zero_controller(world, graph, features):
    return np.zeros((world.n, 2))


# ---------------------------------------------------------------------------
# dynamics


def test_step_dynamics_example():
    w = _world([[0.0, 0.0], [10.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]])
    nxt = step_dynamics(w, np.array([[0.0, 1.0], [0.0, 0.0]]))
    np.testing.assert_allclose(nxt.positions[0], [0.05, 0.0])
    np.testing.assert_allclose(nxt.velocities[0], [1.0, 0.05])


def test_step_dynamics_zero_control_is_ballistic():
    w = _world([[0.0, 1.0], [5.0, 0.0]], [[0.5, -0.25], [1.0, 2.0]])
    nxt = step_dynamics(w, np.zeros((2, 2)))
    np.testing.assert_array_equal(nxt.velocities, w.velocities)
    np.testing.assert_allclose(nxt.positions, w.positions + 0.05 * w.velocities)


def test_step_dynamics_validation():
    w = _world([[0.0, 0.0], [1.5, 0.0]])
    with pytest.raises(ValueError):
        step_dynamics(w, np.zeros((3, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        step_dynamics(w, np.full((2, 2), np.nan))
    with pytest.raises(ValueError, match="saturation"):
        step_dynamics(w, np.full((2, 2), 6.0))


def test_world_validation():
    with pytest.raises(ValueError, match="two agents"):
        _world([[0.0, 0.0]])
    with pytest.raises(ValueError, match="comm_radius"):
        _world([[0.0, 0.0], [1.0, 0.0]], comm_radius=0.5, sensing_radius=1.0)
    with pytest.raises(ValueError, match="leader"):
        _world([[0.0, 0.0], [1.0, 0.0]], leader=5)


# ---------------------------------------------------------------------------
# communication graph and features


def test_comm_graph_radius_convention():
    for dist, expect_edge in ((3.0, True), (4.0, True), (5.0, False)):
        w = _world([[0.0, 0.0], [dist, 0.0]])
        g = build_comm_graph(w)
        assert (len(g.edges) == 1) is expect_edge
    w = _world([[0.0, 0.0], [3.0, 0.0]])
    assert build_comm_graph(w).edges == ((0, 1, 1.0),)


def test_comm_graph_symmetric_zero_diagonal_every_tick(rng):
    positions = rng.uniform(-2.0, 2.0, (5, 2))
    w = _world(positions, rng.uniform(-1.0, 1.0, (5, 2)), leader=2)
    traj, _ = rollout(make_expert_controller(), w, 0.5)
    for rec in traj.records:
        adj = support_of(rec.graph, kind="adjacency", order=1).matrix
        np.testing.assert_array_equal(adj, adj.T)
        assert np.all(np.diag(adj) == 0.0)


def test_features_isolated_follower():
    w = _world([[0.0, 0.0], [30.0, 0.0]], [[0.5, 0.0], [1.0, -1.0]],
               leader=1, target=(32.0, 3.0))
    feats = extract_features(w)
    np.testing.assert_array_equal(feats[0], [0.5, 0, 0, 0, 0, 0, 0, 0, 0, 1])
    # leader carries the goal offset r_l - d and the [1, 0] flag
    np.testing.assert_array_equal(feats[1], [1, -1, 0, 0, 0, 0, -2, -3, 1, 0])


def test_features_proximity_sums_hand_value():
    # pair 0.5 m apart: 4th-power sum 0.5/0.0625 = 8 along +x for the
    # agent on the right (offset convention r_i - r_j)
    w = _world([[0.0, 0.0], [0.5, 0.0], [20.0, 0.0]], leader=2)
    feats = extract_features(w)
    np.testing.assert_allclose(feats[1, 2:6], [8.0, 0.0, 2.0, 0.0])
    np.testing.assert_allclose(feats[0, 2:6], [-8.0, 0.0, -2.0, 0.0])
    np.testing.assert_array_equal(feats[2, 2:6], np.zeros(4))


def test_features_depend_only_on_sensing_neighbours():
    base = [[0.0, 0.0], [0.5, 0.0], [2.0, 0.0]]
    moved = [[0.0, 0.0], [0.5, 0.0], [3.0, 0.0]]
    w1 = _world(base, leader=0, target=(1.0, 1.0))
    w2 = _world(moved, leader=0, target=(1.0, 1.0))
    f1, f2 = extract_features(w1), extract_features(w2)
    np.testing.assert_array_equal(f1[:2], f2[:2])


# ---------------------------------------------------------------------------
# collision avoidance


def test_ca_gradient_values():
    np.testing.assert_allclose(ca_gradient(np.array([1.0, 0.0]), 1.0), [-2.0, 0.0])
    np.testing.assert_allclose(ca_gradient(np.array([0.5, 0.0]), 1.0), [-10.0, 0.0])
    np.testing.assert_array_equal(ca_gradient(np.array([2.0, 0.0]), 1.0), [0.0, 0.0])


def test_ca_gradient_compares_squared_distance_to_radius():
    # with R_CA = 2 the activation set is d^2 <= 2, not d <= 2
    assert np.array_equal(ca_gradient(np.array([1.5, 0.0]), 2.0), np.zeros(2))
    assert np.any(ca_gradient(np.array([1.4, 0.0]), 2.0) != 0.0)


def test_ca_gradient_coincident_agents_capped():
    g = ca_gradient(np.zeros(2), 1.0)
    np.testing.assert_array_equal(g, [-DEGENERATE_REPULSION, 0.0])


def test_expert_matches_pairwise_hand_computation(rng):
    positions = np.array([[0.0, 0.0], [0.6, 0.1], [0.2, 0.7], [5.0, 5.0]])
    velocities = rng.uniform(-1.0, 1.0, (4, 2))
    w = _world(positions, velocities, leader=3, target=(6.0, 6.0))
    got = expert_controls(w)
    vbar = velocities.mean(axis=0)
    for i in range(4):
        ca = sum(
            ca_gradient(positions[i] - positions[j], w.sensing_radius)
            for j in range(4) if j != i
        )
        if i == w.leader:
            want = -w.leader_gain * (positions[i] - w.target) - ca
        else:
            want = vbar - ca
        np.testing.assert_allclose(got[i], np.clip(want, -5.0, 5.0), atol=1e-12)


# ---------------------------------------------------------------------------
# expert controllers


def test_expert_follower_mean_velocity_example():
    w = _world([[0.0, 0.0], [10.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(expert_follower(w), [[1.0, 0.0], [1.0, 0.0]])
    # conventional form cancels when already in consensus
    np.testing.assert_array_equal(
        expert_follower(w, consensus="conventional"), np.zeros((2, 2))
    )


def test_expert_follower_rejects_unknown_mode():
    w = _world([[0.0, 0.0], [1.5, 0.0]])
    with pytest.raises(ValueError, match="consensus"):
        expert_follower(w, consensus="averaged")


def test_expert_leader_proportional_pull():
    w = _world([[1.0, 0.0], [10.0, 0.0]], leader=0, target=(0.0, 0.0))
    np.testing.assert_allclose(expert_leader(w), [-1.0, 0.0])


def test_expert_controls_saturate_and_override_leader_row(rng):
    positions = rng.uniform(-0.5, 0.5, (6, 2))  # crowded: big CA kicks
    w = _world(positions, rng.uniform(-2.0, 2.0, (6, 2)), leader=1,
               target=(9.0, -9.0))
    u = expert_controls(w)
    assert np.max(np.abs(u)) <= 5.0
    np.testing.assert_array_equal(u[1], expert_leader(w))


# ---------------------------------------------------------------------------
# rollouts and metrics


def test_rollout_record_layout():
    w = _world([[0.0, 0.0], [1.5, 0.0]], [[0.2, 0.0], [-0.2, 0.0]])
    traj, metrics = rollout(make_expert_controller(), w, 0.5,
                            expert=lambda world: expert_controls(world))
    assert len(traj.records) == 11  # 10 applied ticks plus the terminal state
    assert [r.t for r in traj.records] == list(range(11))
    for rec in traj.records:
        assert rec.features.shape == (2, 10)
        assert rec.expert is not None
        np.testing.assert_array_equal(rec.expert, rec.applied)
    assert metrics["max_control"] <= 5.0
    assert not traj.diverged


def test_rollout_rejects_off_grid_duration():
    w = _world([[0.0, 0.0], [1.5, 0.0]])
    with pytest.raises(ValueError, match="duration"):
        rollout(_zero_controller, w, 0.52)


def test_rollout_flags_divergence_with_partial():
    w = _world([[0.0, np.nan], [1.5, 0.0]])
    with pytest.raises(SimulationDiverged) as err:
        rollout(_zero_controller, w, 0.5)
    assert err.value.partial is not None
    assert err.value.partial.diverged
    assert err.value.partial.records == []


def test_flocking_error_two_agent_example():
    w = _world([[0.0, 0.0], [10.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]])
    traj, metrics = rollout(_zero_controller, w, 0.5)
    assert metrics["flocking_error"] == 1.0
    assert flocking_error(traj) == 1.0


def test_flocking_error_zero_in_consensus():
    w = _world([[0.0, 0.0], [1.5, 0.0]], [[0.7, -0.3], [0.7, -0.3]])
    _, metrics = rollout(_zero_controller, w, 0.25)
    assert metrics["flocking_error"] == 0.0


def test_ballistic_motion_keeps_flocking_error_constant(rng):
    w = _world(rng.uniform(-3.0, 3.0, (4, 2)), rng.uniform(-1.0, 1.0, (4, 2)),
               leader=2)
    _, metrics = rollout(_zero_controller, w, 0.5)
    assert math.isclose(metrics["initial_flocking"], metrics["final_flocking"],
                        rel_tol=1e-12)


def test_leader_error_endpoints():
    # motionless leader two metres from target: ratio stays 1
    w = _world([[2.0, 0.0], [10.0, 0.0]], leader=0, target=(0.0, 0.0))
    traj, _ = rollout(_zero_controller, w, 0.25)
    assert leader_error(traj) == 1.0
    # leader starting on the target reports zero
    w2 = _world([[0.0, 0.0], [10.0, 0.0]], leader=0, target=(0.0, 0.0))
    traj2, _ = rollout(_zero_controller, w2, 0.25)
    assert leader_error(traj2) == 0.0


def test_rollout_is_deterministic(rng):
    positions = rng.uniform(-2.0, 2.0, (5, 2))
    velocities = rng.uniform(-1.0, 1.0, (5, 2))
    runs = []
    for _ in range(2):
        w = _world(positions.copy(), velocities.copy(), leader=3)
        traj, _ = rollout(make_expert_controller(), w, 0.5,
                          expert=lambda world: expert_controls(world))
        runs.append(trajectory_to_dict(traj))
    assert runs[0] == runs[1]


def test_trajectory_round_trip(rng):
    w = _world(rng.uniform(-2.0, 2.0, (4, 2)), rng.uniform(-1.0, 1.0, (4, 2)),
               leader=1, target=(3.0, -2.0))
    traj, _ = rollout(make_expert_controller(), w, 0.25,
                      expert=lambda world: expert_controls(world))
    traj.seed = [9, 0]
    doc = trajectory_to_dict(traj, split="train")
    assert doc["split"] == "train"
    back = trajectory_from_dict(doc)
    assert trajectory_to_dict(back, split="train") == doc
    assert back.records[3].graph == traj.records[3].graph


# ---------------------------------------------------------------------------
# scenario sampling


def test_sample_positions_respects_spacing_band(rng):
    cfg = ScenarioConfig(seed=0)
    for n in (4, 10):
        pts = sample_positions(rng, n, cfg)
        assert pts.shape == (n, 2)
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        nearest = d.min(axis=1)
        assert np.all(nearest >= cfg.spacing_min - 1e-12)
        assert np.all(nearest <= cfg.spacing_max + 1e-12)


def test_sample_positions_retry_cap():
    cfg = ScenarioConfig(seed=0, retry_factor=0)
    rng = np.random.default_rng(3)
    with pytest.raises(RuntimeError, match="retry cap"):
        sample_positions(rng, 4, cfg)


def test_sample_world_ranges(rng):
    cfg = ScenarioConfig(seed=0)
    for _ in range(10):
        w = sample_world(rng, 6, cfg)
        assert np.max(np.abs(w.velocities)) <= cfg.speed
        assert 0 <= w.leader < 6
        offset = w.target - w.positions[w.leader]
        assert np.max(np.abs(offset)) <= cfg.target_half_width


def test_sample_world_flags(rng):
    cfg = ScenarioConfig(seed=0, mission=False, leader_at_rest=True)
    w = sample_world(rng, 5, cfg)
    np.testing.assert_array_equal(w.velocities[w.leader], np.zeros(2))
    np.testing.assert_array_equal(w.target, w.positions[w.leader])


def test_split_counts_follow_seventy_ten_twenty():
    assert split_counts(60) == (42, 6, 12)
    assert split_counts(10) == (7, 1, 2)


def test_generate_dataset_small_corpus():
    cfg = ScenarioConfig(seed=11, n_trajectories=5, team_sizes=(4,), duration=0.25)
    ds = generate_dataset(cfg)
    assert len(ds.trajectories) == 5
    assert ds.splits == ["train", "train", "train", "test", "test"]
    assert ds.config["seed"] == 11
    for i, traj in enumerate(ds.trajectories):
        assert traj.seed == [11, i]
        assert traj.n == 4
        assert len(traj.records) == 6
        for rec in traj.records:
            assert rec.expert is not None
            assert np.max(np.abs(rec.applied)) <= 5.0

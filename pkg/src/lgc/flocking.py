"""Flocking benchmark: double-integrator agents with a leader and a target.

Agents exchange state over a distance-limited communication graph and
must agree on a common velocity while avoiding collisions; one designated
leader additionally steers toward a target point.  The expert controller
is centralized (it sees every agent) and is what the learned distributed
policies imitate.

Two velocity-consensus variants are provided.  The default follower rule
pushes each agent toward the raw team-mean velocity (it preserves
relative velocity deviations exactly and is kept for fidelity with the
source controller description); the "conventional" rule applies the
classic consensus feedback -sum_j (v_i - v_j), which actually damps
deviations and is what the expert-quality checks use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .graph import Graph, build_support
from .models import policy_forward
from .autodiff import value_of


class SimulationDiverged(RuntimeError):
    """Raised when a rollout produces non-finite state; carries the partial run."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class World:
    """Snapshot of the team state plus the static scenario constants."""

    positions: np.ndarray          # (N, 2) m
    velocities: np.ndarray         # (N, 2) m/s
    leader: int
    target: np.ndarray             # (2,) m
    dt: float = 0.05               # control/communication period, s
    comm_radius: float = 4.0       # R
    sensing_radius: float = 1.0    # R_CA
    leader_gain: float = 1.0       # W_p
    u_max: float = 5.0             # m/s^2

    def __post_init__(self):
        r = np.ascontiguousarray(self.positions, dtype=np.float64)
        v = np.ascontiguousarray(self.velocities, dtype=np.float64)
        object.__setattr__(self, "positions", r)
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64))
        if r.ndim != 2 or r.shape[1] != 2 or v.shape != r.shape:
            raise ValueError("positions and velocities must be matching (N, 2) arrays")
        if r.shape[0] < 2:
            raise ValueError("need at least two agents")
        if not (self.comm_radius > self.sensing_radius > 0):
            raise ValueError("need comm_radius > sensing_radius > 0")
        if not (0 <= self.leader < r.shape[0]):
            raise ValueError("leader index out of range")

    @property
    def n(self):
        return self.positions.shape[0]


def step_dynamics(world, u):
    """Exact double-integrator tick: r += dt v; v += dt u."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != world.positions.shape:
        raise ValueError("control must be (N, 2)")
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite control input")
    if np.max(np.abs(u)) > world.u_max + 1e-9:
        raise ValueError(f"control exceeds saturation bound {world.u_max}")
    return replace(
        world,
        positions=world.positions + world.dt * world.velocities,
        velocities=world.velocities + world.dt * u,
    )


def _sense(world):
    return _kernels.flocking_pass(
        world.positions,
        world.velocities,
        int(world.leader),
        world.target,
        float(world.comm_radius),
        float(world.sensing_radius),
    )


def build_comm_graph(world):
    """Unit-weight graph joining agents within comm_radius (inclusive)."""
    adj, _ = _sense(world)
    ii, jj = np.nonzero(np.triu(adj, 1))
    return Graph(n=world.n, edges=tuple((int(i), int(j), 1.0) for i, j in zip(ii, jj)))


def extract_features(world):
    """Raw per-agent feature rows (N, 10): velocity, proximity sums within
    the sensing radius, leader-only goal offset, and the role one-hot."""
    _, feats = _sense(world)
    return feats


DEGENERATE_REPULSION = 1e3


def ca_gradient(r_ij, sensing_radius, degenerate_magnitude=DEGENERATE_REPULSION):
    """Collision-avoidance potential gradient for one pair offset r_ij.

    Active when the squared distance is at most sensing_radius (the
    squared-versus-linear comparison is deliberate); coincident agents
    get a capped gradient along a fixed axis.
    """
    r = np.asarray(r_ij, dtype=np.float64)
    d2 = float(r @ r)
    if d2 > sensing_radius:
        return np.zeros(2)
    if d2 == 0.0:
        return np.array([-degenerate_magnitude, 0.0])
    return -r / d2 ** 2 - r / d2


def _ca_gradient_rows(world):
    """Collision gradient sums over all other agents, one row per agent."""
    r = world.positions
    diff = r[:, None, :] - r[None, :, :]
    d2 = np.sum(diff * diff, axis=2)
    np.fill_diagonal(d2, np.inf)
    active = d2 <= world.sensing_radius
    coincident = active & (d2 == 0.0)
    with np.errstate(divide="ignore"):
        w = np.where(active & ~coincident, 1.0 / (d2 * d2) + 1.0 / d2, 0.0)
    grad = -np.einsum("ijc,ij->ic", diff, w)
    if np.any(coincident):
        grad += np.stack(
            [-DEGENERATE_REPULSION * coincident.sum(axis=1), np.zeros(world.n)], axis=1
        )
    return grad


CONSENSUS_MODES = ("verbatim", "conventional")


def expert_follower(world, consensus="verbatim"):
    """Follower rule for every agent: consensus term minus the CA gradient.

    verbatim     u_i = mean_j v_j - grad_CA_i   (as printed in the source
                 controller; note it never damps velocity deviations)
    conventional u_i = -sum_j (v_i - v_j) - grad_CA_i
    """
    if consensus not in CONSENSUS_MODES:
        raise ValueError(f"unknown consensus mode {consensus!r}")
    v = world.velocities
    if consensus == "verbatim":
        term = np.broadcast_to(v.mean(axis=0), v.shape)
    else:
        term = world.n * (v.mean(axis=0)[None, :] - v)
    u = term - _ca_gradient_rows(world)
    return np.clip(u, -world.u_max, world.u_max)


def expert_leader(world):
    """Leader rule: proportional pull toward the target minus CA gradient."""
    pull = -world.leader_gain * (world.positions[world.leader] - world.target)
    u = pull - _ca_gradient_rows(world)[world.leader]
    return np.clip(u, -world.u_max, world.u_max)


def expert_controls(world, consensus="verbatim"):
    """Full expert action: follower rule everywhere, leader rule on its row."""
    u = expert_follower(world, consensus)
    u[world.leader] = expert_leader(world)
    return u


def make_expert_controller(consensus="verbatim"):
    def control(world, graph, features):
        return expert_controls(world, consensus)

    return control


def make_policy_controller(policy, support_kind="normalized_laplacian"):
    """Stateful closure driving a learned policy; fresh per rollout."""
    hidden = {"x": None}

    def control(world, graph, features):
        if hidden["x"] is None:
            hidden["x"] = policy.initial_state(world.n)
        support = build_support(graph, support_kind, policy.core.order)
        controls, hidden["x"] = policy_forward(policy, support, hidden["x"], features)
        return np.asarray(value_of(controls))

    return control


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    t: int
    features: np.ndarray       # (N, 10)
    expert: np.ndarray         # (N, 2) labels, or None
    applied: np.ndarray        # (N, 2) actually executed
    positions: np.ndarray      # (N, 2)
    graph: Graph


@dataclass
class Trajectory:
    n: int
    leader: int
    target: np.ndarray
    dt: float
    comm_radius: float
    sensing_radius: float
    records: list
    seed: object = None
    diverged: bool = False


def rollout(controller, world0, duration, expert=None):
    """Run `controller` for `duration` seconds, recording every tick.

    Records hold the pre-step state at ticks 0..T-1 plus a terminal
    record at t=T (its controls are evaluated but never applied).  When
    `expert` is given, its action at each visited state is stored as the
    imitation label.  Non-finite states raise SimulationDiverged with the
    partial trajectory attached.
    """
    steps = round(duration / world0.dt)
    if steps < 1 or abs(steps * world0.dt - duration) > 1e-9:
        raise ValueError("duration must be a positive multiple of the sampling period")
    traj = Trajectory(
        n=world0.n,
        leader=world0.leader,
        target=world0.target.copy(),
        dt=world0.dt,
        comm_radius=world0.comm_radius,
        sensing_radius=world0.sensing_radius,
        records=[],
    )
    world = world0
    for t in range(steps + 1):
        if not (np.all(np.isfinite(world.positions)) and np.all(np.isfinite(world.velocities))):
            traj.diverged = True
            raise SimulationDiverged(
                f"non-finite state at tick {t} of {steps}", partial=traj
            )
        graph = build_comm_graph(world)
        feats = extract_features(world)
        u = np.clip(
            np.asarray(controller(world, graph, feats), dtype=np.float64),
            -world.u_max,
            world.u_max,
        )
        label = None if expert is None else expert(world)
        traj.records.append(
            TrajectoryRecord(
                t=t,
                features=feats,
                expert=label,
                applied=u,
                positions=world.positions.copy(),
                graph=graph,
            )
        )
        if t < steps:
            world = step_dynamics(world, u)
    return traj, trajectory_metrics(traj)


def _tick_flocking_error(features):
    v = features[:, 0:2]
    dev = v - v.mean(axis=0)
    return float(np.mean(np.linalg.norm(dev, axis=1)))


def flocking_error(traj):
    """Time-averaged mean deviation from the team mean velocity (m/s)."""
    if not traj.records:
        raise ValueError("empty trajectory")
    return float(np.mean([_tick_flocking_error(r.features) for r in traj.records]))


def leader_error(traj):
    """Final over initial squared leader-target distance (dimensionless)."""
    if not traj.records:
        raise ValueError("empty trajectory")
    first = traj.records[0].features[traj.leader, 6:8]
    last = traj.records[-1].features[traj.leader, 6:8]
    e_s = float(first @ first)
    e_f = float(last @ last)
    if e_s == 0.0:
        return 0.0 if e_f == 0.0 else math.inf
    return e_f / e_s


def trajectory_metrics(traj):
    return {
        "flocking_error": flocking_error(traj),
        "leader_error": leader_error(traj),
        "initial_flocking": _tick_flocking_error(traj.records[0].features),
        "final_flocking": _tick_flocking_error(traj.records[-1].features),
        "max_control": float(max(np.max(np.abs(r.applied)) for r in traj.records)),
    }


def trajectory_to_dict(traj, split=None):
    doc = {
        "seed": traj.seed,
        "n": traj.n,
        "leader": traj.leader,
        "target": traj.target.tolist(),
        "dt": traj.dt,
        "comm_radius": traj.comm_radius,
        "sensing_radius": traj.sensing_radius,
        "diverged": traj.diverged,
        "records": [
            {
                "t": r.t,
                "features": r.features.tolist(),
                "expert": None if r.expert is None else np.asarray(r.expert).tolist(),
                "applied": r.applied.tolist(),
                "positions": r.positions.tolist(),
                "graph": r.graph.to_dict(),
            }
            for r in traj.records
        ],
    }
    if split is not None:
        doc["split"] = split
    return doc


def trajectory_from_dict(doc):
    records = [
        TrajectoryRecord(
            t=int(r["t"]),
            features=np.asarray(r["features"], dtype=np.float64),
            expert=None if r["expert"] is None else np.asarray(r["expert"], dtype=np.float64),
            applied=np.asarray(r["applied"], dtype=np.float64),
            positions=np.asarray(r["positions"], dtype=np.float64),
            graph=Graph.from_dict(r["graph"]),
        )
        for r in doc["records"]
    ]
    return Trajectory(
        n=int(doc["n"]),
        leader=int(doc["leader"]),
        target=np.asarray(doc["target"], dtype=np.float64),
        dt=float(doc["dt"]),
        comm_radius=float(doc["comm_radius"]),
        sensing_radius=float(doc["sensing_radius"]),
        records=records,
        seed=doc.get("seed"),
        diverged=bool(doc.get("diverged", False)),
    )


# ---------------------------------------------------------------------------
# scenario generation


@dataclass
class ScenarioConfig:
    """Knobs for initial-condition sampling and expert-driven recording."""

    seed: int
    n_trajectories: int = 60
    team_sizes: tuple = (4, 6, 10, 12, 15)
    duration: float = 2.5
    dt: float = 0.05
    comm_radius: float = 4.0
    sensing_radius: float = 1.0
    leader_gain: float = 1.0
    u_max: float = 5.0
    speed: float = 2.0             # initial velocity components ~ U(-speed, speed)
    target_half_width: float = 10.0  # target ~ leader + U(-w, w)^2
    spacing_min: float = 0.6
    spacing_max: float = 1.0
    retry_factor: int = 10
    consensus: str = "verbatim"
    mission: bool = True           # False pins the target to the leader start
    leader_at_rest: bool = False   # zero the leader's initial velocity

    def to_dict(self):
        d = dict(self.__dict__)
        d["team_sizes"] = list(self.team_sizes)
        return d


def sample_positions(rng, n, cfg):
    """Poisson-disk-style placement: each new agent lands within the
    spacing band of some already-placed agent and keeps the minimum
    spacing to everyone.  Confined to a square of side 0.8 * sqrt(N)."""
    # side 0.8 * sqrt(n), centered; widened in proportion when the spacing
    # band is above the stock 0.6 m so the sampler stays feasible
    half = 0.4 * math.sqrt(n) * max(1.0, cfg.spacing_min / 0.6)
    budget = cfg.retry_factor * n * n
    pts = [rng.uniform(-half, half, 2)]
    while len(pts) < n:
        placed = False
        while budget > 0:
            budget -= 1
            anchor = pts[rng.integers(len(pts))]
            radius = rng.uniform(cfg.spacing_min, cfg.spacing_max)
            angle = rng.uniform(0.0, 2.0 * math.pi)
            cand = anchor + radius * np.array([math.cos(angle), math.sin(angle)])
            if np.any(np.abs(cand) > half):
                continue
            d = np.linalg.norm(np.asarray(pts) - cand, axis=1)
            if np.min(d) < cfg.spacing_min:
                continue
            pts.append(cand)
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"placement sampler exceeded the retry cap for n={n}"
            )
    return np.asarray(pts)


def sample_world(rng, n, cfg):
    positions = sample_positions(rng, n, cfg)
    velocities = rng.uniform(-cfg.speed, cfg.speed, size=(n, 2))
    leader = int(rng.integers(n))
    if cfg.leader_at_rest:
        velocities[leader] = 0.0
    if cfg.mission:
        target = positions[leader] + rng.uniform(
            -cfg.target_half_width, cfg.target_half_width, 2
        )
    else:
        target = positions[leader].copy()
    return World(
        positions=positions,
        velocities=velocities,
        leader=leader,
        target=target,
        dt=cfg.dt,
        comm_radius=cfg.comm_radius,
        sensing_radius=cfg.sensing_radius,
        leader_gain=cfg.leader_gain,
        u_max=cfg.u_max,
    )


def split_counts(n):
    """70/10/20 split by trajectory, floor-assigned in that order."""
    train = int(n * 0.7)
    val = int(n * 0.1)
    return train, val, n - train - val


def generate_dataset(cfg):
    """Expert-driven scenario corpus with split tags (returns a Dataset)."""
    from .training import Dataset

    rng = np.random.default_rng(cfg.seed)
    expert = lambda world: expert_controls(world, cfg.consensus)
    trajectories = []
    for i in range(cfg.n_trajectories):
        n = int(cfg.team_sizes[rng.integers(len(cfg.team_sizes))])
        world = sample_world(rng, n, cfg)
        traj, _ = rollout(
            make_expert_controller(cfg.consensus), world, cfg.duration, expert=expert
        )
        traj.seed = [cfg.seed, i]
        trajectories.append(traj)
    n_train, n_val, _ = split_counts(len(trajectories))
    splits = ["train"] * n_train + ["val"] * n_val
    splits += ["test"] * (len(trajectories) - len(splits))
    return Dataset(trajectories=trajectories, splits=splits, config=cfg.to_dict())

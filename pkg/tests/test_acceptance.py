"""End-to-end acceptance gate.

Each test checks one release criterion and prints a single PASS/FAIL
line (visible with `pytest -s`).  Tolerances are pinned here and nowhere
else; the suite is deterministic for the frozen seeds.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from lgc import flocking
from lgc.autodiff import value_of
from lgc.flocking import ScenarioConfig
from lgc.graph import Graph, build_support
from lgc.models import (
    CfGCParams,
    GGNNParams,
    LGTCParams,
    cfgc_step,
    ggnn_step,
    lgtc_hybrid_step,
    lgtc_integrate,
    lgtc_vector_field,
    make_policy,
    poly_filter,
    policy_param_arrays,
    policy_with_arrays,
)
from lgc.stability import (
    SupportBounds,
    empirical_jacobian,
    ggnn_delta_iss_margin,
    lgtc_contraction_rate,
    log_norm_inf,
)
from lgc.training import TrainConfig, imitation_loss, policy_gradients, train

from conftest import assert_grads_close, finite_difference


def _verdict(name, ok, detail):
    print(f"\n[acceptance] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


def _unit_graph(rng, n, p=0.6):
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.uniform() < p:
                edges.append((i, j, 1.0))
    if not edges:
        edges.append((0, 1, 1.0))
    return Graph(n=n, edges=tuple(edges))


def _weighted_graph(rng, n, p=0.6):
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.uniform() < p:
                edges.append((i, j, float(rng.uniform(0.5, 2.0))))
    if not edges:
        edges.append((0, 1, 1.0))
    return Graph(n=n, edges=tuple(edges))


LIQUID_FIELDS = ("decay", "coupling_filters", "rate_state_filters",
                 "rate_state_bias", "rate_input_filters", "rate_input_bias",
                 "drive_filters")


def _certified_liquid(rng, f=3, order=2, cls=LGTCParams, **kw):
    """Decay-dominated family: constant decay and rate bias realize the
    certificate's max-norms rowwise, rate filters small enough that the
    relu stays active on the unit box, coupling zero."""
    p = cls.zeros(f, f, order, **kw) if kw else cls.zeros(f, f, order)
    p.decay[:] = rng.uniform(0.5, 1.5)
    p.rate_state_bias[:] = rng.uniform(0.2, 0.6)
    p.rate_input_bias[:] = rng.uniform(0.0, 0.3, f)
    p.rate_state_filters[:] = rng.uniform(-0.01, 0.01, p.rate_state_filters.shape)
    p.rate_input_filters[:] = rng.uniform(-0.05, 0.05, p.rate_input_filters.shape)
    p.drive_filters[:] = rng.uniform(-0.05, 0.05, p.drive_filters.shape)
    return p


def _certified_setup(rng, order=2):
    n = int(rng.integers(2, 5))
    sup = build_support(_unit_graph(rng, n), "normalized_laplacian", order)
    bounds = SupportBounds.from_supports([sup], order)
    return n, sup, bounds


# ---------------------------------------------------------------------------
# filters


def _loop_filter(powers, x, bank, mask=None):
    # fully unrolled dense reference, no shared code with the package
    n, g = x.shape
    f = bank.shape[2]
    out = np.zeros((n, f))
    for k in range(bank.shape[0]):
        for i in range(n):
            for a in range(f):
                acc = 0.0
                for j in range(n):
                    for b in range(g):
                        if k == 0:
                            shift = 1.0 if i == j else 0.0
                        elif mask is not None and mask[b] == 0.0:
                            shift = 1.0 if i == j else 0.0
                        else:
                            shift = powers[k][i, j]
                        acc += shift * x[j, b] * bank[k][b, a]
                out[i, a] += acc
    return out


def test_filter_matches_dense_reference():
    rng = np.random.default_rng(6)
    t0 = time.time()
    worst = 0.0
    for inst in range(200):
        n = int(rng.integers(2, 7))
        g = int(rng.integers(1, 5))
        f = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        kind = ("adjacency", "laplacian", "normalized_laplacian")[inst % 3]
        sup = build_support(_weighted_graph(rng, n), kind, k)
        x = rng.normal(size=(n, g))
        bank = rng.normal(size=(k + 1, g, f))
        mask = None if inst % 2 == 0 else rng.integers(0, 2, g).astype(float)
        got = np.asarray(value_of(poly_filter(sup.powers, x, bank, mask)))
        want = _loop_filter(sup.powers, x, bank, mask)
        scale = max(1.0, float(np.max(np.abs(want))))
        worst = max(worst, float(np.max(np.abs(got - want))) / scale)
    elapsed = time.time() - t0
    _verdict("graph filter vs dense reference", worst <= 1e-12 and elapsed < 5.0,
             f"200 instances, worst rel err {worst:.2e}, {elapsed:.2f}s")


def test_kronecker_lift_matches_filter_tap():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 6))
        f = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        sup = build_support(_weighted_graph(rng, n), "normalized_laplacian", k)
        x = rng.normal(size=(n, f))
        a_k = rng.normal(size=(f, f))
        s_k = sup.powers[k]
        lifted = np.kron(a_k.T, s_k) @ x.flatten(order="F")
        direct = (s_k @ x @ a_k).flatten(order="F")
        scale = max(1.0, float(np.max(np.abs(direct))))
        worst = max(worst, float(np.max(np.abs(lifted - direct))) / scale)
    _verdict("column-stacked lift identity", worst <= 1e-12,
             f"100 instances, worst rel err {worst:.2e}")


# ---------------------------------------------------------------------------
# liquid-core stability


def test_box_invariance_of_long_rollouts():
    rng = np.random.default_rng(22)
    over = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        f = int(rng.integers(2, 5))
        sup = build_support(_unit_graph(rng, n), "normalized_laplacian", 2)
        p = LGTCParams.zeros(f, f, 2)
        p.decay[:] = rng.uniform(0.0, 1.5, f)
        p.coupling_filters[0] = np.diag(rng.uniform(0.0, 1.0, f))
        p.rate_state_bias[:] = rng.uniform(0.0, 0.5, f)
        p.rate_input_bias[:] = rng.uniform(0.0, 0.5, f)
        p.rate_state_filters[:] = rng.uniform(-0.2, 0.2, p.rate_state_filters.shape)
        p.rate_input_filters[:] = rng.uniform(-0.2, 0.2, p.rate_input_filters.shape)
        p.drive_filters[:] = rng.uniform(-0.5, 0.5, p.drive_filters.shape)
        x = rng.uniform(-1, 1, (n, f))
        u = rng.uniform(-1, 1, (n, f))
        for _step in range(200):
            x = value_of(lgtc_hybrid_step(p, sup, x, u, 0.05))
            over = max(over, float(np.max(np.abs(x))) - 1.0)
    _verdict("unit-box invariance", over <= 1e-6,
             f"1000 rollouts x 200 steps, max overshoot {over:.2e}")


def test_certified_rate_bounds_jacobian_log_norm():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = np.inf
    for _ in range(50):
        n, sup, bounds = _certified_setup(rng)
        p = _certified_liquid(rng)
        c = float(value_of(lgtc_contraction_rate(p, bounds, support=sup)[0]))
        assert c > 0

        def field(x, u, s):
            return value_of(lgtc_vector_field(p, s, x, u))

        for _probe in range(100):
            x = rng.uniform(-1, 1, (n, 3))
            u = rng.uniform(-1, 1, (n, 3))
            mu = log_norm_inf(empirical_jacobian(field, x, u, sup))
            worst = min(worst, -c - mu)
    elapsed = time.time() - t0
    _verdict("contraction rate bounds the Jacobian log-norm",
             worst >= -1e-4 and elapsed < 120.0,
             f"50 draws x 100 states, min(-c - mu) {worst:+.4f}, {elapsed:.1f}s")


def test_paired_trajectories_decay_at_certified_rate():
    rng = np.random.default_rng(2024)
    worst = np.inf
    for _ in range(20):
        n, sup, bounds = _certified_setup(rng)
        p = _certified_liquid(rng)
        c = float(value_of(lgtc_contraction_rate(p, bounds, support=sup)[0]))
        u = rng.uniform(-1, 1, (n, 3))
        xa = rng.uniform(-1, 1, (n, 3))
        xb = rng.uniform(-1, 1, (n, 3))
        d0 = float(np.max(np.abs(xa - xb)))
        for k in range(1, 41):
            for _sub in range(10):
                xa = value_of(lgtc_hybrid_step(p, sup, xa, u, 0.005))
                xb = value_of(lgtc_hybrid_step(p, sup, xb, u, 0.005))
            bound = np.exp(-c * k * 0.05) * d0 + 1e-3
            worst = min(worst, bound - float(np.max(np.abs(xa - xb))))
    _verdict("trajectory pairs contract within exp(-ct)",
             worst >= 0.0, f"20 draws, 40 ticks, min slack {worst:.2e}")


def test_gated_core_nonexpansive_when_certified():
    rng = np.random.default_rng(11)
    shapes = [("state_filters", (3, 3, 3)), ("input_filters", (3, 3, 3)),
              ("forget_state_filters", (3, 3, 3)), ("forget_input_filters", (3, 3, 3)),
              ("update_state_filters", (3, 3, 3)), ("update_input_filters", (3, 3, 3)),
              ("state_bias", (3,)), ("forget_bias", (3,)), ("update_bias", (3,))]
    worst = np.inf
    for _ in range(50):
        n, sup, bounds = _certified_setup(rng)
        p = GGNNParams(**{k: rng.normal(scale=0.3, size=s) for k, s in shapes})
        gain = float(value_of(ggnn_delta_iss_margin(p, bounds)))
        while gain > 1.0:   # shrink the random draw until it certifies
            for name, _s in shapes[:6]:
                getattr(p, name)[:] *= 0.7
            gain = float(value_of(ggnn_delta_iss_margin(p, bounds)))
        xa = rng.uniform(-1, 1, (n, 3))
        xb = rng.uniform(-1, 1, (n, 3))
        prev = float(np.max(np.abs(xa - xb)))
        for _step in range(100):
            u = rng.uniform(-1, 1, (n, 3))
            xa = value_of(ggnn_step(p, sup, xa, u))
            xb = value_of(ggnn_step(p, sup, xb, u))
            cur = float(np.max(np.abs(xa - xb)))
            worst = min(worst, prev - cur)
            prev = cur
    _verdict("certified gated core never expands pairs",
             worst >= -1e-9, f"50 draws x 100 steps, min decrease {worst:.2e}")


def test_closed_form_step_contracts_and_tracks_ode():
    rng = np.random.default_rng(2024)
    factor_excess = -np.inf
    gap = -np.inf
    for _ in range(50):
        n, sup, bounds = _certified_setup(rng)
        pc = _certified_liquid(rng, cls=CfGCParams, step_time=0.05)
        c = float(value_of(lgtc_contraction_rate(pc, bounds, support=sup)[0]))
        for _pair in range(20):
            xa = rng.uniform(-1, 1, (n, 3))
            xb = rng.uniform(-1, 1, (n, 3))
            u = rng.uniform(-1, 1, (n, 3))
            ya = value_of(cfgc_step(pc, sup, xa, u))
            yb = value_of(cfgc_step(pc, sup, xb, u))
            denom = float(np.max(np.abs(xa - xb)))
            if denom < 1e-9:
                continue
            factor = float(np.max(np.abs(ya - yb))) / denom
            factor_excess = max(factor_excess,
                                factor - (np.exp(-c * pc.step_time) + 0.05))
        pl = LGTCParams(**{f: np.array(getattr(pc, f)) for f in LIQUID_FIELDS})
        xc = np.zeros((n, 3))
        xl = np.zeros((n, 3))
        for _tick in range(50):
            u = rng.uniform(-0.5, 0.5, (n, 3))
            xc = value_of(cfgc_step(pc, sup, xc, u))
            xl = value_of(lgtc_integrate(pl, sup, xl, u, 0.05, 6))
            gap = max(gap, float(np.max(np.abs(xc - xl))))
    _verdict("closed-form step contracts and tracks the solver",
             factor_excess <= 0.0 and gap <= 0.15,
             f"50 draws, factor excess {factor_excess:+.3f}, "
             f"50-tick gap {gap:.3f} <= 0.15")


def test_hybrid_step_has_second_order_local_error():
    rng = np.random.default_rng(5)
    slopes = []
    for _ in range(10):
        sup = build_support(_weighted_graph(rng, 3), "normalized_laplacian", 2)
        p = LGTCParams.zeros(3, 3, 2)
        p.decay[:] = rng.uniform(0.5, 1.5)
        p.rate_state_bias[:] = rng.uniform(0.2, 0.6)
        p.rate_state_filters[:] = rng.uniform(-0.1, 0.1, p.rate_state_filters.shape)
        p.rate_input_filters[:] = rng.uniform(-0.1, 0.1, p.rate_input_filters.shape)
        p.drive_filters[:] = rng.uniform(-0.3, 0.3, p.drive_filters.shape)
        p.coupling_filters[:] = rng.uniform(-0.1, 0.1, p.coupling_filters.shape)
        x = rng.uniform(-0.8, 0.8, (3, 3))
        u = rng.uniform(-1, 1, (3, 3))
        deltas = np.array([1e-2, 1e-3, 1e-4])
        errs = []
        for d in deltas:
            one = value_of(lgtc_hybrid_step(p, sup, x, u, d))
            ref = value_of(lgtc_integrate(p, sup, x, u, d, 10))
            errs.append(float(np.max(np.abs(one - ref))))
        slopes.append(float(np.polyfit(np.log(deltas), np.log(errs), 1)[0]))
    _verdict("solver local error falls quadratically",
             min(slopes) >= 1.9,
             f"10 instances, log-log slopes {min(slopes):.3f}..{max(slopes):.3f}")


# ---------------------------------------------------------------------------
# gradients


def test_every_parameter_gradient_matches_central_differences():
    worst = 0.0
    for kind in ("ggnn", "lgtc", "cfgc"):
        policy = make_policy(kind, np.random.default_rng(9), state_dim=3,
                             order=1, state_comm=1, input_comm=1,
                             encoder_widths=(3,), readout_widths=(3,),
                             ode_substeps=2)
        # jitter off the seeded constant vectors: tied max-norms are only
        # subdifferentiable and central differences land on the kink
        jitter = np.random.default_rng(99)
        policy = policy_with_arrays(policy, {
            k: np.asarray(v) + jitter.normal(scale=1e-3, size=np.shape(v))
            for k, v in policy_param_arrays(policy).items()
        })
        cfg = ScenarioConfig(seed=10, n_trajectories=1, team_sizes=(3,),
                             duration=0.1)
        batch = [flocking.generate_dataset(cfg).trajectories[0]]
        sups = [build_support(r.graph, "normalized_laplacian", 1)
                for r in batch[0].records]
        bounds = SupportBounds.from_supports(sups, 1)
        _, _, grads = policy_gradients(policy, batch, bounds=bounds,
                                       penalty_support=sups[0])

        def closure(arrays):
            return float(value_of(imitation_loss(
                policy_with_arrays(policy, arrays), batch,
                bounds=bounds, penalty_support=sups[0])))

        numeric = finite_difference(closure, policy_param_arrays(policy), h=1e-6)
        assert_grads_close(grads, numeric, rtol=1e-5)
        for name, n_grad in numeric.items():
            denom = np.maximum(np.abs(n_grad), 1.0)
            worst = max(worst, float(np.max(np.abs(grads[name] - n_grad) / denom)))
    _verdict("gradients match central differences",
             worst <= 1e-5, f"three cores + encoder + readout + penalty, "
             f"max rel err {worst:.2e}")


# ---------------------------------------------------------------------------
# benchmark environment


def _tick_error(record):
    v = record.features[:, 0:2]
    return float(np.mean(np.linalg.norm(v - v.mean(axis=0), axis=1)))


def test_expert_drives_teams_to_consensus():
    cfg = ScenarioConfig(seed=0, consensus="conventional", mission=False,
                         leader_at_rest=True, spacing_min=1.2, spacing_max=2.0)
    expert = flocking.make_expert_controller("conventional")
    label = lambda w: flocking.expert_controls(w, "conventional")
    worst_ratio = 0.0
    worst_u = 0.0
    for seed in range(9000, 9050):
        world = flocking.sample_world(np.random.default_rng(seed), 10, cfg)
        traj, _ = flocking.rollout(expert, world, 2.5, expert=label)
        worst_ratio = max(worst_ratio,
                          _tick_error(traj.records[-1]) / _tick_error(traj.records[0]))
        worst_u = max(worst_u, max(float(np.max(np.abs(r.expert)))
                                   for r in traj.records))
    _verdict("expert reaches velocity consensus",
             worst_ratio <= 0.10 and worst_u <= 5.0 + 1e-9,
             f"50 seeds, worst final/initial error {worst_ratio:.3f}, "
             f"worst |u| {worst_u:.3f}")


# ---------------------------------------------------------------------------
# desk-scale learning


@pytest.fixture(scope="module")
def desk_run():
    cfg = ScenarioConfig(seed=77, n_trajectories=10, team_sizes=(4,),
                         duration=2.5)
    dataset = flocking.generate_dataset(cfg)
    tc = TrainConfig(kind="cfgc", seed=1, epochs=20, dagger_every=5,
                     dagger_rollouts=5, state_dim=16, order=2, state_comm=4,
                     input_comm=4, encoder_widths=(32,), readout_widths=(32,),
                     lr=2e-3)
    policy, metrics = train(tc, dataset)
    return cfg, policy, metrics


def test_desk_training_learns_and_stays_stable(desk_run):
    cfg, policy, metrics = desk_run
    v1, vT = metrics[0]["val_mse"], metrics[-1]["val_mse"]
    ratios = []
    for seed in range(100, 110):
        world = flocking.sample_world(np.random.default_rng(seed), 4, cfg)
        _, em = flocking.rollout(flocking.make_expert_controller(), world, 2.5)
        _, pm = flocking.rollout(flocking.make_policy_controller(policy),
                                 world, 2.5)
        ratios.append(pm["flocking_error"] / em["flocking_error"])
    margins = metrics[-1]["margins"]
    margins_ok = all(v is None or v >= -0.05 for v in margins.values())
    _verdict("desk-scale training",
             vT <= 0.5 * v1 and max(ratios) <= 3.0 and margins_ok,
             f"val {v1:.3f}->{vT:.3f} ({vT / v1:.0%}), rollout/expert worst "
             f"{max(ratios):.2f}x over 10 held-out seeds, margins ok {margins_ok}")


def test_error_grows_when_communication_shrinks(desk_run):
    cfg, policy, _ = desk_run
    wide = replace(cfg, spacing_min=1.5, spacing_max=2.5)
    means = {}
    for radius in (2.0, 4.0):
        errs = []
        for seed in range(200, 220):
            world = flocking.sample_world(
                np.random.default_rng(seed), 4,
                replace(wide, comm_radius=radius))
            try:
                _, pm = flocking.rollout(
                    flocking.make_policy_controller(policy), world, 2.5)
                errs.append(pm["flocking_error"])
            except flocking.SimulationDiverged:
                errs.append(float("inf"))
        means[radius] = float(np.mean(errs))
    _verdict("shorter range degrades flocking",
             means[2.0] > means[4.0],
             f"mean error {means[2.0]:.3f} at R=2 vs {means[4.0]:.3f} at R=4, "
             f"20 scenarios each")

"""Command-line entry point.

Subcommands cover the full workflow: record expert datasets, train the
distributed controllers, certify their stability margins, sweep
evaluation scenarios, and export single simulations for inspection.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 stability
certification failed.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys

import numpy as np

from . import flocking, training
from .graph import build_support
from .models import load_checkpoint
from .stability import SupportBounds, certify
from .training import TrainConfig, load_dataset, save_dataset

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_UNCERTIFIED = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit2(message)


class SystemExit2(Exception):
    pass


def _fmt(x):
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def _int_list(text):
    return [int(tok) for tok in text.replace(",", " ").split()]


def _float_list(text):
    return [float(tok) for tok in text.replace(",", " ").split()]


def build_parser():
    parser = _Parser(prog="lgc", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="record an expert dataset")
    p.add_argument("--out", required=True, help="dataset path (JSON lines)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--trajectories", type=int, default=60)
    p.add_argument("--team-sizes", type=_int_list, default=[4, 6, 10, 12, 15])
    p.add_argument("--duration", type=float, default=2.5)
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--comm-radius", type=float, default=4.0)
    p.add_argument("--sensing-radius", type=float, default=1.0)
    p.add_argument("--speed", type=float, default=2.0)
    p.add_argument("--spacing-min", type=float, default=0.6)
    p.add_argument("--spacing-max", type=float, default=1.0)
    p.add_argument("--consensus", choices=flocking.CONSENSUS_MODES, default="verbatim")
    p.add_argument("--no-mission", action="store_true",
                   help="pin the target to the leader's start")
    p.add_argument("--leader-at-rest", action="store_true")

    p = sub.add_parser("train", help="imitation-train a controller")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--metrics", help="output metrics path (JSON lines)")
    p.add_argument("--model", choices=("ggnn", "lgtc", "cfgc"), default="cfgc")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--dagger-every", type=int, default=20)
    p.add_argument("--dagger-rollouts", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--state-dim", type=int, default=50)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--state-comm", type=int, default=4)
    p.add_argument("--input-comm", type=int, default=4)
    p.add_argument("--substeps", type=int, default=6)
    p.add_argument("--step-time", type=float, default=1.0)
    p.add_argument("--core-scale", type=float, default=0.1)

    p = sub.add_parser("check-stability", help="certify a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="measure support norms over these graphs")
    p.add_argument("--norm-upper", type=float,
                   help="explicit support norm upper bound (default 2, the "
                        "normalized-Laplacian ceiling)")
    p.add_argument("--norm-lower", type=float, default=0.0)
    p.add_argument("--kind", choices=("ggnn", "lgtc", "cfgc"),
                   help="assert the checkpoint model kind")
    p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("eval", help="sweep scenarios and export error CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--teams", type=_int_list, default=[4, 10, 25, 50])
    p.add_argument("--ranges", type=_float_list, default=[2.0, 3.0, 4.0, 5.0, 6.0])
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--duration", type=float, default=2.5)
    p.add_argument("--consensus", choices=flocking.CONSENSUS_MODES, default="verbatim")
    p.add_argument("--no-mission", action="store_true")

    p = sub.add_parser("simulate", help="export one rollout as CSV")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--checkpoint", help="policy to drive; expert when omitted")
    p.add_argument("--agents", type=int, default=10)
    p.add_argument("--comm-radius", type=float, default=4.0)
    p.add_argument("--duration", type=float, default=2.5)
    p.add_argument("--consensus", choices=flocking.CONSENSUS_MODES, default="verbatim")
    p.add_argument("--no-mission", action="store_true")
    return parser


def _thread_budget(cells):
    cap = os.environ.get("LGC_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, cells))


# ---------------------------------------------------------------------------
# subcommands


def _scenario_config(args, **overrides):
    cfg = flocking.ScenarioConfig(
        seed=args.seed,
        n_trajectories=getattr(args, "trajectories", 1),
        team_sizes=tuple(getattr(args, "team_sizes", (4, 6, 10, 12, 15))),
        duration=args.duration,
        dt=getattr(args, "dt", 0.05),
        comm_radius=getattr(args, "comm_radius", 4.0),
        sensing_radius=getattr(args, "sensing_radius", 1.0),
        speed=getattr(args, "speed", 2.0),
        spacing_min=getattr(args, "spacing_min", 0.6),
        spacing_max=getattr(args, "spacing_max", 1.0),
        consensus=args.consensus,
        mission=not getattr(args, "no_mission", False),
        leader_at_rest=getattr(args, "leader_at_rest", False),
    )
    for key, val in overrides.items():
        cfg = flocking.replace(cfg, **{key: val})
    return cfg


def cmd_gen_data(args):
    cfg = _scenario_config(args)
    dataset = flocking.generate_dataset(cfg)
    save_dataset(dataset, args.out)
    counts = {tag: len(dataset.split(tag)) for tag in training.SPLITS}
    sizes = sorted({t.n for t in dataset.trajectories})
    print(
        f"wrote {len(dataset.trajectories)} trajectories to {args.out} "
        f"(splits {counts['train']}/{counts['val']}/{counts['test']}, "
        f"team sizes {sizes})"
    )
    return EXIT_OK


def cmd_train(args):
    dataset = load_dataset(args.dataset)
    config = TrainConfig(
        kind=args.model,
        seed=args.seed,
        epochs=args.epochs,
        dagger_every=args.dagger_every,
        dagger_rollouts=args.dagger_rollouts,
        lr=args.lr,
        beta=args.beta,
        clip_norm=args.clip_norm,
        state_dim=args.state_dim,
        order=args.order,
        state_comm=args.state_comm,
        input_comm=args.input_comm,
        ode_substeps=args.substeps,
        step_time=args.step_time,
        core_scale=args.core_scale,
        tick_dt=dataset.config.get("dt", 0.05),
    )
    policy, metrics = training.train(
        config, dataset, checkpoint_path=args.checkpoint, metrics_path=args.metrics
    )
    last = metrics[-1] if metrics else None
    if last is None:
        print(f"wrote initial checkpoint to {args.checkpoint} (0 epochs)")
    else:
        print(
            f"wrote {args.checkpoint} after {last['epoch']} epochs "
            f"(train_mse={last['train_mse']:.5f} val_mse={last['val_mse']:.5f} "
            f"certified={last['certified']})"
        )
    return EXIT_OK


def _bounds_from_args(args, order):
    if args.dataset:
        dataset = load_dataset(args.dataset)
        supports = [
            build_support(r.graph, "normalized_laplacian", order)
            for traj in dataset.trajectories
            for r in traj.records[:: max(1, len(traj.records) // 4)]
        ]
        return SupportBounds.from_supports(supports, order), supports[0]
    if args.norm_upper is not None:
        bounds = SupportBounds(
            order=order, norm_upper=args.norm_upper, norm_lower=args.norm_lower
        )
        return bounds, None
    return SupportBounds.normalized_laplacian_default(order), None


def cmd_check_stability(args):
    policy, embedded = load_checkpoint(args.checkpoint)
    if args.kind and policy.kind != args.kind:
        raise RuntimeError(
            f"checkpoint holds a {policy.kind} model, not {args.kind}"
        )
    bounds, support = _bounds_from_args(args, policy.core.order)
    report = certify(policy.core, bounds, support=support)
    doc = report.to_dict()
    doc["config"] = {
        "checkpoint": args.checkpoint,
        "dataset": args.dataset,
        "norm_upper": bounds.norm_upper,
        "norm_lower": bounds.norm_lower,
        "checkpoint_config": embedded,
    }
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(report.table())
    return EXIT_OK if report.certified else EXIT_UNCERTIFIED


def _episode_rows(policy, cfg, n, comm_radius, episode, seed, duration):
    scenario = f"s{seed}-n{n}-r{_fmt(comm_radius)}-e{episode}"
    rng = np.random.default_rng([seed, n, int(comm_radius * 1000), episode])
    world = flocking.sample_world(rng, n, flocking.replace(cfg, comm_radius=comm_radius))
    rows = []
    for name, controller in (
        ("expert", flocking.make_expert_controller(cfg.consensus)),
        (policy.kind, flocking.make_policy_controller(policy)),
    ):
        try:
            _, metrics = flocking.rollout(controller, world, duration)
            fe, le = metrics["flocking_error"], metrics["leader_error"]
        except flocking.SimulationDiverged:
            fe, le = float("inf"), float("inf")
        rows.append((scenario, n, comm_radius, fe, le, name))
    return rows


def cmd_eval(args):
    policy, _ = load_checkpoint(args.checkpoint)
    cfg = _scenario_config(args)
    cells = [
        (n, r, e)
        for n in args.teams
        for r in args.ranges
        for e in range(args.episodes)
    ]
    workers = _thread_budget(len(cells))
    results = [None] * len(cells)

    def work(i):
        n, r, e = cells[i]
        return _episode_rows(policy, cfg, n, r, e, args.seed, args.duration)

    if workers == 1:
        for i in range(len(cells)):
            results[i] = work(i)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            for i, rows in zip(range(len(cells)), pool.map(work, range(len(cells)))):
                results[i] = rows
    resolved = {
        "seed": args.seed, "teams": args.teams, "ranges": args.ranges,
        "episodes": args.episodes, "duration": args.duration,
        "checkpoint": args.checkpoint, "consensus": args.consensus,
        "mission": not args.no_mission,
    }
    with open(args.out, "w") as fh:
        fh.write("# config: " + json.dumps(resolved, sort_keys=True) + "\n")
        fh.write("scenario,N,R,flocking_error,leader_error,controller\n")
        for rows in results:
            for scenario, n, r, fe, le, name in rows:
                fh.write(f"{scenario},{n},{_fmt(r)},{_fmt(fe)},{_fmt(le)},{name}\n")
    print(f"wrote {sum(len(r) for r in results)} rows to {args.out}")
    return EXIT_OK


def cmd_simulate(args):
    cfg = _scenario_config(args)
    if args.checkpoint:
        policy, _ = load_checkpoint(args.checkpoint)
        controller = flocking.make_policy_controller(policy)
        name = policy.kind
    else:
        controller = flocking.make_expert_controller(cfg.consensus)
        name = "expert"
    rng = np.random.default_rng(args.seed)
    world = flocking.sample_world(rng, args.agents, cfg)
    traj, metrics = flocking.rollout(controller, world, args.duration)
    resolved = {
        "seed": args.seed, "agents": args.agents, "duration": args.duration,
        "controller": name, "comm_radius": cfg.comm_radius,
        "consensus": cfg.consensus, "mission": cfg.mission,
        "target": traj.target.tolist(), "leader": traj.leader,
    }
    with open(args.out, "w") as fh:
        fh.write("# config: " + json.dumps(resolved, sort_keys=True) + "\n")
        fh.write("t,agent,x,y,vx,vy,ux,uy,is_leader\n")
        for rec in traj.records:
            v = rec.features[:, 0:2]
            for i in range(traj.n):
                fh.write(
                    f"{_fmt(rec.t * traj.dt)},{i},"
                    f"{_fmt(rec.positions[i, 0])},{_fmt(rec.positions[i, 1])},"
                    f"{_fmt(v[i, 0])},{_fmt(v[i, 1])},"
                    f"{_fmt(rec.applied[i, 0])},{_fmt(rec.applied[i, 1])},"
                    f"{int(i == traj.leader)}\n"
                )
    print(
        f"wrote {args.out} ({name}, flocking_error={metrics['flocking_error']:.4f}, "
        f"leader_error={metrics['leader_error']:.4f})"
    )
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "check-stability": cmd_check_stability,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Imitation learning on recorded trajectories.

The trainer unrolls a policy through each recorded trajectory (full
backprop through time over every tick), matches the recorded expert
controls under a mean-squared loss, and adds the soft stability penalty
so the certified margins are pushed nonnegative while fitting.  Expert
relabeling of on-policy rollouts is interleaved every few epochs so the
policy sees its own state distribution.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff
from . import flocking
from .autodiff import grad, value_of
from .graph import build_support
from .models import (
    Policy,
    load_checkpoint,
    make_policy,
    policy_forward,
    policy_param_arrays,
    policy_with_arrays,
    save_checkpoint,
)
from .stability import SupportBounds, certify, stability_penalty

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """Trajectories plus a parallel list of split tags."""

    trajectories: list
    splits: list
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trajectories) != len(self.splits):
            raise ValueError("one split tag per trajectory required")
        for tag in self.splits:
            if tag not in SPLITS:
                raise ValueError(f"unknown split tag {tag!r}")

    def split(self, tag):
        if tag not in SPLITS:
            raise ValueError(f"unknown split tag {tag!r}")
        return [t for t, s in zip(self.trajectories, self.splits) if s == tag]

    def appended(self, trajectories, tag="train"):
        return Dataset(
            trajectories=list(self.trajectories) + list(trajectories),
            splits=list(self.splits) + [tag] * len(trajectories),
            config=dict(self.config),
        )


DATASET_FORMAT = "lgc-dataset"


def save_dataset(dataset, path):
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "config": dataset.config}))
        fh.write("\n")
        for traj, tag in zip(dataset.trajectories, dataset.splits):
            fh.write(json.dumps(flocking.trajectory_to_dict(traj, split=tag)))
            fh.write("\n")


def load_dataset(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
        trajectories, splits = [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            trajectories.append(flocking.trajectory_from_dict(doc))
            splits.append(doc.get("split", "train"))
    return Dataset(trajectories=trajectories, splits=splits, config=header.get("config", {}))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments; parameters are dicts of named arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state, params, grads):
    """One Adam step; returns the new parameter dict, mutates `state`."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.m[name] = m
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        out[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out


def clip_gradients(grads, max_norm):
    """Scale all gradients so the global max-abs entry is at most max_norm."""
    total = max((float(np.max(np.abs(g))) if np.size(g) else 0.0) for g in grads.values())
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total, False
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total, True


# ---------------------------------------------------------------------------
# loss


def _supports_for(traj, kind, order, cache=None):
    key = id(traj)
    if cache is not None and key in cache:
        return cache[key]
    sups = [build_support(r.graph, kind, order) for r in traj.records]
    if cache is not None:
        cache[key] = sups
    return sups


def unroll_mse(policy, traj, supports):
    """Squared-error total and element count for one trajectory unroll."""
    x = policy.initial_state(traj.n)
    sq_total = 0.0
    count = 0
    for record, support in zip(traj.records, supports):
        if record.expert is None:
            raise ValueError("trajectory record lacks expert labels")
        controls, x = policy_forward(policy, support, x, record.features)
        err = controls - record.expert
        sq_total = sq_total + autodiff.total(err * err)
        count += record.expert.size
    return sq_total, count


def imitation_loss(policy, batch, beta=10.0, bounds=None, penalty_support=None,
                   support_cache=None, parts=None):
    """Mean squared control error over the batch plus the stability penalty.

    `bounds` defaults to norms measured over the batch's own graphs.  The
    log-norm penalty term is evaluated on `penalty_support` (default: the
    first recorded graph of the batch).
    """
    if not batch:
        raise ValueError("empty batch")
    kind = "normalized_laplacian"
    order = policy.core.order
    all_supports = [_supports_for(t, kind, order, support_cache) for t in batch]
    if bounds is None:
        bounds = SupportBounds.from_supports(
            [s for sups in all_supports for s in sups], order
        )
    if penalty_support is None:
        penalty_support = all_supports[0][0]
    total, count = 0.0, 0
    for traj, sups in zip(batch, all_supports):
        t, c = unroll_mse(policy, traj, sups)
        total = total + t
        count += c
    mse = total / count
    pi = stability_penalty(policy.core, bounds, support=penalty_support, beta=beta)
    if parts is not None:
        parts["mse"] = float(value_of(mse))
        parts["pi"] = float(value_of(pi))
    return mse + pi


def policy_gradients(policy, batch, beta=10.0, bounds=None, penalty_support=None,
                     support_cache=None):
    """Loss value, MSE/penalty parts, and gradients for every parameter."""
    params = policy_param_arrays(policy)
    parts = {}

    def closure(tensors):
        taped = policy_with_arrays(policy, tensors)
        return imitation_loss(
            taped, batch, beta=beta, bounds=bounds,
            penalty_support=penalty_support, support_cache=support_cache,
            parts=parts,
        )

    loss, grads = grad(closure, params)
    return loss, parts, grads


def evaluate_mse(policy, trajectories, kind="normalized_laplacian", support_cache=None):
    """Plain (gradient-free) mean squared control error over trajectories."""
    if not trajectories:
        return float("nan")
    total, count = 0.0, 0
    for traj in trajectories:
        sups = _supports_for(traj, kind, policy.core.order, support_cache)
        t, c = unroll_mse(policy, traj, sups)
        total += float(t)
        count += c
    return total / count


# ---------------------------------------------------------------------------
# DAGGER


def dagger_round(policy, dataset, rng, rollouts=5, simulator=None, expert=None):
    """Roll the current policy out on fresh scenarios, label every visited
    state with the expert, and return the dataset grown by those runs."""
    cfg = flocking.ScenarioConfig(seed=0, **{
        k: v for k, v in dataset.config.items()
        if k in flocking.ScenarioConfig.__dataclass_fields__ and k != "seed"
    }) if dataset.config else flocking.ScenarioConfig(seed=0)
    cfg = replace(cfg, team_sizes=tuple(cfg.team_sizes))
    if expert is None:
        expert = lambda world: flocking.expert_controls(world, cfg.consensus)
    if simulator is None:
        def simulator(controller, world, label_fn):
            return flocking.rollout(controller, world, cfg.duration, expert=label_fn)[0]
    fresh = []
    for _ in range(rollouts):
        n = int(cfg.team_sizes[rng.integers(len(cfg.team_sizes))])
        world = flocking.sample_world(rng, n, cfg)
        controller = flocking.make_policy_controller(policy)
        try:
            traj = simulator(controller, world, expert)
        except flocking.SimulationDiverged as exc:
            ticks = len(exc.partial.records) if exc.partial is not None else 0
            raise flocking.SimulationDiverged(
                f"policy rollout diverged during relabeling after {ticks} ticks "
                f"(n={n}); aborting the round",
                partial=exc.partial,
            ) from exc
        fresh.append(traj)
    return dataset.appended(fresh, "train")


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainConfig:
    kind: str = "cfgc"
    seed: int = 0
    epochs: int = 120
    dagger_every: int = 20
    dagger_rollouts: int = 5
    lr: float = 1e-3
    beta: float = 10.0
    clip_norm: float = 10.0
    state_dim: int = 50
    order: int = 2
    state_comm: int = 4
    input_comm: int = 4
    encoder_widths: tuple = (128, 128)
    readout_widths: tuple = (128, 128)
    u_max: float = 5.0
    tick_dt: float = 0.05
    ode_substeps: int = 6
    eps: float = 1e-6
    step_time: float = 1.0
    core_scale: float = 0.1

    def to_dict(self):
        d = dict(self.__dict__)
        d["encoder_widths"] = list(self.encoder_widths)
        d["readout_widths"] = list(self.readout_widths)
        return d


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient goes non-finite; carries the last
    finite policy and the metrics collected so far."""

    def __init__(self, message, policy, metrics):
        super().__init__(message)
        self.policy = policy
        self.metrics = metrics


def _margin_summary(report):
    return {k: (None if v is None else float(v)) for k, v in report.margins.items()}


def train(config, dataset, checkpoint_path=None, metrics_path=None, policy=None):
    """Run the imitation loop; returns (policy, per-epoch metrics list).

    One Adam update per training trajectory per epoch, validation MSE and
    certified margins recorded each epoch, expert relabeling every
    `dagger_every` epochs.  Non-finite losses abort with TrainingDiverged
    carrying the last finite policy.
    """
    rng = np.random.default_rng(config.seed)
    if policy is None:
        policy = make_policy(
            config.kind,
            rng,
            state_dim=config.state_dim,
            order=config.order,
            state_comm=config.state_comm,
            input_comm=config.input_comm,
            encoder_widths=tuple(config.encoder_widths),
            readout_widths=tuple(config.readout_widths),
            u_max=config.u_max,
            tick_dt=config.tick_dt,
            ode_substeps=config.ode_substeps,
            eps=config.eps,
            step_time=config.step_time,
            core_scale=config.core_scale,
        )
    adam = AdamState(lr=config.lr)
    metrics = []
    support_cache = {}

    def measured_bounds(ds):
        sups = [
            s for traj in ds.split("train")
            for s in _supports_for(traj, "normalized_laplacian", config.order, support_cache)
        ]
        if not sups:
            raise ValueError("training split is empty")
        return SupportBounds.from_supports(sups, config.order), sups[0]

    if len(dataset.split("train")) == 0:
        raise ValueError("training split is empty")
    bounds, penalty_support = measured_bounds(dataset)
    last_good = copy.deepcopy(policy_param_arrays(policy))

    def finish(pol):
        cfg_doc = config.to_dict()
        if checkpoint_path is not None:
            save_checkpoint(pol, checkpoint_path, config=cfg_doc)
        if metrics_path is not None:
            with open(metrics_path, "w") as fh:
                fh.write(json.dumps({"format": "lgc-metrics", "config": cfg_doc}) + "\n")
                for row in metrics:
                    fh.write(json.dumps(row) + "\n")

    for epoch in range(1, config.epochs + 1):
        train_split = dataset.split("train")
        order = rng.permutation(len(train_split))
        epoch_mse, epoch_pi = [], []
        for idx in order:
            loss, parts, grads = policy_gradients(
                policy, [train_split[idx]], beta=config.beta,
                bounds=bounds, penalty_support=penalty_support,
                support_cache=support_cache,
            )
            if not np.isfinite(loss):
                finish(policy_with_arrays(policy, last_good))
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; last finite "
                    "parameters preserved",
                    policy_with_arrays(policy, last_good),
                    metrics,
                )
            grads, raw_norm, clipped = clip_gradients(grads, config.clip_norm)
            if clipped:
                log.info("epoch %d: clipped gradient max-norm %.3g", epoch, raw_norm)
            try:
                params = adam_update(adam, policy_param_arrays(policy), grads)
            except ValueError as exc:
                finish(policy_with_arrays(policy, last_good))
                raise TrainingDiverged(
                    f"epoch {epoch}: {exc}; last finite parameters preserved",
                    policy_with_arrays(policy, last_good),
                    metrics,
                ) from exc
            policy = policy_with_arrays(policy, params)
            epoch_mse.append(parts["mse"])
            epoch_pi.append(parts["pi"])
        last_good = copy.deepcopy(policy_param_arrays(policy))
        val_mse = evaluate_mse(policy, dataset.split("val"), support_cache=support_cache)
        report = certify(policy.core, bounds, support=penalty_support)
        row = {
            "epoch": epoch,
            "train_mse": float(np.mean(epoch_mse)),
            "val_mse": float(val_mse),
            "pi": float(np.mean(epoch_pi)),
            "margins": _margin_summary(report),
            "certified": bool(report.certified),
            "trajectories": len(train_split),
        }
        metrics.append(row)
        log.info(
            "epoch %d: train_mse=%.5f val_mse=%.5f pi=%.4g certified=%s",
            epoch, row["train_mse"], row["val_mse"], row["pi"], row["certified"],
        )
        if (
            config.dagger_every
            and epoch % config.dagger_every == 0
            and epoch < config.epochs
        ):
            dataset = dagger_round(
                policy, dataset, rng, rollouts=config.dagger_rollouts
            )
            bounds, penalty_support = measured_bounds(dataset)
    finish(policy)
    return policy, metrics

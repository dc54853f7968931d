"""Recurrent graph-network cores and the flocking control policy.

Three interchangeable cores over the same filter machinery:

* gated step (``ggnn_step``): a discrete recurrence with logistic input
  and forget gates modulating polynomial graph filters, squashed by tanh.
* liquid ODE (``lgtc_vector_field`` and friends): a continuous-time state
  whose decay rate is itself state- and input-dependent, integrated with
  a semi-implicit fixed-step solver that keeps the stiff decay stable.
* closed-form step (``cfgc_step``): a one-shot discrete approximation of
  the liquid dynamics that needs a single communication round per tick.

``closed_form_exact`` is the non-distributed reference solution of the
liquid ODE used only to validate the approximation; it materializes
Kronecker products and a matrix exponential and never enters training.

All forward functions accept either plain ndarrays or autodiff Tensors
for the state, input, and parameters; gradients flow whenever a Tensor
is present.  The policy wraps encoder -> core -> readout with feature
scaling and control saturation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.special import expit

from . import _kernels
from .autodiff import (
    Tensor,
    add,
    clip,
    div,
    is_tensor,
    logistic,
    matmul,
    mul,
    neg,
    relu,
    sub,
    tanh,
    unstack,
    value_of,
)

log = logging.getLogger(__name__)

MODEL_KINDS = ("ggnn", "lgtc", "cfgc")


def _shape(x):
    return np.shape(value_of(x))


def _bank_taps(bank):
    """List of 2-D tap matrices from a stacked (K+1, in, out) bank."""
    if is_tensor(bank):
        return unstack(bank)
    return [bank[k] for k in range(bank.shape[0])]


def poly_filter(powers, x, bank, mask=None):
    """Polynomial graph filter sum_k S^k x W_k, Tensor-aware.

    mask (float 0/1 per input column) routes masked-out columns through
    the identity at every tap: those features never cross an edge.
    Plain-array calls go through the kernel backend.
    """
    k1 = _shape(bank)[0]
    if powers.shape[0] < k1:
        raise ValueError("support powers go less deep than the filter bank")
    if not (is_tensor(x) or is_tensor(bank)):
        b = np.ascontiguousarray(bank, dtype=np.float64)
        xx = np.ascontiguousarray(x, dtype=np.float64)
        if mask is None:
            return _kernels.filter_apply(powers[:k1], xx, b)
        return _kernels.masked_filter_apply(
            powers, xx, b, np.ascontiguousarray(mask, dtype=np.float64)
        )
    taps = _bank_taps(bank)
    out = matmul(x, taps[0])
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        keep = 1.0 - m
    for k in range(1, len(taps)):
        sx = matmul(powers[k], x)
        zk = sx if mask is None else add(mul(sx, m), mul(x, keep))
        out = add(out, matmul(zk, taps[k]))
    return out


# ---------------------------------------------------------------------------
# parameter containers


def _require(cond, msg):
    if not cond:
        raise ValueError(msg)


@dataclass
class GGNNParams:
    """Weights of the gated graph recurrence.

    Filter banks are stacked (K+1, in_features, out_features); biases are
    per-state-feature vectors broadcast over agents.
    """

    state_filters: np.ndarray
    input_filters: np.ndarray
    forget_state_filters: np.ndarray
    forget_input_filters: np.ndarray
    update_state_filters: np.ndarray
    update_input_filters: np.ndarray
    state_bias: np.ndarray
    forget_bias: np.ndarray
    update_bias: np.ndarray

    def __post_init__(self):
        f = self.state_dim
        k1 = self.order + 1
        _require(_shape(self.state_filters) == (k1, f, f), "state_filters shape")
        _require(_shape(self.forget_state_filters) == (k1, f, f), "forget_state_filters shape")
        _require(_shape(self.update_state_filters) == (k1, f, f), "update_state_filters shape")
        g = self.input_dim
        for name in ("input_filters", "forget_input_filters", "update_input_filters"):
            _require(_shape(getattr(self, name)) == (k1, g, f), f"{name} shape")
        for name in ("state_bias", "forget_bias", "update_bias"):
            _require(_shape(getattr(self, name)) == (f,), f"{name} shape")

    @property
    def kind(self):
        return "ggnn"

    @property
    def order(self):
        return _shape(self.state_filters)[0] - 1

    @property
    def state_dim(self):
        return _shape(self.state_filters)[2]

    @property
    def input_dim(self):
        return _shape(self.input_filters)[1]

    @classmethod
    def zeros(cls, state_dim, input_dim, order):
        k1 = order + 1
        return cls(
            state_filters=np.zeros((k1, state_dim, state_dim)),
            input_filters=np.zeros((k1, input_dim, state_dim)),
            forget_state_filters=np.zeros((k1, state_dim, state_dim)),
            forget_input_filters=np.zeros((k1, input_dim, state_dim)),
            update_state_filters=np.zeros((k1, state_dim, state_dim)),
            update_input_filters=np.zeros((k1, input_dim, state_dim)),
            state_bias=np.zeros(state_dim),
            forget_bias=np.zeros(state_dim),
            update_bias=np.zeros(state_dim),
        )


@dataclass
class LGTCParams:
    """Weights of the liquid graph ODE.

    decay must stay elementwise nonnegative for the boundedness and
    contraction certificates; violations are only warned about here (the
    regularizer pushes them back) and flagged by certification.
    """

    decay: np.ndarray                 # per-feature base decay, length F
    coupling_filters: np.ndarray      # (K, F, F), taps k = 1..K
    rate_state_filters: np.ndarray    # (K+1, F, F)
    rate_state_bias: np.ndarray       # (F,)
    rate_input_filters: np.ndarray    # (K+1, G, F)
    rate_input_bias: np.ndarray       # (F,)
    drive_filters: np.ndarray         # (K+1, G, F)

    def __post_init__(self):
        f = self.state_dim
        k1 = self.order + 1
        _require(_shape(self.coupling_filters) == (k1 - 1, f, f), "coupling_filters shape")
        _require(_shape(self.rate_state_filters) == (k1, f, f), "rate_state_filters shape")
        g = self.input_dim
        _require(_shape(self.rate_input_filters) == (k1, g, f), "rate_input_filters shape")
        _require(_shape(self.drive_filters) == (k1, g, f), "drive_filters shape")
        for name in ("decay", "rate_state_bias", "rate_input_bias"):
            _require(_shape(getattr(self, name)) == (f,), f"{name} shape")
        d = value_of(self.decay)
        if isinstance(d, np.ndarray) and d.size and np.min(d) < 0:
            log.warning("decay has negative entries (min %.3g); certificates will fail", np.min(d))

    @property
    def kind(self):
        return "lgtc"

    @property
    def order(self):
        return _shape(self.rate_state_filters)[0] - 1

    @property
    def state_dim(self):
        return _shape(self.rate_state_filters)[2]

    @property
    def input_dim(self):
        return _shape(self.drive_filters)[1]

    @classmethod
    def zeros(cls, state_dim, input_dim, order, **extra):
        return cls(
            decay=np.zeros(state_dim),
            coupling_filters=np.zeros((order, state_dim, state_dim)),
            rate_state_filters=np.zeros((order + 1, state_dim, state_dim)),
            rate_state_bias=np.zeros(state_dim),
            rate_input_filters=np.zeros((order + 1, input_dim, state_dim)),
            rate_input_bias=np.zeros(state_dim),
            drive_filters=np.zeros((order + 1, input_dim, state_dim)),
            **extra,
        )


@dataclass
class CfGCParams(LGTCParams):
    """Liquid weights plus the closed-form step hyperparameters."""

    eps: float = 1e-6       # division guard in the local coupling term
    step_time: float = 1.0  # dimensionless step length of the sigmoidal decay

    def __post_init__(self):
        super().__post_init__()
        _require(self.eps > 0, "eps must be positive")
        _require(self.step_time > 0, "step_time must be positive")

    @property
    def kind(self):
        return "cfgc"


# ---------------------------------------------------------------------------
# core steps


def _check_signal(name, sig, n, dim):
    if _shape(sig) != (n, dim):
        raise ValueError(f"{name} has shape {_shape(sig)}, expected {(n, dim)}")


def _check_domain(name, sig, mode):
    v = np.asarray(value_of(sig))
    peak = np.max(np.abs(v)) if v.size else 0.0
    if peak <= 1.0 + 1e-12:
        return sig
    if mode == "strict":
        raise ValueError(f"{name} leaves [-1, 1] (max abs {peak:.6g}); pass mode='lenient' to clamp")
    log.warning("%s leaves [-1, 1] (max abs %.6g); clamping", name, peak)
    return clip(sig, -1.0, 1.0)


def ggnn_step(params, support, x, u, state_mask=None, input_mask=None, mode="strict"):
    """One gated recurrence update x+ = tanh(q_f * A(x) + q_u * B(u) + b)."""
    _check_signal("state", x, support.n, params.state_dim)
    _check_signal("input", u, support.n, params.input_dim)
    x = _check_domain("state", x, mode)
    u = _check_domain("input", u, mode)
    p = support.powers
    forget = logistic(
        add(
            add(
                poly_filter(p, x, params.forget_state_filters, state_mask),
                poly_filter(p, u, params.forget_input_filters, input_mask),
            ),
            params.forget_bias,
        )
    )
    update = logistic(
        add(
            add(
                poly_filter(p, x, params.update_state_filters, state_mask),
                poly_filter(p, u, params.update_input_filters, input_mask),
            ),
            params.update_bias,
        )
    )
    pre = add(
        add(
            mul(forget, poly_filter(p, x, params.state_filters, state_mask)),
            mul(update, poly_filter(p, u, params.input_filters, input_mask)),
        ),
        params.state_bias,
    )
    return tanh(pre)


def lgtc_input_terms(params, support, u, input_mask=None):
    """Input-side quantities frozen over an integration interval.

    Returns (rate_input, drive) = (relu(B_hat(u) + b_u), tanh(B(u))).
    """
    p = support.powers
    rate_input = relu(
        add(poly_filter(p, u, params.rate_input_filters, input_mask), params.rate_input_bias)
    )
    drive = tanh(poly_filter(p, u, params.drive_filters, input_mask))
    return rate_input, drive


def lgtc_state_rate(params, support, x, rate_input, state_mask=None):
    """The liquid rate f = relu(A_hat(x) + b_x) + rate_input (nonnegative)."""
    pre = add(
        poly_filter(support.powers, x, params.rate_state_filters, state_mask),
        params.rate_state_bias,
    )
    return add(relu(pre), rate_input)


def _coupling_sum(params, support, x, state_mask=None):
    """Neighbour coupling sum_{k>=1} S^k x A_k (no identity tap)."""
    p = support.powers
    taps = _bank_taps(params.coupling_filters)
    if p.shape[0] < len(taps) + 1:
        raise ValueError("support powers go less deep than the coupling bank")
    out = None
    if state_mask is not None:
        m = np.asarray(state_mask, dtype=np.float64)
        keep = 1.0 - m
    for k in range(1, len(taps) + 1):
        sx = matmul(p[k], x)
        zk = sx if state_mask is None else add(mul(sx, m), mul(x, keep))
        term = matmul(zk, taps[k - 1])
        out = term if out is None else add(out, term)
    if out is None:
        out = np.zeros(_shape(x))
    return out


def lgtc_vector_field(params, support, x, u, state_mask=None, input_mask=None):
    """Right-hand side dx/dt = -(b + f) * x - coupling + f * drive."""
    _check_signal("state", x, support.n, params.state_dim)
    _check_signal("input", u, support.n, params.input_dim)
    rate_input, drive = lgtc_input_terms(params, support, u, input_mask)
    f = lgtc_state_rate(params, support, x, rate_input, state_mask)
    coup = _coupling_sum(params, support, x, state_mask)
    return sub(sub(mul(f, drive), coup), mul(add(params.decay, f), x))


def _hybrid_step(params, support, x, dt, rate_input, drive, state_mask=None):
    """Semi-implicit update; the stiff decay lands in the denominator."""
    f = lgtc_state_rate(params, support, x, rate_input, state_mask)
    coup = _coupling_sum(params, support, x, state_mask)
    numer = add(x, mul(dt, sub(mul(f, drive), coup)))
    denom = add(1.0, mul(dt, add(params.decay, f)))
    return div(numer, denom)


def lgtc_hybrid_step(params, support, x, u, dt, state_mask=None, input_mask=None):
    """One fixed-step solver update of length dt with u and S held fixed."""
    if dt <= 0:
        raise ValueError("step size must be positive")
    _check_signal("state", x, support.n, params.state_dim)
    _check_signal("input", u, support.n, params.input_dim)
    rate_input, drive = lgtc_input_terms(params, support, u, input_mask)
    return _hybrid_step(params, support, x, dt, rate_input, drive, state_mask)


def lgtc_integrate(params, support, x0, u, horizon, steps, state_mask=None, input_mask=None):
    """Integrate the liquid ODE over [0, horizon] in `steps` solver steps.

    The input and support are frozen over the interval, so the input-side
    filter terms are computed once.  Plain-array calls run in the fused
    kernel; Tensor calls unroll the solver on the tape.
    """
    if steps < 1:
        raise ValueError("integration needs at least one step")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    _check_signal("state", x0, support.n, params.state_dim)
    _check_signal("input", u, support.n, params.input_dim)
    dt = horizon / steps
    rate_input, drive = lgtc_input_terms(params, support, u, input_mask)
    plain = not any(
        is_tensor(v)
        for v in (x0, u, params.decay, params.coupling_filters, params.rate_state_filters,
                  params.rate_state_bias, params.rate_input_filters, params.rate_input_bias,
                  params.drive_filters)
    )
    if plain:
        f_dim = params.state_dim
        mask = np.ones(f_dim) if state_mask is None else np.asarray(state_mask, dtype=np.float64)
        return _kernels.lgtc_integrate(
            support.powers,
            np.ascontiguousarray(x0, dtype=np.float64),
            np.ascontiguousarray(params.coupling_filters, dtype=np.float64),
            np.ascontiguousarray(params.rate_state_filters, dtype=np.float64),
            np.ascontiguousarray(params.rate_state_bias, dtype=np.float64),
            np.ascontiguousarray(rate_input, dtype=np.float64),
            np.ascontiguousarray(drive, dtype=np.float64),
            np.ascontiguousarray(params.decay, dtype=np.float64),
            np.ascontiguousarray(mask, dtype=np.float64),
            int(steps),
            float(dt),
        )
    x = x0
    for _ in range(steps):
        x = _hybrid_step(params, support, x, dt, rate_input, drive, state_mask)
    return x


def closed_form_exact(params, support, x0, u, horizon, max_iter=50, tol=1e-10):
    """Reference closed-form solution of the liquid ODE at time `horizon`.

    Materializes the Kronecker-lifted dynamics and a matrix exponential on
    the column-stacked state, resolving the implicit dependence on the
    final state by fixed-point iteration.  Full communication only; this
    is a verification oracle, not a training-path operation.
    """
    x0 = np.asarray(value_of(x0), dtype=np.float64)
    u = np.asarray(value_of(u), dtype=np.float64)
    _check_signal("state", x0, support.n, params.state_dim)
    _check_signal("input", u, support.n, params.input_dim)
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    p = support.powers
    n, f_dim = x0.shape
    order = params.order

    def vec(m):
        return np.asarray(m, dtype=np.float64).flatten(order="F")

    def unvec(v):
        return v.reshape((n, f_dim), order="F")

    rate_input, drive = lgtc_input_terms(params, support, u)
    f_sigma = rate_input + np.maximum(
        poly_filter(p, x0, params.rate_state_filters) + params.rate_state_bias, 0.0
    )
    w = vec(expit(2.0 * f_sigma))
    g_kron = np.zeros((n * f_dim, n * f_dim))
    for k in range(order + 1):
        g_kron += np.kron(params.rate_state_filters[k].T, p[k])
    a_kron = np.zeros_like(g_kron)
    for k in range(1, order + 1):
        a_kron += np.kron(params.coupling_filters[k - 1].T, p[k])
    b_vec = np.repeat(np.asarray(params.decay, dtype=np.float64), n)
    x0_vec = vec(x0)
    drive_vec = vec(drive)

    xt = x0.copy()
    for _ in range(max_iter):
        pre = poly_filter(p, xt, params.rate_state_filters) + params.rate_state_bias
        f_x = np.maximum(pre, 0.0)
        active = (pre > 0.0).astype(np.float64)
        lifted = -np.diag(vec(active) * vec(xt)) @ g_kron + a_kron
        m = np.diag(b_vec + vec(f_x)) + lifted
        y = expm(-m * horizon) @ (w * x0_vec) + (1.0 - w) * drive_vec
        xt_new = unvec(y)
        if np.max(np.abs(xt_new - xt)) < tol:
            return xt_new
        xt = xt_new
    raise RuntimeError(
        f"closed-form fixed point did not converge in {max_iter} iterations"
    )


def cfgc_step(params, support, x, u, state_mask=None, input_mask=None):
    """One closed-form graph time-constant update (agent-local).

    The exponential decay of the exact closed form is replaced by a
    sigmoid offset by pi, and the Kronecker coupling by its local
    surrogate coupling / (x + eps).  The relu active-set mask is treated
    as a constant during backprop.
    """
    _check_signal("state", x, support.n, params.state_dim)
    _check_signal("input", u, support.n, params.input_dim)
    p = support.powers
    rate_input, drive = lgtc_input_terms(params, support, u, input_mask)
    filt = poly_filter(p, x, params.rate_state_filters, state_mask)
    pre = add(filt, params.rate_state_bias)
    f_x = relu(pre)
    f_sigma = add(rate_input, f_x)
    active = (np.asarray(value_of(pre)) > 0.0).astype(np.float64)  # stop-gradient
    coup = _coupling_sum(params, support, x, state_mask)
    xv = np.asarray(value_of(x))
    guard = params.eps * np.where(xv >= 0.0, 1.0, -1.0)  # sign(0) = +1
    local = neg(mul(active, filt))
    local = add(local, div(coup, add(x, guard)))
    decay_arg = add(
        mul(-params.step_time, add(add(params.decay, f_x), local)), math.pi
    )
    gate = logistic(mul(2.0, f_sigma))
    return add(mul(sub(mul(x, logistic(decay_arg)), drive), gate), drive)


def core_step(params, support, x, u, state_mask=None, input_mask=None,
              tick_dt=0.05, ode_substeps=6):
    """Dispatch one control-tick state update for any core kind."""
    kind = params.kind
    if kind == "ggnn":
        return ggnn_step(params, support, x, u, state_mask, input_mask)
    if kind == "cfgc":
        return cfgc_step(params, support, x, u, state_mask, input_mask)
    return lgtc_integrate(params, support, x, u, tick_dt, ode_substeps,
                          state_mask, input_mask)


# ---------------------------------------------------------------------------
# encoder / readout / policy


@dataclass
class MlpLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str  # relu | tanh | identity


@dataclass
class Mlp:
    layers: list

    def __post_init__(self):
        prev = None
        for layer in self.layers:
            w = _shape(layer.weight)
            _require(len(w) == 2, "weights must be matrices")
            _require(_shape(layer.bias) == (w[1],), "bias must match layer width")
            _require(layer.activation in ("relu", "tanh", "identity"), "unknown activation")
            if prev is not None:
                _require(w[0] == prev, "layer dimensions must chain")
            prev = w[1]


def mlp_forward(mlp, x):
    h = x
    for layer in mlp.layers:
        h = add(matmul(h, layer.weight), layer.bias)
        if layer.activation == "relu":
            h = relu(h)
        elif layer.activation == "tanh":
            h = tanh(h)
    return h


def mlp_init(rng, dims, hidden_activation="relu", final_activation="identity", gain=1.0):
    """Uniform(-a, a) layers with a = gain / sqrt(fan_in)."""
    layers = []
    for i in range(len(dims) - 1):
        a = gain / math.sqrt(dims[i])
        act = final_activation if i == len(dims) - 2 else hidden_activation
        layers.append(
            MlpLayer(
                weight=rng.uniform(-a, a, size=(dims[i], dims[i + 1])),
                bias=np.zeros(dims[i + 1]),
                activation=act,
            )
        )
    return Mlp(layers)


RAW_FEATURE_DIM = 10

# Fixed input conditioning: velocities /2, proximity sums /10 then clamped
# to [-1, 1], leader goal offset /20, one-hot flags untouched.
DEFAULT_FEATURE_SCALE = np.array([2.0, 2.0, 10.0, 10.0, 10.0, 10.0, 20.0, 20.0, 1.0, 1.0])
DEFAULT_FEATURE_CLIP = np.array([0, 0, 1, 1, 1, 1, 0, 0, 0, 0], dtype=bool)


@dataclass
class Policy:
    """encoder -> recurrent graph core -> readout, with saturation."""

    core: object
    encoder: Mlp
    readout: Mlp
    state_comm: int
    input_comm: int
    u_max: float = 5.0
    tick_dt: float = 0.05
    ode_substeps: int = 6
    feature_scale: np.ndarray = field(default_factory=lambda: DEFAULT_FEATURE_SCALE.copy())
    feature_clip: np.ndarray = field(default_factory=lambda: DEFAULT_FEATURE_CLIP.copy())

    def __post_init__(self):
        _require(0 <= self.state_comm <= self.core.state_dim, "state_comm out of range")
        _require(0 <= self.input_comm <= self.core.input_dim, "input_comm out of range")
        _require(self.u_max > 0, "u_max must be positive")

    @property
    def kind(self):
        return self.core.kind

    @property
    def state_mask(self):
        m = np.zeros(self.core.state_dim)
        m[: self.state_comm] = 1.0
        return m

    @property
    def input_mask(self):
        m = np.zeros(self.core.input_dim)
        m[: self.input_comm] = 1.0
        return m

    def initial_state(self, n_agents):
        return np.zeros((n_agents, self.core.state_dim))


def normalize_features(policy, features):
    feats = np.asarray(features, dtype=np.float64) / policy.feature_scale
    clipped = np.clip(feats, -1.0, 1.0)
    return np.where(policy.feature_clip, clipped, feats)


def policy_forward(policy, support, state, features):
    """One control tick: returns (saturated controls N x 2, next hidden state)."""
    feats = normalize_features(policy, features)
    encoded = mlp_forward(policy.encoder, feats)
    next_state = core_step(
        policy.core,
        support,
        state,
        encoded,
        policy.state_mask,
        policy.input_mask,
        tick_dt=policy.tick_dt,
        ode_substeps=policy.ode_substeps,
    )
    raw = mlp_forward(policy.readout, next_state)
    controls = clip(raw, -policy.u_max, policy.u_max)
    return controls, next_state


def make_policy(kind, rng, state_dim=50, order=2, state_comm=4, input_comm=4,
                encoder_widths=(128, 128), readout_widths=(128, 128),
                control_dim=2, core_scale=0.1, eps=1e-6, step_time=1.0,
                tick_dt=0.05, ode_substeps=6, u_max=5.0):
    """Seeded policy factory with small certified-leaning core weights."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    input_dim = state_dim
    encoder = mlp_init(rng, (RAW_FEATURE_DIM, *encoder_widths, input_dim),
                       final_activation="tanh")
    readout = mlp_init(rng, (state_dim, *readout_widths, control_dim))
    k1 = order + 1

    def bank(n_in, taps):
        a = core_scale / math.sqrt(n_in * taps)
        return rng.uniform(-a, a, size=(taps, n_in, state_dim))

    if kind == "ggnn":
        core = GGNNParams(
            state_filters=bank(state_dim, k1),
            input_filters=bank(input_dim, k1),
            forget_state_filters=bank(state_dim, k1),
            forget_input_filters=bank(input_dim, k1),
            update_state_filters=bank(state_dim, k1),
            update_input_filters=bank(input_dim, k1),
            state_bias=np.zeros(state_dim),
            forget_bias=np.zeros(state_dim),
            update_bias=np.zeros(state_dim),
        )
    else:
        common = dict(
            decay=np.full(state_dim, 0.5),
            coupling_filters=bank(state_dim, k1)[:order] * 0.1,
            rate_state_filters=bank(state_dim, k1) * 0.1,
            rate_state_bias=np.full(state_dim, 0.1),
            rate_input_filters=bank(input_dim, k1),
            rate_input_bias=np.full(state_dim, 0.1),
            drive_filters=bank(input_dim, k1),
        )
        if kind == "lgtc":
            core = LGTCParams(**common)
        else:
            core = CfGCParams(eps=eps, step_time=step_time, **common)
    return Policy(
        core=core,
        encoder=encoder,
        readout=readout,
        state_comm=state_comm,
        input_comm=input_comm,
        u_max=u_max,
        tick_dt=tick_dt,
        ode_substeps=ode_substeps,
    )


# ---------------------------------------------------------------------------
# parameter flattening and checkpoints


def _core_tensor_fields(core):
    return [
        f.name
        for f in dataclasses.fields(core)
        if f.name not in ("eps", "step_time")
    ]


def policy_param_arrays(policy):
    """Flat ordered mapping of every trainable array in the policy."""
    out = {}
    for name in _core_tensor_fields(policy.core):
        out[f"core.{name}"] = getattr(policy.core, name)
    for prefix, mlp in (("encoder", policy.encoder), ("readout", policy.readout)):
        for i, layer in enumerate(mlp.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
    return out


def policy_with_arrays(policy, arrays):
    """Rebuild the policy with substituted parameter arrays (or Tensors)."""
    core_kwargs = {
        name: arrays[f"core.{name}"] for name in _core_tensor_fields(policy.core)
    }
    if isinstance(policy.core, CfGCParams):
        core = CfGCParams(eps=policy.core.eps, step_time=policy.core.step_time, **core_kwargs)
    elif isinstance(policy.core, LGTCParams):
        core = LGTCParams(**core_kwargs)
    else:
        core = GGNNParams(**core_kwargs)

    def rebuild(prefix, mlp):
        return Mlp([
            MlpLayer(
                weight=arrays[f"{prefix}.{i}.weight"],
                bias=arrays[f"{prefix}.{i}.bias"],
                activation=layer.activation,
            )
            for i, layer in enumerate(mlp.layers)
        ])

    return dataclasses.replace(
        policy,
        core=core,
        encoder=rebuild("encoder", policy.encoder),
        readout=rebuild("readout", policy.readout),
    )


CHECKPOINT_FORMAT = "lgc-checkpoint"


def save_checkpoint(policy, path, config=None):
    """Single JSON document: kind tag, hyperparameters, named tensors."""
    hyper = {
        "state_dim": policy.core.state_dim,
        "input_dim": policy.core.input_dim,
        "order": policy.core.order,
        "state_comm": policy.state_comm,
        "input_comm": policy.input_comm,
        "u_max": policy.u_max,
        "tick_dt": policy.tick_dt,
        "ode_substeps": policy.ode_substeps,
    }
    if isinstance(policy.core, CfGCParams):
        hyper["eps"] = policy.core.eps
        hyper["step_time"] = policy.core.step_time
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "kind": policy.kind,
        "hyper": hyper,
        "activations": {
            "encoder": [l.activation for l in policy.encoder.layers],
            "readout": [l.activation for l in policy.readout.layers],
        },
        "feature_scale": policy.feature_scale.tolist(),
        "feature_clip": policy.feature_clip.astype(int).tolist(),
        "tensors": {
            name: np.asarray(value_of(arr), dtype=np.float64).tolist()
            for name, arr in policy_param_arrays(policy).items()
        },
        "config": config if config is not None else {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Load a policy checkpoint; returns (policy, embedded config)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a policy checkpoint")
    kind = doc["kind"]
    if kind not in MODEL_KINDS:
        raise ValueError(f"checkpoint has unknown model kind {kind!r}")
    hyper = doc["hyper"]
    tensors = {k: np.asarray(v, dtype=np.float64) for k, v in doc["tensors"].items()}

    def build_mlp(prefix, activations):
        layers = []
        for i, act in enumerate(activations):
            layers.append(
                MlpLayer(
                    weight=tensors[f"{prefix}.{i}.weight"],
                    bias=tensors[f"{prefix}.{i}.bias"],
                    activation=act,
                )
            )
        return Mlp(layers)

    core_kwargs = {
        k[len("core."):]: v for k, v in tensors.items() if k.startswith("core.")
    }
    if kind == "ggnn":
        core = GGNNParams(**core_kwargs)
    elif kind == "lgtc":
        core = LGTCParams(**core_kwargs)
    else:
        core = CfGCParams(
            eps=float(hyper.get("eps", 1e-6)),
            step_time=float(hyper.get("step_time", 1.0)),
            **core_kwargs,
        )
    policy = Policy(
        core=core,
        encoder=build_mlp("encoder", doc["activations"]["encoder"]),
        readout=build_mlp("readout", doc["activations"]["readout"]),
        state_comm=int(hyper["state_comm"]),
        input_comm=int(hyper["input_comm"]),
        u_max=float(hyper["u_max"]),
        tick_dt=float(hyper["tick_dt"]),
        ode_substeps=int(hyper["ode_substeps"]),
        feature_scale=np.asarray(doc["feature_scale"], dtype=np.float64),
        feature_clip=np.asarray(doc["feature_clip"], dtype=bool),
    )
    return policy, doc.get("config", {})

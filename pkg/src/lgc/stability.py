"""Stability certificates for the recurrent graph cores.

Everything here runs in the induced infinity norm.  The gated core gets
an incremental input-to-state stability certificate (a contraction gain
that must stay at or below one); the liquid cores get a contraction rate
c derived from norm bounds on the filter banks plus two side conditions
(nonnegative decay, nonnegative log-norm of the Kronecker-lifted
neighbour coupling).  The Softplus penalty turns the same conditions into
a differentiable training regularizer.

Norm conventions for a stacked bank W = (W_0 .. W_K):

* ``_bank_norm``   : induced inf-norm of the vertical stack of transposes
  [W_0^T; ...; W_K^T], i.e. the largest column absolute sum over all taps.
* ``_bank_norm_t`` : induced inf-norm of the horizontal concatenation
  [W_0, ..., W_K], i.e. the largest row absolute sum across all taps.

The two differ in general; the contraction-rate formula uses the
transposed variant for the rate filter exactly as derived.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    absolute,
    add,
    amax,
    is_tensor,
    kron_const,
    logistic,
    mul,
    neg,
    softplus,
    sub,
    total,
    transpose,
    unstack,
    value_of,
)

KRON_SIDE_CAP = 2500


# ---------------------------------------------------------------------------
# matrix norms


def inf_norm(m):
    """Induced infinity norm: maximum absolute row sum."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValueError("empty matrix has no induced norm")
    if m.ndim != 2:
        raise ValueError("inf_norm expects a matrix")
    return float(np.max(np.sum(np.abs(m), axis=1)))


def concat_inf_norm(blocks):
    """Infinity norm of the horizontal block concatenation [B_0, B_1, ...]."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("no blocks to concatenate")
    return inf_norm(np.hstack([np.asarray(b, dtype=np.float64) for b in blocks]))


def log_norm_inf(m):
    """Infinity log-norm: max_i (m_ii + sum_{j != i} |m_ij|)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("log norm needs a square matrix")
    off = np.sum(np.abs(m), axis=1) - np.abs(np.diag(m))
    return float(np.max(np.diag(m) + off))


def _bank_taps(bank):
    if is_tensor(bank):
        return unstack(bank)
    return [bank[k] for k in range(bank.shape[0])]


def _bank_norm(bank):
    """Max column absolute sum over all taps (vertical transpose stack)."""
    if value_of(bank).size == 0:
        return 0.0
    return amax(total(absolute(bank), axis=1))


def _bank_norm_t(bank):
    """Max row absolute sum across the horizontally concatenated taps."""
    if value_of(bank).size == 0:
        return 0.0
    return amax(total(absolute(bank), axis=(0, 2)))


def _vec_norm(v):
    if value_of(v).size == 0:
        return 0.0
    return amax(absolute(v))


# ---------------------------------------------------------------------------
# support norm bounds


@dataclass(frozen=True)
class SupportBounds:
    """Norm envelope of the admissible support matrices.

    Concatenation norms ||[S^lo, ..., S^hi]||_inf are looked up from the
    measured tables when present; otherwise conservative fallbacks from
    the single-power bounds are used (geometric sum upward, first-power
    norm downward).
    """

    order: int
    norm_upper: float
    norm_lower: float = 0.0
    upper_concats: dict = field(default_factory=dict)
    lower_concats: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.norm_lower <= self.norm_upper):
            raise ValueError("need 0 <= norm_lower <= norm_upper")
        if self.order < 0:
            raise ValueError("order must be nonnegative")

    def upper(self, lo, hi):
        if lo > hi:
            return 0.0
        key = (lo, hi)
        if key in self.upper_concats:
            return self.upper_concats[key]
        return float(sum(self.norm_upper ** k for k in range(lo, hi + 1)))

    def lower(self, lo, hi):
        if lo > hi:
            return 0.0
        key = (lo, hi)
        if key in self.lower_concats:
            return self.lower_concats[key]
        base = 1.0 if lo == 0 else 0.0
        if lo <= 1 <= hi:
            base += self.norm_lower
        return base

    @classmethod
    def from_supports(cls, supports, order=None):
        """Measure concatenation norms over a concrete family of supports."""
        supports = list(supports)
        if not supports:
            raise ValueError("need at least one support")
        if order is None:
            order = min(s.order for s in supports)
        uppers, lowers = {}, {}
        for lo in range(order + 1):
            for hi in range(lo, order + 1):
                vals = [
                    concat_inf_norm([s.powers[k] for k in range(lo, hi + 1)])
                    for s in supports
                ]
                uppers[(lo, hi)] = max(vals)
                lowers[(lo, hi)] = min(vals)
        if order >= 1:
            nu, nl = uppers[(1, 1)], lowers[(1, 1)]
        else:
            nu = nl = 0.0
        return cls(order=order, norm_upper=nu, norm_lower=nl,
                   upper_concats=uppers, lower_concats=lowers)

    @classmethod
    def normalized_laplacian_default(cls, order):
        """Analytic envelope for normalized Laplacian supports (||S|| <= 2)."""
        return cls(order=order, norm_upper=2.0, norm_lower=0.0)

    def summary(self):
        return {
            "order": self.order,
            "norm_upper": self.norm_upper,
            "norm_lower": self.norm_lower,
            "identity_concat_upper": self.upper(0, self.order),
            "shifted_concat_lower": self.lower(1, self.order),
        }


# ---------------------------------------------------------------------------
# certificates


def gate_bound(params, bounds):
    """Uniform bound on every forget-gate entry (logistic of filter norms)."""
    s = bounds.upper(0, params.order)
    arg = add(
        mul(s, add(_bank_norm(params.forget_state_filters),
                   _bank_norm(params.forget_input_filters))),
        _vec_norm(params.forget_bias),
    )
    return logistic(arg)


def ggnn_delta_iss_margin(params, bounds):
    """Incremental-stability gain of the gated core; certified iff <= 1."""
    s = bounds.upper(0, params.order)
    state_norm = _bank_norm(params.state_filters)
    input_norm = _bank_norm(params.input_filters)
    forget_norm = _bank_norm(params.forget_state_filters)
    update_norm = _bank_norm(params.update_state_filters)
    quad = 0.25 * s * s
    return add(
        mul(gate_bound(params, bounds), mul(s, state_norm)),
        mul(quad, add(mul(forget_norm, state_norm), mul(update_norm, input_norm))),
    )


def coupling_lift(params, support):
    """Kronecker-lifted neighbour coupling sum_{k>=1} A_k^T (x) S^k."""
    nf = support.n * params.state_dim
    if nf > KRON_SIDE_CAP:
        raise ValueError(
            f"Kronecker lift side {nf} exceeds the cap {KRON_SIDE_CAP}; "
            "sample smaller graphs for the log-norm condition"
        )
    taps = _bank_taps(params.coupling_filters)
    out = np.zeros((nf, nf))
    for k in range(1, len(taps) + 1):
        out = add(out, kron_const(transpose(taps[k - 1]), support.powers[k]))
    return out


def _log_norm_op(m):
    """Taped-capable infinity log-norm of a square matrix."""
    nf = value_of(m).shape[0]
    eye = np.eye(nf)
    rows = total(add(mul(absolute(m), 1.0 - eye), mul(m, eye)), axis=1)
    return amax(rows)


def lgtc_contraction_rate(params, bounds, support=None):
    """Contraction rate c of the liquid core plus its condition margins.

    Returns (c, margins) where margins hold the three certificate
    conditions: c itself, the decay floor min_i b_i, and the log-norm of
    the Kronecker-lifted coupling on the supplied support (None when no
    support is given).
    """
    k = params.order
    c = add(
        sub(
            add(
                _vec_norm(params.decay),
                mul(_bank_norm(params.coupling_filters), bounds.lower(1, k)),
            ),
            mul(_bank_norm_t(params.rate_state_filters), bounds.upper(0, k)),
        ),
        _vec_norm(params.rate_state_bias),
    )
    decay = value_of(params.decay)
    margins = {
        "contraction_rate": float(value_of(c)),
        "decay_floor": float(np.min(decay)) if decay.size else 0.0,
        "coupling_log_norm": None,
    }
    if support is not None:
        lift = value_of(coupling_lift(params, support))
        margins["coupling_log_norm"] = log_norm_inf(lift)
    return c, margins


def lgtc_lipschitz(params, bounds):
    """Input and support Lipschitz constants (l_u, l_S) of the liquid field."""
    k = params.order
    p = {n: np.asarray(value_of(getattr(params, n)), dtype=np.float64)
         for n in ("coupling_filters", "rate_state_filters", "rate_state_bias",
                   "rate_input_filters", "rate_input_bias", "drive_filters")}
    s0 = bounds.upper(0, k)
    rate_state = float(value_of(_bank_norm(p["rate_state_filters"])))
    rate_input = float(value_of(_bank_norm(p["rate_input_filters"])))
    drive = float(value_of(_bank_norm(p["drive_filters"])))
    bx = float(np.max(np.abs(p["rate_state_bias"]))) if p["rate_state_bias"].size else 0.0
    bu = float(np.max(np.abs(p["rate_input_bias"]))) if p["rate_input_bias"].size else 0.0
    inner = rate_state * s0 + rate_input * s0 + bx + bu
    l_u = (2.0 * rate_input + inner * drive) * s0

    # sub-stacks over taps 1 .. K-1
    rate_state_sub = float(value_of(_bank_norm(p["rate_state_filters"][1:k])))
    rate_input_sub = float(value_of(_bank_norm(p["rate_input_filters"][1:k])))
    drive_sub = float(value_of(_bank_norm(p["drive_filters"][1:k])))
    coupling_sub = float(value_of(_bank_norm(p["coupling_filters"][: k - 1])))
    s_sub_up = bounds.upper(1, k - 1)
    s_sub_low = bounds.lower(1, k - 1)
    l_s = math.comb(k + 1, 2) * (
        (inner * drive_sub + 2.0 * rate_state_sub + 2.0 * rate_input_sub) * s_sub_up
        - s_sub_low * coupling_sub
    )
    return l_u, l_s


def stability_penalty(params, bounds, support=None, beta=10.0):
    """Softplus penalty over the certificate conditions (differentiable).

    Gated core: one term on (gain - 1).  Liquid cores: terms on -c, on
    -decay elementwise, and on the negated coupling log-norm when a
    support is supplied.  Certified parameters sit deep in the Softplus
    tail and contribute essentially nothing.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if params.kind == "ggnn":
        return softplus(sub(ggnn_delta_iss_margin(params, bounds), 1.0), beta)
    c, _ = lgtc_contraction_rate(params, bounds, support=None)
    pen = add(softplus(neg(c), beta), total(softplus(neg(params.decay), beta)))
    if support is not None:
        mu = _log_norm_op(coupling_lift(params, support))
        pen = add(pen, softplus(neg(mu), beta))
    return pen


def empirical_jacobian(field, x, u, support, h=1e-5):
    """Central-difference Jacobian of a vector field on the stacked state.

    `field(x, u, support)` maps an (N, F) state to an (N, F) rate; the
    returned matrix acts on the column-stacked state vector.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=np.float64)
    n, f_dim = x.shape
    nf = n * f_dim
    jac = np.empty((nf, nf))
    for j in range(nf):
        pert = np.zeros(nf)
        pert[j] = h
        dp = pert.reshape((n, f_dim), order="F")
        hi = np.asarray(field(x + dp, u, support), dtype=np.float64)
        lo = np.asarray(field(x - dp, u, support), dtype=np.float64)
        col = (hi - lo) / (2.0 * h)
        if not np.all(np.isfinite(col)):
            raise ValueError("vector field produced non-finite values")
        jac[:, j] = col.flatten(order="F")
    return jac


# ---------------------------------------------------------------------------
# reports


@dataclass
class StabilityReport:
    kind: str
    values: dict
    margins: dict
    certified: bool
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "kind": self.kind,
            "values": self.values,
            "margins": self.margins,
            "certified": self.certified,
            "details": self.details,
        }

    def to_json(self, indent=None):
        return json.dumps(self.to_dict(), indent=indent)

    def table(self):
        lines = [f"model kind        {self.kind}"]
        for k, v in self.values.items():
            lines.append(f"{k:<18}{v:.6g}")
        for k, v in self.margins.items():
            shown = "n/a" if v is None else f"{v:.6g}"
            lines.append(f"{'margin ' + k:<25}{shown}")
        lines.append(f"certified         {'yes' if self.certified else 'no'}")
        return "\n".join(lines)


def _sym_psd_floor(m):
    return float(np.min(np.linalg.eigvalsh(0.5 * (m + m.T))))


def certify(params, bounds, support=None):
    """Evaluate the full certificate for any core kind."""
    details = {"bounds": bounds.summary()}
    if params.kind == "ggnn":
        gain = float(value_of(ggnn_delta_iss_margin(params, bounds)))
        gate = float(value_of(gate_bound(params, bounds)))
        margins = {"delta_iss": 1.0 - gain}
        return StabilityReport(
            kind="ggnn",
            values={"delta_iss_gain": gain, "gate_bound": gate},
            margins=margins,
            certified=gain <= 1.0,
            details=details,
        )
    c, margins = lgtc_contraction_rate(params, bounds, support)
    c = float(value_of(c))
    l_u, l_s = lgtc_lipschitz(params, bounds)
    if support is not None:
        lift = value_of(coupling_lift(params, support))
        per_power = []
        for k in range(1, params.order + 1):
            a_k = np.asarray(value_of(params.coupling_filters))[k - 1]
            per_power.append(_sym_psd_floor(np.kron(a_k.T, support.powers[k])))
        details["coupling_psd_floor_per_power"] = per_power
        details["coupling_psd_floor_total"] = _sym_psd_floor(lift)
    known = [v for v in margins.values() if v is not None]
    certified = bool(
        margins["coupling_log_norm"] is not None
        and all(v >= 0.0 for v in known)
    )
    if margins["coupling_log_norm"] is None:
        details["note"] = "no support supplied: coupling log-norm condition unchecked"
    return StabilityReport(
        kind=params.kind,
        values={"contraction_rate": c, "input_lipschitz": l_u, "support_lipschitz": l_s},
        margins=margins,
        certified=certified,
        details=details,
    )

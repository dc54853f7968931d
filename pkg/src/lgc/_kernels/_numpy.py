"""Reference NumPy kernels.

These are the fallback implementations of the hot loops; the compiled
extension (_core) mirrors them exactly.  Every function takes and returns
float64 C-contiguous arrays and performs no validation: callers own the
contracts.
"""

import numpy as np

BACKEND = "numpy"


def filter_apply(powers, x, weights):
    """Polynomial graph filter: sum_k S^k x W_k.

    powers: (K+1, N, N) with powers[0] = I
    x: (N, G), weights: (K+1, G, F) -> (N, F)
    """
    return np.einsum("kij,jg,kgf->if", powers, x, weights, optimize=True)


def masked_filter_apply(powers, x, weights, mask):
    """Graph filter where only masked-in columns of x are shifted.

    mask: (G,) of 0/1.  Columns with mask 0 skip the shift and enter every
    tap through the identity instead.
    """
    out = x @ weights[0]
    m = mask.astype(bool)
    for k in range(1, weights.shape[0]):
        zk = np.where(m[None, :], powers[k] @ x, x)
        out += zk @ weights[k]
    return out


def lgtc_rate(powers, x, rate_state, rate_state_bias, rate_input, state_mask):
    """State-and-input dependent rate f = relu(filter(x) + b) + rate_input."""
    pre = masked_filter_apply(powers, x, rate_state, state_mask) + rate_state_bias
    return np.maximum(pre, 0.0) + rate_input


def lgtc_integrate(
    powers,
    x0,
    coupling,
    rate_state,
    rate_state_bias,
    rate_input,
    drive,
    decay,
    state_mask,
    steps,
    dt,
):
    """Unrolled semi-implicit solver for the liquid graph dynamics.

    Each substep updates
        x <- (x + dt * (-sum_{k>=1} S^k x A_k + f * drive)) / (1 + dt * (decay + f))
    with the rate f recomputed from the current state.  The input-side
    terms rate_input = relu(filter(u) + b_u) and drive = tanh(filter(u))
    are constant over the interval and precomputed by the caller.

    coupling: (K, F, F) taps for k = 1..K (no identity tap).
    """
    x = x0.copy()
    m = state_mask.astype(bool)
    kmax = coupling.shape[0]
    for _ in range(steps):
        f = lgtc_rate(powers, x, rate_state, rate_state_bias, rate_input, state_mask)
        coup = np.zeros_like(x)
        for k in range(1, kmax + 1):
            zk = np.where(m[None, :], powers[k] @ x, x)
            coup += zk @ coupling[k - 1]
        numer = x + dt * (f * drive - coup)
        denom = 1.0 + dt * (decay + f)
        x = numer / denom
    return x


def flocking_pass(pos, vel, leader, target, comm_radius, sensing_radius):
    """One O(N^2) sweep over agent pairs.

    Returns (adjacency, features):
      adjacency: (N, N) unit-weight communication graph, dist <= comm_radius
      features:  (N, 10) rows [vx, vy, close4x, close4y, close2x, close2y,
                 goal_x, goal_y, is_leader, is_follower] where close4/close2
                 sum r_ij/||r_ij||^4 and r_ij/||r_ij||^2 over neighbours
                 within sensing_radius, and goal = pos_leader - target on the
                 leader row only.
    """
    n = pos.shape[0]
    diff = pos[:, None, :] - pos[None, :, :]
    d2 = np.sum(diff * diff, axis=2)
    np.fill_diagonal(d2, np.inf)

    adj = (d2 <= comm_radius * comm_radius).astype(np.float64)

    sensed = d2 <= sensing_radius * sensing_radius
    with np.errstate(divide="ignore"):
        inv2 = np.where(sensed, 1.0 / d2, 0.0)
    inv4 = inv2 * inv2
    close4 = np.einsum("ijc,ij->ic", diff, inv4)
    close2 = np.einsum("ijc,ij->ic", diff, inv2)

    feats = np.zeros((n, 10), dtype=np.float64)
    feats[:, 0:2] = vel
    feats[:, 2:4] = close4
    feats[:, 4:6] = close2
    feats[leader, 6:8] = pos[leader] - target
    feats[:, 9] = 1.0
    feats[leader, 8] = 1.0
    feats[leader, 9] = 0.0
    return adj, feats

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops; exact mirrors of the reference kernels in _numpy.py."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


cdef inline double _relu(double v) noexcept nogil:
    return v if v > 0.0 else 0.0


cdef void _shift(const double[:, :, ::1] powers, Py_ssize_t k,
                 const double[:, ::1] x, double[:, ::1] out) noexcept nogil:
    # out = powers[k] @ x
    cdef Py_ssize_t n = x.shape[0], g = x.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double p
    for i in range(n):
        for c in range(g):
            out[i, c] = 0.0
        for j in range(n):
            p = powers[k, i, j]
            if p != 0.0:
                for c in range(g):
                    out[i, c] += p * x[j, c]


cdef void _mask_columns(const double[:, ::1] x, const double[::1] mask,
                        double[:, ::1] z) noexcept nogil:
    # masked-out columns bypass the shift: z[:, c] = x[:, c]
    cdef Py_ssize_t n = x.shape[0], g = x.shape[1]
    cdef Py_ssize_t i, c
    for c in range(g):
        if mask[c] == 0.0:
            for i in range(n):
                z[i, c] = x[i, c]


cdef void _matmul_acc(const double[:, ::1] z, const double[:, :, ::1] w,
                      Py_ssize_t k, double[:, ::1] out) noexcept nogil:
    # out += z @ w[k]
    cdef Py_ssize_t n = z.shape[0], g = z.shape[1], f = w.shape[2]
    cdef Py_ssize_t i, a, b
    cdef double v
    for i in range(n):
        for a in range(g):
            v = z[i, a]
            if v != 0.0:
                for b in range(f):
                    out[i, b] += v * w[k, a, b]


cdef _as_c2(arr):
    return np.ascontiguousarray(arr, dtype=np.float64)


def filter_apply(powers, x, weights):
    cdef const double[:, :, ::1] p = _as_c2(powers)
    cdef const double[:, ::1] xv = _as_c2(x)
    cdef const double[:, :, ::1] w = _as_c2(weights)
    cdef Py_ssize_t k1 = w.shape[0], k
    out_arr = np.zeros((xv.shape[0], w.shape[2]), dtype=np.float64)
    z_arr = np.empty((xv.shape[0], xv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] z = z_arr
    with nogil:
        for k in range(k1):
            _shift(p, k, xv, z)
            _matmul_acc(z, w, k, out)
    return out_arr


def masked_filter_apply(powers, x, weights, mask):
    cdef const double[:, :, ::1] p = _as_c2(powers)
    cdef const double[:, ::1] xv = _as_c2(x)
    cdef const double[:, :, ::1] w = _as_c2(weights)
    cdef const double[::1] m = _as_c2(mask)
    cdef Py_ssize_t k1 = w.shape[0], k
    out_arr = np.zeros((xv.shape[0], w.shape[2]), dtype=np.float64)
    z_arr = np.empty((xv.shape[0], xv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] z = z_arr
    with nogil:
        _matmul_acc(xv, w, 0, out)
        for k in range(1, k1):
            _shift(p, k, xv, z)
            _mask_columns(xv, m, z)
            _matmul_acc(z, w, k, out)
    return out_arr


cdef void _rate(const double[:, :, ::1] powers, const double[:, ::1] x,
                const double[:, :, ::1] rate_state, const double[::1] bias,
                const double[:, ::1] rate_input, const double[::1] mask,
                double[:, ::1] z, double[:, ::1] f) noexcept nogil:
    # f = relu(masked_filter(x; rate_state) + bias) + rate_input
    cdef Py_ssize_t n = x.shape[0], nf = rate_state.shape[2]
    cdef Py_ssize_t k1 = rate_state.shape[0]
    cdef Py_ssize_t i, b, k
    for i in range(n):
        for b in range(nf):
            f[i, b] = 0.0
    _matmul_acc(x, rate_state, 0, f)
    for k in range(1, k1):
        _shift(powers, k, x, z)
        _mask_columns(x, mask, z)
        _matmul_acc(z, rate_state, k, f)
    for i in range(n):
        for b in range(nf):
            f[i, b] = _relu(f[i, b] + bias[b]) + rate_input[i, b]


def lgtc_rate(powers, x, rate_state, rate_state_bias, rate_input, state_mask):
    cdef const double[:, :, ::1] p = _as_c2(powers)
    cdef const double[:, ::1] xv = _as_c2(x)
    cdef const double[:, :, ::1] rs = _as_c2(rate_state)
    cdef const double[::1] bias = _as_c2(rate_state_bias)
    cdef const double[:, ::1] ri = _as_c2(rate_input)
    cdef const double[::1] m = _as_c2(state_mask)
    f_arr = np.empty((xv.shape[0], rs.shape[2]), dtype=np.float64)
    z_arr = np.empty((xv.shape[0], xv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] f = f_arr
    cdef double[:, ::1] z = z_arr
    with nogil:
        _rate(p, xv, rs, bias, ri, m, z, f)
    return f_arr


def lgtc_integrate(powers, x0, coupling, rate_state, rate_state_bias,
                   rate_input, drive, decay, state_mask, steps, dt):
    cdef const double[:, :, ::1] p = _as_c2(powers)
    cdef const double[:, :, ::1] coup_w = _as_c2(coupling)
    cdef const double[:, :, ::1] rs = _as_c2(rate_state)
    cdef const double[::1] bias = _as_c2(rate_state_bias)
    cdef const double[:, ::1] ri = _as_c2(rate_input)
    cdef const double[:, ::1] dr = _as_c2(drive)
    cdef const double[::1] dec = _as_c2(decay)
    cdef const double[::1] m = _as_c2(state_mask)
    x_arr = _as_c2(x0).copy()
    cdef double[:, ::1] x = x_arr
    cdef Py_ssize_t n = x.shape[0], nf = x.shape[1]
    cdef Py_ssize_t kmax = coup_w.shape[0]
    cdef Py_ssize_t nsteps = int(steps)
    cdef double h = float(dt)
    f_arr = np.empty((n, nf), dtype=np.float64)
    c_arr = np.empty((n, nf), dtype=np.float64)
    z_arr = np.empty((n, nf), dtype=np.float64)
    cdef double[:, ::1] f = f_arr
    cdef double[:, ::1] c = c_arr
    cdef double[:, ::1] z = z_arr
    cdef Py_ssize_t s, i, b, k
    with nogil:
        for s in range(nsteps):
            _rate(p, x, rs, bias, ri, m, z, f)
            for i in range(n):
                for b in range(nf):
                    c[i, b] = 0.0
            for k in range(1, kmax + 1):
                _shift(p, k, x, z)
                _mask_columns(x, m, z)
                _matmul_acc(z, coup_w, k - 1, c)
            for i in range(n):
                for b in range(nf):
                    x[i, b] = (x[i, b] + h * (f[i, b] * dr[i, b] - c[i, b])) \
                        / (1.0 + h * (dec[b] + f[i, b]))
    return x_arr


def flocking_pass(pos, vel, leader, target, comm_radius, sensing_radius):
    cdef const double[:, ::1] r = _as_c2(pos)
    cdef const double[:, ::1] v = _as_c2(vel)
    cdef const double[::1] goal = _as_c2(target)
    cdef Py_ssize_t lead = int(leader)
    cdef double cr2 = float(comm_radius) * float(comm_radius)
    cdef double sr2 = float(sensing_radius) * float(sensing_radius)
    cdef Py_ssize_t n = r.shape[0]
    adj_arr = np.zeros((n, n), dtype=np.float64)
    feats_arr = np.zeros((n, 10), dtype=np.float64)
    cdef double[:, ::1] adj = adj_arr
    cdef double[:, ::1] feats = feats_arr
    cdef Py_ssize_t i, j
    cdef double dx, dy, d2, inv2, inv4
    with nogil:
        for i in range(n):
            for j in range(n):
                if j == i:
                    continue
                dx = r[i, 0] - r[j, 0]
                dy = r[i, 1] - r[j, 1]
                d2 = dx * dx + dy * dy
                if d2 <= cr2:
                    adj[i, j] = 1.0
                if d2 <= sr2:
                    inv2 = 1.0 / d2
                    inv4 = inv2 * inv2
                    feats[i, 2] += dx * inv4
                    feats[i, 3] += dy * inv4
                    feats[i, 4] += dx * inv2
                    feats[i, 5] += dy * inv2
            feats[i, 0] = v[i, 0]
            feats[i, 1] = v[i, 1]
            feats[i, 9] = 1.0
        feats[lead, 6] = r[lead, 0] - goal[0]
        feats[lead, 7] = r[lead, 1] - goal[1]
        feats[lead, 8] = 1.0
        feats[lead, 9] = 0.0
    return adj_arr, feats_arr

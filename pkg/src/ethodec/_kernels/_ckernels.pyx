# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the row-wise and elementwise kernels.

Each loop is fused into a single pass per row, which avoids the temporary
arrays NumPy allocates for every intermediate on small inputs.
"""

import numpy as np
from libc.math cimport exp, log, sqrt, tanh, NAN

__all__ = [
    "softmax_rows",
    "softmax_rows_backward",
    "log_softmax_rows",
    "log_softmax_rows_backward",
    "layer_norm_rows",
    "layer_norm_rows_backward",
    "gelu",
    "gelu_backward",
    "adamw_update",
    "average_precision",
    "run_lengths",
]

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double mx, s, e
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            e = exp(x[i, j] - mx)
            y[i, j] = e
            s += e
        for j in range(n):
            y[i, j] /= s
    return out


def softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += g[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (g[i, j] - s)
    return out


def log_softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double mx, s, lse
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            s += exp(x[i, j] - mx)
        lse = log(s)
        for j in range(n):
            y[i, j] = (x[i, j] - mx) - lse
    return out


def log_softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += g[i, j]
        for j in range(n):
            dx[i, j] = g[i, j] - exp(y[i, j]) * s
    return out


def layer_norm_rows(const double[:, ::1] x, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    rstd_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] xh = out
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            xh[i, j] = d
            var += d * d
        var /= n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            xh[i, j] *= r
    return out, rstd_arr


def layer_norm_rows_backward(const double[:, ::1] g, const double[:, ::1] xhat,
                             const double[::1] rstd):
    cdef Py_ssize_t m = g.shape[0], n = g.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double gm, gxm
    for i in range(m):
        gm = 0.0
        gxm = 0.0
        for j in range(n):
            gm += g[i, j]
            gxm += g[i, j] * xhat[i, j]
        gm /= n
        gxm /= n
        for j in range(n):
            dx[i, j] = rstd[i] * (g[i, j] - gm - xhat[i, j] * gxm)
    return out


def _gelu_flat(const double[::1] x, double[::1] y):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = x[i]
        y[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))


def gelu(x):
    out = np.empty_like(x)
    _gelu_flat(x.reshape(-1), out.reshape(-1))
    return out


def _gelu_backward_flat(const double[::1] x, const double[::1] g, double[::1] dx):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, t
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        dx[i] = g[i] * (0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v))


def gelu_backward(x, g):
    out = np.empty_like(x)
    _gelu_backward_flat(x.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


def adamw_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, double bc1, double bc2):
    """In-place decoupled-decay Adam step on flat float64 arrays."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double decay = lr * weight_decay
    cdef double gi, pi
    for i in range(n):
        gi = g[i]
        pi = p[i]
        if weight_decay != 0.0:
            pi = pi - decay * pi
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        p[i] = pi - lr * ((m[i] / bc1) / (sqrt(v[i] / bc2) + eps))


def average_precision(scores, positives):
    order_arr = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    pos_arr = np.ascontiguousarray(positives, dtype=np.int64)
    cdef const long long[::1] order = order_arr.astype(np.int64)
    cdef const long long[::1] pos = pos_arr
    cdef Py_ssize_t k, n = order.shape[0]
    cdef long long hits = 0
    cdef double total = 0.0
    for k in range(n):
        if pos[order[k]] != 0:
            hits += 1
            total += <double>hits / <double>(k + 1)
    if hits == 0:
        return NAN
    return total / hits


def run_lengths(labels):
    lab_arr = np.ascontiguousarray(labels, dtype=np.int64)
    cdef const long long[::1] lab = lab_arr
    cdef Py_ssize_t n = lab.shape[0], i, r = 0
    values_arr = np.empty(n, dtype=np.int64)
    starts_arr = np.empty(n, dtype=np.int64)
    lengths_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] values = values_arr
    cdef long long[::1] starts = starts_arr
    cdef long long[::1] lengths = lengths_arr
    if n == 0:
        return values_arr, starts_arr, lengths_arr
    values[0] = lab[0]
    starts[0] = 0
    for i in range(1, n):
        if lab[i] != lab[i - 1]:
            lengths[r] = i - starts[r]
            r += 1
            values[r] = lab[i]
            starts[r] = i
    lengths[r] = n - starts[r]
    r += 1
    return values_arr[:r].copy(), starts_arr[:r].copy(), lengths_arr[:r].copy()

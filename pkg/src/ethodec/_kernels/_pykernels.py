"""NumPy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``ETHODEC_PURE_PYTHON``
is set. Every function here has an identically named counterpart in
``_ckernels.pyx``; results agree to within a few ulp (summation order and
``exp`` implementations differ).
"""

import numpy as np

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

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def log_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_rows_backward(y, g):
    return g - np.exp(y) * g.sum(axis=1, keepdims=True)


def layer_norm_rows(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd[:, None], rstd


def layer_norm_rows_backward(g, xhat, rstd):
    gm = g.mean(axis=1, keepdims=True)
    gxm = (g * xhat).mean(axis=1, keepdims=True)
    return rstd[:, None] * (g - gm - xhat * gxm)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def gelu_backward(x, g):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """In-place decoupled-decay Adam step on flat float64 arrays."""
    if weight_decay != 0.0:
        p -= (lr * weight_decay) * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps))


def average_precision(scores, positives):
    order = np.argsort(-scores, kind="stable")
    hits = positives[order] != 0
    n_pos = int(hits.sum())
    if n_pos == 0:
        return float("nan")
    ranks = np.flatnonzero(hits) + 1.0
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


def run_lengths(labels):
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate(([0], change)).astype(np.int64)
    lengths = np.diff(np.concatenate((starts, [n]))).astype(np.int64)
    return labels[starts].copy(), starts, lengths

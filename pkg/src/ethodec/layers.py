"""Attention and MLP blocks shared by the text encoder and the query decoder."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, gelu, layer_norm_rows, matmul, parameter, permute_rows, softmax_rows
from .errors import ContractError

MASKED = -1e30  # additive score for padded keys; finite so forward checks pass


def dense_init(rng, fan_in, fan_out, name=None, scale=1.0):
    w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))
    return parameter(w, name)


def zeros(shape, name=None):
    return parameter(np.zeros(shape), name)


def ones(shape, name=None):
    return parameter(np.ones(shape), name)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(tuple(lead) + (n, heads, d // heads)).swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-3, -2).reshape(tuple(lead) + (n, h * dh))


def attention(q_in, k_in, v_in, wq, wk, wv, wo, heads, key_bias=None):
    """Multi-head scaled dot-product attention.

    ``q_in`` is ``[..., Nq, D]``; ``k_in``/``v_in`` are ``[..., Nk, D]``.
    ``key_bias`` is added to the scores and must broadcast to
    ``[..., heads, Nq, Nk]`` (used for padding masks).
    """
    dim = wq.shape[1]
    if dim % heads:
        raise ContractError(f"model dim {dim} is not divisible by {heads} heads")
    if k_in.shape[-2] == 0:
        raise ContractError("attention over zero keys")
    q = _split_heads(matmul(q_in, wq), heads)
    k = _split_heads(matmul(k_in, wk), heads)
    v = _split_heads(matmul(v_in, wv), heads)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dim // heads))
    if key_bias is not None:
        scores = scores + key_bias
    return matmul(_merge_heads(matmul(softmax_rows(scores), v)), wo)


def canonical_row_order(x: np.ndarray) -> np.ndarray:
    """Lexicographic row order of ``x[..., N, D]``, computed per leading index.

    Reducing over a set in this order makes the result independent of the
    order the set arrived in, bit for bit.
    """
    if x.ndim == 2:
        return np.lexsort(x.T[::-1])
    flat = x.reshape(-1, x.shape[-2], x.shape[-1])
    out = np.empty(flat.shape[:2], dtype=np.int64)
    for i, rows in enumerate(flat):
        out[i] = np.lexsort(rows.T[::-1])
    return out.reshape(x.shape[:-1])


def set_attention(x, wq, wk, wv, wo, heads):
    """Self-attention over an unordered set of rows.

    Keys and values are taken in :func:`canonical_row_order`, so permuting the
    rows of ``x`` permutes the output rows exactly.
    """
    kv = permute_rows(x, canonical_row_order(x.data))
    return attention(x, kv, kv, wq, wk, wv, wo, heads)


def mlp(x, w1, b1, w2, b2):
    return matmul(gelu(matmul(x, w1) + b1), w2) + b2


def maybe_norm(x, gain, bias, enabled, eps=1e-5):
    return layer_norm_rows(x, gain, bias, eps) if enabled else x

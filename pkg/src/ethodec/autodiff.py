"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside a ``with Tape() as tape:`` block are recorded when
any input requires a gradient; ``tape.backward(loss)`` then walks the record
in reverse and accumulates ``.grad`` on the leaf tensors. Outside a tape
nothing is recorded, so inference carries no bookkeeping cost.

Elementwise ops follow NumPy broadcasting; ``matmul`` follows ``@`` semantics
for operands of rank >= 2 (leading dims broadcast). Every forward result is
checked for NaN/Inf.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .errors import ContractError, DimensionError, NonFiniteError, OracleError

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, data, requires_grad=False):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._tape is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            _not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data, False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        if self.ndim != 2:
            raise DimensionError(f".T needs a 2-d tensor, got shape {self.shape}")
        return swapaxes(self, 0, 1)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _not_scalar(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a topological order by construction: a node can only
    consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, out, backward_fn):
        out._tape = self
        self.nodes.append(_Node(op, inputs, out, backward_fn))

    def reset(self):
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []

    def backward(self, loss):
        backward(loss, self)


class no_grad:
    """Suspend recording, even inside an enclosing tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def _emit(op, data, inputs, backward_fn):
    # a finite sum proves every entry finite; only overflow needs the full scan
    if not math.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    stack = getattr(_state, "stack", None)
    tape = stack[-1] if stack else None
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out = Tensor._wrap(data, True)
                tape.record(op, inputs, out, backward_fn)
                return out
    return Tensor._wrap(data, False)


def backward(loss: Tensor, tape: Tape | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The tape is reset afterwards, so each recorded node is visited once.
    """
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise ContractError("backward needs a tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ContractError("loss was not recorded on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    owners = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t
    for key, g in grads.items():
        t = owners.get(key)
        if t is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.reset()


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", data, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _emit("exp", data, (a,), lambda g: (g * data,))


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a):
    """log(1 + exp(a)) computed without overflow."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        # sigmoid, evaluated on the side that cannot overflow
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _emit("softplus", data, (a,), bw)


def gelu(a):
    """GELU, tanh form: 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))."""
    a = as_tensor(a)
    x = np.ascontiguousarray(a.data)
    return _emit("gelu", K.gelu(x), (a,), lambda g: (K.gelu_backward(x, np.ascontiguousarray(g)),))


# ------------------------------------------------------------------ reductions


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", data, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------- shape


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return _emit("swapaxes", a.data.swapaxes(ax1, ax2), (a,), lambda g: (g.swapaxes(ax1, ax2),))


def embedding(table, ids):
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _emit("embedding", data, (table,), bw)


def pick(a, index):
    """Select one entry per row of the last axis: ``out[..., ] = a[..., index]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    lead = a.shape[:-1]
    if index.shape != lead:
        raise DimensionError(f"pick index shape {index.shape} does not match {lead}")
    flat = a.data.reshape(-1, a.shape[-1])
    rows = np.arange(flat.shape[0])
    data = flat[rows, index.reshape(-1)].reshape(lead)

    def bw(g):
        out = np.zeros_like(flat)
        out[rows, index.reshape(-1)] = g.reshape(-1)
        return (out.reshape(a.shape),)

    return _emit("pick", data, (a,), bw)


def permute_rows(a, perm):
    """Reorder axis -2 of ``a`` independently per leading index.

    ``perm`` has shape ``a.shape[:-1]`` and each trailing vector must be a
    permutation; the backward pass is therefore an exact inverse gather.
    """
    a = as_tensor(a)
    perm = np.asarray(perm, dtype=np.int64)
    data = np.take_along_axis(a.data, perm[..., None], axis=-2)

    def bw(g):
        inv = np.argsort(perm, axis=-1)
        return (np.take_along_axis(g, inv[..., None], axis=-2),)

    return _emit("permute_rows", data, (a,), bw)


# ---------------------------------------------------------------------- matmul


def matmul(a, b):
    """Batched ``a @ b`` with numpy broadcasting of the leading axes.

    A stack times a single matrix (the common ``[B, N, D] @ [D, E]`` case) is
    computed as one 2-D product, and so is its weight gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    flat = a.ndim > 2 and b.ndim == 2
    try:
        if flat:
            data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from None

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", data, (a, b), bw)


# ---------------------------------------------------------------- row kernels


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_rows(a):
    """Softmax over the last axis with per-row max subtraction."""
    a = as_tensor(a)
    y = K.softmax_rows(_rows(a.data))

    def bw(g):
        return (K.softmax_rows_backward(y, _rows(g)).reshape(a.shape),)

    return _emit("softmax_rows", y.reshape(a.shape), (a,), bw)


def log_softmax_rows(a):
    a = as_tensor(a)
    y = K.log_softmax_rows(_rows(a.data))

    def bw(g):
        return (K.log_softmax_rows_backward(y, _rows(g)).reshape(a.shape),)

    return _emit("log_softmax_rows", y.reshape(a.shape), (a,), bw)


def normalize_rows(a, eps=1e-5):
    """Zero-mean, unit-variance rows (last axis), no affine part."""
    a = as_tensor(a)
    xhat, rstd = K.layer_norm_rows(_rows(a.data), float(eps))

    def bw(g):
        return (K.layer_norm_rows_backward(_rows(g), xhat, rstd).reshape(a.shape),)

    return _emit("normalize_rows", xhat.reshape(a.shape), (a,), bw)


def layer_norm_rows(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ContractError("layer norm eps must be positive")
    return add(mul(normalize_rows(x, eps), gain), bias)


# -------------------------------------------------------------------- oracle


def _scalar_value(v):
    if isinstance(v, Tensor):
        if v.data.size != 1:
            _not_scalar(v)
        return float(v.data.reshape(-1)[0])
    return float(v)


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
) -> float:
    """Compare tape gradients of ``f(params)`` against central differences.

    Returns the largest ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``
    over every coordinate of every parameter. ``params`` are perturbed in
    place and restored bit-for-bit; their ``.grad`` is left untouched.
    """
    return finite_difference_check_many(lambda ps: (f(ps),), params, eps)[0]


def finite_difference_check_many(f, params, eps: float = 1e-3) -> list[float]:
    """:func:`finite_difference_check` for several scalar losses at once.

    ``f`` returns a tuple of scalar tensors; each gets its own backward pass
    and its own worst-case error, while every perturbed forward is shared.
    """
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
    n_out = None
    analytic = []
    k = 0
    while n_out is None or k < n_out:
        for p in params:
            p.grad = None
        with Tape() as tape:
            losses = tuple(f(params))
            loss = losses[k] if losses else None
            if not isinstance(loss, Tensor) or loss._tape is not tape:
                raise ContractError("f must return scalar tensors recorded from params")
            tape.backward(loss)
        n_out = len(losses)
        analytic.append([np.zeros(p.shape) if p.grad is None else p.grad.reshape(-1) for p in params])
        k += 1
    for p, g in zip(params, saved):
        p.grad = g

    def values():
        return np.array([_scalar_value(v) for v in f(params)])

    with no_grad():
        first, second = values(), values()
        if not np.array_equal(first, second):
            raise OracleError(f"f is not deterministic: {first!r} != {second!r}")
        worst = np.zeros(n_out)
        for j, p in enumerate(params):
            flat = p.data.reshape(-1)
            ga = np.array([a[j].reshape(-1) for a in analytic])  # [n_out, size]
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = values()
                flat[i] = orig - eps
                fm = values()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                err = np.abs(ga[:, i] - numeric) / np.maximum(1e-8, np.abs(ga[:, i]) + np.abs(numeric))
                np.maximum(worst, err, out=worst)
    return [float(w) for w in worst]

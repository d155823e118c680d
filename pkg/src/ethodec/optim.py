"""AdamW and the warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ContractError, TrainingError


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``params`` maps names to Tensors (or arrays); ``grads`` maps the same
    names to gradient arrays. A missing gradient counts as zero. Decay is
    applied as ``p <- p - lr * wd * p`` before the moment update.
    """
    step = state.step + 1
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name!r}", step=step)
    state.step = step
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    for name, p in params.items():
        data = p if isinstance(p, np.ndarray) else p.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        elif g.shape != data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {data.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros(data.size)
            state.v[name] = np.zeros(data.size)
        flat = data.reshape(-1)
        K.adamw_update(
            flat, np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
            state.m[name], state.v[name],
            float(lr), state.beta1, state.beta2, state.eps, state.weight_decay, bc1, bc2,
        )


class AdamW:
    """Thin stateful wrapper: reads ``.grad`` from each parameter Tensor."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        for p in self.params.values():
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
        self.state = OptimizerState(beta1, beta2, eps, weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        adamw_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state, lr)


@dataclass
class LrSchedule:
    start_lr: float = 1e-5
    peak_lr: float = 1e-4
    warmup_epochs: int = 10
    total_epochs: int = 100
    steps_per_epoch: int = 1
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.start_lr > self.peak_lr:
            raise ConfigError("warm-up start lr exceeds peak lr")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("warm-up must fit inside the total epochs")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self):
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self):
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Linear warm-up from ``start_lr`` to ``peak_lr``, then cosine to ``floor_lr``.

    Step ``warmup_steps`` is the first cosine step and returns ``peak_lr``; the
    cosine reaches the floor at ``total_steps`` and stays there.
    """
    if step < 0:
        raise ContractError("step must be non-negative")
    s = schedule
    warm, total = s.warmup_steps, s.total_steps
    if step < warm:
        return s.start_lr + (s.peak_lr - s.start_lr) * (step / warm)
    if step >= total:
        return s.floor_lr
    progress = (step - warm) / (total - warm)
    return s.floor_lr + (s.peak_lr - s.floor_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0

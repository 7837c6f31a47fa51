"""AdamW with decoupled weight decay and the warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ShapeError


@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus the shared step counter."""

    base_lr: float
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr):
    """Apply one AdamW update in place.

    ``params`` and ``grads`` are parallel sequences of arrays; a ``None``
    gradient leaves its parameter (and its moments) untouched. Weight decay is
    applied directly to the parameter, never folded into the moments.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}", field="base_lr")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    beta1, beta2 = state.betas
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} at index {i}")
        m = state.exp_avg.get(i)
        if m is None:
            m = state.exp_avg[i] = np.zeros_like(p)
            state.exp_avg_sq[i] = np.zeros_like(p)
        v = state.exp_avg_sq[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class AdamW:
    """Thin stateful wrapper binding ``adamw_step`` to a list of tensors."""

    def __init__(self, params, lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState(base_lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.state.base_lr if lr is None else lr
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)


def lr_schedule(step, total_steps, warmup_frac=0.03, base_lr=1e-3):
    """Linear warm-up from 0 to ``base_lr`` then cosine annealing to 0.

    Warm-up lasts ``ceil(warmup_frac * total_steps)`` steps, capped so at least
    one annealing step remains.
    """
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive", field="total_steps")
    if not 0.0 < warmup_frac < 1.0:
        raise ConfigError(f"warmup_frac must lie in (0, 1), got {warmup_frac}", field="warmup_frac")
    if base_lr <= 0:
        raise ConfigError(f"base_lr must be positive, got {base_lr}", field="base_lr")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]", field="step")
    warmup = warmup_steps(total_steps, warmup_frac)
    if step >= total_steps:
        return 0.0
    if step < warmup:
        return base_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def warmup_steps(total_steps, warmup_frac):
    w = max(1, math.ceil(warmup_frac * total_steps))
    return min(w, max(total_steps - 1, 1))

"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``.

    Steps beyond ``total_steps`` stay at ``lr_min``.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimState:
    lr_max: float = 4e-4
    lr_min: float = 3e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)
    t: dict = field(default_factory=dict, repr=False)

    HYPERPARAMS = ("lr_max", "lr_min", "weight_decay", "beta1", "beta2", "eps")


def adamw_step(named_params, state: OptimState, lr: float) -> None:
    """Update parameters in place from their ``.grad``.

    Parameters without a gradient are skipped entirely (no decay, no moment
    update), so unused heads stay untouched.
    """
    b1, b2 = state.beta1, state.beta2
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step += 1

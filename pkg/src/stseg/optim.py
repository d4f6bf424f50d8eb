"""Adam with bias correction and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import Tensor

ONECYCLE_PCT_START = 0.3
ONECYCLE_DIV_FACTOR = 25.0
ONECYCLE_FINAL_DIV_FACTOR = 1e4


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float | None = None,
) -> OptimizerState:
    """Apply one Adam update in place. Parameters whose gradient is ``None`` are treated as zero-gradient."""
    lr = state.lr if lr is None else lr
    if not lr > 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return state


def onecycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    pct_start: float = ONECYCLE_PCT_START,
    div_factor: float = ONECYCLE_DIV_FACTOR,
    final_div_factor: float = ONECYCLE_FINAL_DIV_FACTOR,
) -> float:
    """Linear warm-up to ``max_lr`` then cosine annealing to ``max_lr / final_div_factor``.

    The peak sits at ``round(pct_start * total_steps)`` and the final step
    ``total_steps - 1`` lands on the minimum.
    """
    if total_steps < 1:
        raise ValidationError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    if not max_lr > 0:
        raise ValidationError(f"max_lr must be positive, got {max_lr}")
    initial = max_lr / div_factor
    final = max_lr / final_div_factor
    peak = min(int(round(pct_start * total_steps)), total_steps - 1)
    if step <= peak:
        if peak == 0:
            return initial
        return initial + (max_lr - initial) * step / peak
    frac = (step - peak) / (total_steps - 1 - peak)
    return final + (max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))

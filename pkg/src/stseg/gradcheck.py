"""Finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ValidationError
from .tensor import Tensor

FD_STEP = 1e-5
ABS_FLOOR = 1e-8


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    h: float = FD_STEP,
    floor: float = ABS_FLOOR,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
    kink_tol: float | None = None,
) -> float:
    """Max relative error between the reverse-mode gradient of ``f`` and central differences.

    Runs in double precision. The error at coordinate ``i`` is
    ``|g_i - n_i| / max(|g_i|, |n_i|, floor)``. With ``max_checks`` only that
    many randomly chosen coordinates are differenced.

    With ``kink_tol`` set, a coordinate whose one-sided differences disagree
    by more than that relative amount is treated as straddling a
    non-differentiable point (a ReLU kink) and is re-differenced with a step
    100 times smaller.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    y = f(x)
    if y.data.size != 1:
        raise ValidationError(f"grad_check needs a scalar function, got output shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise ValidationError(f"function value is not finite at the check point: {y.data}")
    y.backward()
    analytic = np.zeros_like(x0) if x.grad is None else x.grad

    flat = x0.reshape(-1)
    idx = np.arange(flat.size)
    if max_checks is not None and max_checks < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))

    worst = 0.0
    a_flat = analytic.reshape(-1)
    f0 = float(y.data)
    for i in idx:
        a = float(a_flat[i])
        numeric, fwd, bwd = _central(f, flat, x0.shape, i, h, f0)
        if kink_tol is not None and abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor):
            numeric, _, _ = _central(f, flat, x0.shape, i, h / 100, f0)
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def _central(f, flat, shape, i, h, f0):
    vals = []
    for sign in (1.0, -1.0):
        probe = flat.copy()
        probe[i] += sign * h
        v = f(Tensor(probe.reshape(shape))).data
        if not np.isfinite(v).all():
            raise ValidationError(f"function value is not finite at coordinate {i} offset {sign * h}")
        vals.append(float(v))
    return (vals[0] - vals[1]) / (2 * h), (vals[0] - f0) / h, (f0 - vals[1]) / h

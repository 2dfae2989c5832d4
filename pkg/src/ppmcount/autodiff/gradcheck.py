"""Central-difference gradient checking against the tape."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tape, Tensor


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
    coords: Optional[np.ndarray] = None,
    floor: float = 1e-7,
) -> float:
    """Max relative error between tape and finite-difference gradients of ``f`` at ``x``.

    ``f`` must map ``x`` to a scalar tensor. ``x.data`` is perturbed in place and
    restored. ``coords`` optionally restricts the check to a subset of flat
    indices. Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with Tape():
            y = f(x)
            if y.data.size != 1 or y.ndim != 0:
                raise ValueError(f"gradient_check needs a scalar-valued f, got shape {y.shape}")
            if y.requires_grad:
                y._tape.backward(y)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

        flat = x.data.reshape(-1)
        if not np.shares_memory(flat, x.data):
            raise ValueError("gradient_check needs contiguous tensor data")
        idx = np.arange(flat.size) if coords is None else np.asarray(coords)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(f(x).data)
            flat[i] = orig - epsilon
            down = float(f(x).data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        return worst
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad

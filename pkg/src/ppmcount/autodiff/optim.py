"""SGD with classical momentum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class SgdMomentumState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: dict[str, Tensor], state: SgdMomentumState) -> None:
    """Apply ``v <- momentum*v + grad; p <- p - lr*v`` to every parameter, then clear grads.

    Velocities are created on first use, zero-initialised. Every parameter must
    carry a gradient, i.e. ``backward`` has to run first.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise RuntimeError(f"sgd_step called before backward; no gradient for {missing[:5]}")
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        v *= state.momentum
        v += p.grad
        p.data -= state.learning_rate * v
        p.grad = None

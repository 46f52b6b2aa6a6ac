"""Momentum SGD with coupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from avfuse.errors import DimensionError, NonFiniteError
from avfuse.numerics.tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], state: OptimizerState,
             lr_scale: dict[str, float] | None = None) -> None:
    """In-place update of ``params`` using their ``.grad``.

    velocity <- momentum * velocity + grad + weight_decay * param
    param    <- param - lr * scale * velocity

    Parameters without a gradient are skipped.  ``lr_scale`` maps parameter
    names to learning-rate multipliers (default 1).
    """
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise DimensionError(f"{name}: grad shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        d = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.velocity.get(name)
        if v is None:
            v = np.array(d, copy=True)
        else:
            v = state.momentum * v + d
        state.velocity[name] = v
        scale = 1.0 if lr_scale is None else lr_scale.get(name, 1.0)
        p.data -= (state.learning_rate * scale) * v

"""SGD with momentum and (coupled) L2 weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr, momentum=0.0, weight_decay=0.0):
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(lr=lr, momentum=momentum, weight_decay=weight_decay, velocity=velocity)


def sgd_step(params: dict, grads: dict, state: OptimState):
    """One update; returns ``(new_params, new_state)`` and leaves inputs untouched.

    velocity <- momentum * velocity + grad + weight_decay * param
    param    <- param - lr * velocity
    """
    if params.keys() != grads.keys():
        raise ContractError("grads do not mirror params")
    new_params, new_velocity = {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.shape} for '{k}'")
        v = state.velocity.get(k)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ContractError(f"velocity shape {v.shape} != param shape {p.shape} for '{k}'")
        v = state.momentum * v + g + state.weight_decay * p
        new_velocity[k] = v
        new_params[k] = p - state.lr * v
    new_state = OptimState(state.lr, state.momentum, state.weight_decay, new_velocity)
    return new_params, new_state

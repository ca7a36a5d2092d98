"""Adam optimizer with bias correction; parameters updated in a fixed order."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
    for name, value in params.items():
        state.m[name] = np.zeros_like(value)
        state.v[name] = np.zeros_like(value)
    return state


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place. Parameter names are visited
    in sorted order so the trajectory is independent of dict insertion order."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} "
                                     f"at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        params[name] -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(
            params[name].dtype)
    return params, state

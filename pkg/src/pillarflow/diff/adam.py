from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidShape


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None) -> dict:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without a gradient entry are left untouched but the step
    counter still advances.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise InvalidShape(f"gradient for {name} has shape {np.shape(g)}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params

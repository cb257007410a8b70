"""Adam with bias correction; frozen parameters are never touched."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, ParamSet


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamSet, grads: dict[str, np.ndarray]) -> ParamSet:
    missing = [n for n in params if params.is_trainable(n) and n not in grads]
    if missing:
        raise ContractError(f"adam_step: no gradient for trainable parameter(s) {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if not params.is_trainable(name):
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params

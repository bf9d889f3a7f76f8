"""Adam optimizer with bias correction and a step-decay learning rate.

The schedule multiplies the base learning rate by 0.9 every 5 epochs
(configurable), matching the training protocol the pipeline follows.
Optional decoupled weight decay is off by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_factor: float = 0.9
    decay_every: int = 5  # epochs
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at_epoch(state: AdamState, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return state.base_lr * state.decay_factor ** (epoch // state.decay_every)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> dict[str, np.ndarray]:
    """One Adam update; returns new parameter arrays, mutates the moments."""
    if lr is None:
        lr = state.base_lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name].astype(np.float32)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p, dtype=np.float32)
            state.v[name] = np.zeros_like(p, dtype=np.float32)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        out[name] = (p - np.float32(lr) * update).astype(np.float32)
    return out

"""AdamW, global-norm clipping and the router temperature schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numerics import NumericsError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def reset(self, names) -> None:
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)
            self.t.pop(n, None)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0, skip=()) -> None:
    """In-place AdamW update; names in ``skip`` are left untouched (moments too)."""
    for name, p in params.items():
        if name in skip:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise NumericsError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        m_hat = m / (1.0 - BETA1**t)
        v_hat = v / (1.0 - BETA2**t)
        p -= lr * (m_hat / (np.sqrt(v_hat) + EPS) + weight_decay * p)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float = 1.0) -> tuple[dict, float]:
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds it."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def temperature_at(step: int, total_steps: int, start: float = 1.0, end: float = 0.7) -> float:
    """Linear decay from ``start`` at step 0 to ``end`` at ``total_steps``."""
    if total_steps <= 0:
        return start
    if not 0 <= step <= total_steps:
        raise NumericsError(f"step {step} outside [0, {total_steps}]")
    return start + (end - start) * (step / total_steps)

"""Adaptive-moment optimizer with optional update-RMS clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warm-up to ``peak`` over ``warmup`` steps, then ``peak * sqrt(warmup / t)``.

    ``step`` is 0-based.
    """
    t = step + 1
    if warmup <= 0:
        return peak
    if t <= warmup:
        return peak * t / warmup
    return peak * np.sqrt(warmup / t)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam whose per-parameter update is rescaled when its RMS exceeds ``clip``.

    The clip acts on the normalised update before the learning rate, as in
    Adafactor's update clipping.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8,
                 clip: float | None = None, state: AdamState | None = None):
        self.beta1, self.beta2, self.eps, self.clip = beta1, beta2, eps, clip
        self.state = state or AdamState()

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
        """New values for every name in ``grads``; other arrays are untouched."""
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        out = {}
        for name, g in grads.items():
            m = st.m.get(name)
            v = st.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            st.m[name], st.v[name] = m, v
            u = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.clip is not None:
                rms = float(np.sqrt(np.mean(u * u)))
                if rms > self.clip:
                    u = u * (self.clip / rms)
            out[name] = arrays[name] - lr * u
        return out

"""Training objective: cross-entropy plus the two router auxiliary losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from stmoe.errors import ConfigError, DivergenceError
from stmoe.numerics import log_sum_exp
from stmoe.tensor import Tensor, as_tensor


@dataclass
class LossConfig:
    c_b: float = 1e-2
    c_z: float = 1e-3

    def __post_init__(self):
        if self.c_b < 0:
            raise ConfigError("loss.c_b", "must be >= 0")
        if self.c_z < 0:
            raise ConfigError("loss.c_z", "must be >= 0")


def load_balance_loss(probs, argmax_assignments=None, alpha: float = 1e-2) -> Tensor:
    """``alpha * N * sum_i f_i * P_i`` for one group of tokens.

    ``f`` (fraction of tokens whose argmax is expert i) is a constant; ``P``
    (mean router probability per expert) carries the gradient. When
    ``argmax_assignments`` is omitted it is taken from ``probs``.
    """
    probs = as_tensor(probs)
    t, n = probs.shape
    if t < 1:
        raise ValueError("load_balance_loss needs at least one token")
    if argmax_assignments is None:
        argmax_assignments = probs.data.argmax(axis=1)
    f = np.bincount(np.asarray(argmax_assignments, dtype=np.int64), minlength=n) / t
    P = probs.mean(axis=0)
    return (P * f).sum() * (alpha * n)


def router_z_loss(logits) -> Tensor:
    """Mean over tokens of the squared log-sum-exp of the router logits."""
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError(f"router logits must be (tokens>=1, experts), got {logits.shape}")
    lse = log_sum_exp(logits)
    return (lse * lse).mean()


def total_loss(ce, lb, z, config: LossConfig) -> Tensor:
    """``ce + c_b * lb + c_z * z``; raises DivergenceError on a non-finite term.

    ``lb`` is expected to have been computed with ``alpha=1`` so the balance
    coefficient is applied exactly once, here.
    """
    ce, lb, z = as_tensor(ce), as_tensor(lb), as_tensor(z)
    parts = {"ce": float(ce.data), "lb": float(lb.data), "z": float(z.data)}
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite loss component(s): {', '.join(bad)}", parts)
    return ce + lb * config.c_b + z * config.c_z

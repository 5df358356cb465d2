"""Activation, normalization and FFN primitives built on :mod:`stmoe.tensor`.

All functions act on the last axis and accept either Tensors or array-likes.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from stmoe import tensor as T
from stmoe.tensor import Tensor, as_tensor

RMS_EPS = 1e-6


class BiasMode(str, Enum):
    NONE = "none"
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"


def _check_finite(x: Tensor, what: str) -> None:
    bad = ~np.isfinite(x.data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{what}: non-finite input at index {idx if len(idx) > 1 else idx[0]}")


def softmax(v) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[-1] < 1:
        raise ValueError("softmax needs at least one logit")
    _check_finite(v, "softmax")
    return T.softmax_last(v)


def log_softmax(v) -> Tensor:
    v = as_tensor(v)
    _check_finite(v, "log_softmax")
    return T.log_softmax_last(v)


def log_sum_exp(v) -> Tensor:
    """``log(sum(exp(v)))`` over the last axis via the max shift."""
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ValueError("log_sum_exp of an empty vector")
    _check_finite(v, "log_sum_exp")
    return T.logsumexp_last(v)


def gelu(x) -> Tensor:
    """Tanh-approximation GELU (within ~1e-3 of the erf form)."""
    return T.gelu(as_tensor(x))


def rms_norm(x, g=None, use_scale: bool = True) -> Tensor:
    """Divide by the root-mean-square over the last axis, then scale by ``g``.

    ``use_scale=False`` (or ``g=None``) treats the scale as all ones. An epsilon
    of 1e-6 inside the root keeps the all-zero vector finite.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ValueError("rms_norm needs a non-empty last axis")
    ms = (x * x).mean(axis=-1, keepdims=True)
    y = x * (ms + RMS_EPS) ** -0.5
    if use_scale and g is not None:
        g = as_tensor(g)
        if g.shape != (x.shape[-1],):
            raise ValueError(f"rms_norm scale has shape {g.shape}, expected ({x.shape[-1]},)")
        y = y * g
    return y


def _expect(name: str, got: tuple, want: tuple) -> None:
    if got != want:
        raise ValueError(f"{name} has shape {got}, expected {want}")


def geglu_hidden(x, w11, w12) -> Tensor:
    return gelu(as_tensor(x) @ w11) * (as_tensor(x) @ w12)


def ffn_geglu(x, w11, w12, w2, bias_mode: str | BiasMode = BiasMode.NONE, bias=None,
              hidden_hook=None) -> Tensor:
    """Gated GELU feed-forward: ``(GELU(x W11) * x W12 [+|*] B) W2``.

    ``x`` may be a single ``d_model`` vector or a ``(..., d_model)`` batch.
    ``hidden_hook`` is applied to the hidden activation after the bias (used
    for expert dropout).
    """
    x, w11, w12, w2 = (as_tensor(a) for a in (x, w11, w12, w2))
    d_model = x.shape[-1]
    if w11.ndim != 2 or w11.shape[0] != d_model:
        raise ValueError(f"W11 has shape {w11.shape}, expected ({d_model}, d_ff)")
    d_ff = w11.shape[1]
    _expect("W12", w12.shape, (d_model, d_ff))
    _expect("W2", w2.shape, (d_ff, d_model))
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, d_model)
    h = geglu_hidden(x, w11, w12)
    mode = BiasMode(bias_mode)
    if mode is not BiasMode.NONE:
        if bias is None:
            raise ValueError(f"bias_mode={mode.value} needs a bias vector")
        bias = as_tensor(bias)
        _expect("B", bias.shape, (d_ff,))
        h = h + bias if mode is BiasMode.ADDITIVE else h * bias
    if hidden_hook is not None:
        h = hidden_hook(h)
    y = h @ w2
    return y.reshape(d_model) if squeeze else y


def ffn_relu(x, w1, w2, hidden_hook=None) -> Tensor:
    """Dense-ReLU-Dense feed-forward (the GEGLU-removed ablation)."""
    x, w1, w2 = (as_tensor(a) for a in (x, w1, w2))
    d_model = x.shape[-1]
    if w1.ndim != 2 or w1.shape[0] != d_model:
        raise ValueError(f"W1 has shape {w1.shape}, expected ({d_model}, d_ff)")
    _expect("W2", w2.shape, (w1.shape[1], d_model))
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, d_model)
    h = (x @ w1).relu()
    if hidden_hook is not None:
        h = hidden_hook(h)
    y = h @ w2
    return y.reshape(d_model) if squeeze else y


def cross_entropy(logits, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy of integer ``targets`` under ``logits`` (..., V)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} do not match targets {targets.shape}")
    logp = T.log_softmax_last(logits)
    flat = logp.reshape(-1, logits.shape[-1])
    picked = flat[np.arange(targets.size), targets.reshape(-1)]
    if mask is None:
        return -picked.mean()
    w = np.asarray(mask, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total == 0:
        raise ValueError("cross_entropy mask selects no tokens")
    return -(picked * w).sum() * (1.0 / total)

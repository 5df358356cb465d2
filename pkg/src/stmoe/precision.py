"""Bit-accurate emulation of bfloat16 / float32 rounding.

Values are carried in float64 and rounded to a narrower format with
round-to-nearest-even. Subnormals flush to signed zero; values past the
format's largest finite number become signed infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FloatFormat:
    name: str
    mantissa_bits: int
    exponent_bits: int

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def max_finite(self) -> float:
        return (2.0 - 2.0 ** -self.mantissa_bits) * 2.0 ** self.bias

    @property
    def min_normal(self) -> float:
        return 2.0 ** (1 - self.bias)

    def ulp(self, x: float) -> float:
        """Spacing of representable values at ``|x|`` (normal range)."""
        if x == 0:
            return self.min_normal * 2.0 ** -self.mantissa_bits
        _, e = math.frexp(abs(x))
        return 2.0 ** (e - 1 - self.mantissa_bits)


BFLOAT16 = FloatFormat("bfloat16", 7, 8)
FLOAT32 = FloatFormat("float32", 23, 8)
FLOAT64 = FloatFormat("float64", 52, 11)

FORMATS = {f.name: f for f in (BFLOAT16, FLOAT32, FLOAT64)}


def get_format(fmt: FloatFormat | str) -> FloatFormat:
    if isinstance(fmt, FloatFormat):
        return fmt
    try:
        return FORMATS[fmt]
    except KeyError:
        raise ValueError(f"unknown float format {fmt!r}; choose from {sorted(FORMATS)}") from None


def round_array(x, fmt: FloatFormat | str) -> np.ndarray:
    """Round every element of ``x`` to ``fmt`` (vectorised)."""
    fmt = get_format(fmt)
    x = np.asarray(x, dtype=np.float64)
    if fmt is FLOAT64 or fmt.mantissa_bits >= 52:
        return x.copy()
    m, e = np.frexp(x)  # x = m * 2**e, 0.5 <= |m| < 1
    p = fmt.mantissa_bits + 1
    # m * 2**p is exact in float64; rint rounds half to even
    out = np.ldexp(np.rint(np.ldexp(m, p)), e - p)
    with np.errstate(invalid="ignore"):
        out = np.where(np.abs(out) > fmt.max_finite, np.copysign(np.inf, x), out)
        out = np.where(np.abs(out) < fmt.min_normal, np.copysign(0.0, x), out)
    out = np.where(np.isfinite(x), out, x)
    return out


def round_to_format(x: float, fmt: FloatFormat | str) -> float:
    """Round a scalar to ``fmt``; overflow yields a signed infinity."""
    return float(round_array(np.float64(x), fmt))


def overflowed(x: float, fmt: FloatFormat | str) -> bool:
    return math.isfinite(x) and math.isinf(round_to_format(x, fmt))


def softmax_in_format(logits, fmt: FloatFormat | str) -> np.ndarray:
    """Softmax over the last axis with every primitive rounded to ``fmt``.

    Inputs, the max-subtraction, each exponential, each partial sum and each
    division are rounded separately (no fused operations).
    """
    fmt = get_format(fmt)
    r = lambda a: round_array(a, fmt)  # noqa: E731
    x = r(np.asarray(logits, dtype=np.float64))
    shifted = r(x - x.max(axis=-1, keepdims=True))
    e = r(np.exp(shifted))
    total = np.zeros(e.shape[:-1])
    for j in range(e.shape[-1]):
        total = r(total + e[..., j])
    return r(e / total[..., None])


def softmax_exact(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ZLossRangeReport:
    rows: int
    max_abs_logit: float
    max_log_sum_exp: float
    mean_z_loss: float

    def as_dict(self) -> dict:
        return {"rows": self.rows, "max_abs_logit": self.max_abs_logit,
                "max_log_sum_exp": self.max_log_sum_exp, "mean_z_loss": self.mean_z_loss}


def zloss_range_report(logit_stream) -> ZLossRangeReport:
    """Summarise a stream of router logit blocks (each ``(tokens, experts)``)."""
    rows = 0
    max_abs = 0.0
    max_lse = -math.inf
    z_sum = 0.0
    for block in logit_stream:
        block = np.atleast_2d(np.asarray(block, dtype=np.float64))
        if block.size == 0:
            continue
        m = block.max(axis=-1, keepdims=True)
        lse = (m + np.log(np.exp(block - m).sum(axis=-1, keepdims=True)))[:, 0]
        rows += block.shape[0]
        max_abs = max(max_abs, float(np.abs(block).max()))
        max_lse = max(max_lse, float(lse.max()))
        z_sum += float((lse ** 2).sum())
    if rows == 0:
        return ZLossRangeReport(0, 0.0, 0.0, 0.0)
    return ZLossRangeReport(rows, max_abs, max_lse, z_sum / rows)


def anchor_logits() -> np.ndarray:
    """Ten logits of 128 and one of 128.5, the larger one first."""
    return np.array([128.5] + [128.0] * 10)


def precision_demo_rows(logits=None, formats=("float64", "float32", "bfloat16")) -> list[dict]:
    """One row per format: top probability and its change against float64."""
    logits = anchor_logits() if logits is None else np.asarray(logits, dtype=np.float64)
    reference = float(softmax_exact(logits).max())
    rows = []
    for name in formats:
        top = float(softmax_in_format(logits, name).max())
        rows.append({
            "format": name,
            "logits": " ".join(f"{v:g}" for v in logits),
            "top_prob": top,
            "abs_delta": top - reference,
            "rel_delta": (top - reference) / reference,
        })
    return rows

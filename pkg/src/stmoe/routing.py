"""Token routing for sparse expert layers.

The pipeline for one group of tokens is::

    compute_gates -> select_top_n -> expert_capacity -> assign_capacity
                  -> dispatch -> (experts) -> combine

Discrete choices (top-n, threshold sampling, capacity) are made on numpy
arrays; gate weights stay differentiable through :class:`~stmoe.tensor.Tensor`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Iterator, Sequence

import numpy as np

from stmoe import tensor as T
from stmoe.errors import ConfigError
from stmoe.numerics import softmax
from stmoe.precision import FLOAT32, round_array
from stmoe.tensor import Tensor, as_tensor


class DropPolicy(str, Enum):
    LEFT_TO_RIGHT = "left_to_right"
    BPR = "bpr"


class RouterPrecision(str, Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"


@dataclass
class RouterConfig:
    num_experts: int = 4
    top_n: int = 1
    train_cf: float = 1.25
    eval_cf: float = 2.0
    threshold: float = 0.2
    group_size: int = 32
    decoder_group_size: int | None = None
    jitter_eps: float = 0.0
    drop_policy: str = DropPolicy.LEFT_TO_RIGHT.value
    router_precision: str = RouterPrecision.FLOAT64.value
    renormalize_top1: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ConfigError("router.num_experts", "must be >= 1")
        if not 1 <= self.top_n <= self.num_experts:
            raise ConfigError("router.top_n", f"must be in [1, {self.num_experts}], got {self.top_n}")
        if self.train_cf <= 0 or self.eval_cf <= 0:
            raise ConfigError("router.train_cf", "capacity factors must be positive")
        if not 0 < self.threshold <= 1:
            raise ConfigError("router.threshold", f"must be in (0, 1], got {self.threshold}")
        if self.group_size < 1:
            raise ConfigError("router.group_size", "must be >= 1")
        if self.decoder_group_size is not None and self.decoder_group_size < 1:
            raise ConfigError("router.decoder_group_size", "must be >= 1")
        if self.jitter_eps < 0:
            raise ConfigError("router.jitter_eps", "must be non-negative")
        try:
            DropPolicy(self.drop_policy)
        except ValueError:
            raise ConfigError("router.drop_policy", f"unknown policy {self.drop_policy!r}") from None
        try:
            RouterPrecision(self.router_precision)
        except ValueError:
            raise ConfigError("router.router_precision",
                              f"unknown precision {self.router_precision!r}") from None

    def group_for(self, side: str) -> int:
        if side == "decoder" and self.decoder_group_size is not None:
            return self.decoder_group_size
        return self.group_size

    def capacity_factor(self, mode: str) -> float:
        return self.train_cf if mode == "train" else self.eval_cf


# -- gating ---------------------------------------------------------------

def compute_gates(tokens, w_router, jitter_eps: float = 0.0, mode: str = "eval",
                  rng: np.random.Generator | None = None,
                  precision: str = RouterPrecision.FLOAT64.value) -> tuple[Tensor, Tensor]:
    """Router logits ``h(x) = x W_r`` and their softmax, one row per token.

    In train mode with ``jitter_eps > 0`` the router input is multiplied
    elementwise by uniform noise in ``[1 - eps, 1 + eps]``.
    """
    x = as_tensor(tokens)
    w = as_tensor(w_router)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"router input {x.shape} does not conform to W_r {w.shape}")
    if mode == "train" and jitter_eps > 0:
        if rng is None:
            raise ValueError("input jitter needs an rng")
        noise = rng.uniform(1.0 - jitter_eps, 1.0 + jitter_eps, size=x.shape)
        x = x * noise
    logits = x @ w
    if precision == RouterPrecision.FLOAT32.value:
        logits = T.straight_through(logits, lambda a: round_array(a, FLOAT32))
        probs = T.straight_through(softmax(logits), lambda a: round_array(a, FLOAT32))
    else:
        probs = softmax(logits)
    return logits, probs


@dataclass
class Candidates:
    """Per-token top-n proposals before capacity is applied.

    ``experts``/``gates``/``active`` are ``(tokens, top_n)``; rank 0 is the
    argmax expert. ``active`` is False for ranks declined by threshold sampling
    and for masked-out tokens.
    """

    experts: np.ndarray
    gates: np.ndarray
    active: np.ndarray
    num_experts: int
    renormalized: bool

    @property
    def num_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def top_n(self) -> int:
        return self.experts.shape[1]


def _top_n_desc(p: np.ndarray, n: int) -> np.ndarray:
    # stable ordering: higher probability first, lower expert index on ties
    return np.argsort(-p, axis=-1, kind="stable")[:, :n]


def select_top_n(probs, top_n: int, threshold: float = 0.2, mode: str = "eval",
                 rng: np.random.Generator | None = None, token_mask=None,
                 renormalize_top1: bool = False) -> Candidates:
    """Pick each token's top-n experts with threshold sampling for ranks 2..n.

    Top-1 keeps the raw softmax probability as the gate unless
    ``renormalize_top1``; top-n >= 2 renormalises over the top-n set. In train
    mode rank >= 2 survives with probability ``min(1, gate / threshold)``; in eval
    mode it always survives.
    """
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"probs must be (tokens, experts), got {p.shape}")
    t, n_exp = p.shape
    if not 1 <= top_n <= n_exp:
        raise ValueError(f"top_n={top_n} is outside [1, {n_exp}]")
    experts = _top_n_desc(p, top_n)
    raw = np.take_along_axis(p, experts, axis=1)
    renorm = top_n > 1 or renormalize_top1
    gates = raw / raw.sum(axis=1, keepdims=True) if renorm else raw
    active = np.ones((t, top_n), dtype=bool)
    if top_n > 1:
        if mode == "train":
            if rng is None:
                raise ValueError("threshold sampling needs an rng in train mode")
            keep_prob = np.minimum(1.0, gates[:, 1:] / threshold)
            draws = rng.random(size=keep_prob.shape)
            active[:, 1:] = draws < keep_prob
    if token_mask is not None:
        active &= np.asarray(token_mask, dtype=bool)[:, None]
    return Candidates(experts, gates, active, n_exp, renorm)


def differentiable_gates(probs: Tensor, cand: Candidates) -> Tensor:
    """Gate weights as a Tensor with the same values as ``cand.gates``."""
    probs = as_tensor(probs)
    rows = np.arange(cand.num_tokens)[:, None]
    picked = probs[rows, cand.experts]
    if cand.renormalized:
        return picked / picked.sum(axis=1, keepdims=True)
    return picked


# -- capacity -------------------------------------------------------------

def expert_capacity(group_size: int, num_experts: int, cf: float) -> int:
    """``ceil(cf * group_size / num_experts)`` clamped to ``[1, group_size]``."""
    if group_size < 1 or num_experts < 1 or cf <= 0:
        raise ValueError("group_size, num_experts and cf must be positive")
    # guard against float noise such as 1.25 * 8 / 4 = 2.5000000000000004
    raw = cf * group_size / num_experts
    cap = math.ceil(round(raw, 9))
    return max(1, min(group_size, cap))


@dataclass
class RoutingDecision:
    """Outcome of routing one group.

    Arrays are ``(tokens, top_n)``: ``experts``, ``gates``, ``candidate`` (the
    assignment was proposed), ``kept`` (it survived capacity), ``slots`` (slot
    index within the expert buffer, -1 unless kept).
    """

    experts: np.ndarray
    gates: np.ndarray
    candidate: np.ndarray
    kept: np.ndarray
    slots: np.ndarray
    capacity: int
    num_experts: int
    policy: str = DropPolicy.LEFT_TO_RIGHT.value

    @property
    def num_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def dropped(self) -> np.ndarray:
        return self.candidate & ~self.kept

    def expert_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_experts, dtype=np.int64)
        np.add.at(counts, self.experts[self.kept], 1)
        return counts

    def token_assignments(self, t: int) -> list[tuple[int, float, bool, int]]:
        """Ordered (expert, gate, kept, slot) list for token ``t``."""
        return [(int(self.experts[t, r]), float(self.gates[t, r]), bool(self.kept[t, r]),
                 int(self.slots[t, r]))
                for r in range(self.experts.shape[1]) if self.candidate[t, r]]

    def validate(self) -> None:
        for e in range(self.num_experts):
            sel = self.kept & (self.experts == e)
            s = self.slots[sel]
            if s.size > self.capacity:
                raise AssertionError(f"expert {e} holds {s.size} > capacity {self.capacity}")
            if s.size and (s.min() < 0 or s.max() >= self.capacity or np.unique(s).size != s.size):
                raise AssertionError(f"expert {e} has invalid slot indices {s.tolist()}")
        if np.any(self.kept & ~self.candidate):
            raise AssertionError("kept assignment that was never a candidate")
        if np.any(self.gates[self.kept] <= 0):
            raise AssertionError("kept assignment with non-positive gate")

    def dispatch_mask(self) -> np.ndarray:
        """One-hot ``(experts, capacity, tokens)`` placement array."""
        d = np.zeros((self.num_experts, self.capacity, self.num_tokens))
        t_idx, r_idx = np.nonzero(self.kept)
        e_idx = self.experts[t_idx, r_idx]
        s_idx = self.slots[t_idx, r_idx]
        if np.any(np.bincount(e_idx * self.capacity + s_idx) > 1):
            raise AssertionError("two tokens share one expert slot")
        d[e_idx, s_idx, t_idx] = 1.0
        return d


def assign_capacity(cand: Candidates, capacity: int,
                    drop_policy: str = DropPolicy.LEFT_TO_RIGHT.value) -> RoutingDecision:
    """Fill each expert's ``capacity`` slots and flag the overflow as dropped.

    ``left_to_right`` takes candidates in token-position order (ranks of one
    token in rank order), so a token's fate depends only on earlier tokens.
    ``bpr`` keeps each expert's highest-gate candidates, lower position first
    on ties.
    """
    policy = DropPolicy(drop_policy)
    t, n = cand.experts.shape
    kept = np.zeros((t, n), dtype=bool)
    slots = np.full((t, n), -1, dtype=np.int64)
    flat_active = cand.active.reshape(-1)
    flat_exp = cand.experts.reshape(-1)
    flat_gate = cand.gates.reshape(-1)
    order = np.flatnonzero(flat_active)  # position-major, then rank
    for e in range(cand.num_experts):
        idx = order[flat_exp[order] == e]
        if policy is DropPolicy.BPR:
            # idx is position-ascending; a stable sort keeps that as the tie-break
            idx = idx[np.argsort(-flat_gate[idx], kind="stable")]
        take = idx[:capacity]
        kept.reshape(-1)[take] = True
        slots.reshape(-1)[take] = np.arange(take.size)
    return RoutingDecision(cand.experts.copy(), cand.gates.copy(), cand.active.copy(),
                           kept, slots, capacity, cand.num_experts, policy.value)


# -- dispatch / combine ---------------------------------------------------

def dispatch(tokens, decision: RoutingDecision) -> Tensor:
    """Gather kept tokens into ``(experts, capacity, d_model)``; empty slots are 0."""
    x = as_tensor(tokens)
    if x.ndim != 2 or x.shape[0] != decision.num_tokens:
        raise ValueError(f"tokens {x.shape} do not match a decision over {decision.num_tokens} tokens")
    return Tensor(decision.dispatch_mask()) @ x


def combine_weights(decision: RoutingDecision, gates: Tensor | None = None) -> Tensor:
    """``(tokens, experts)`` matrix of gate weight for each kept assignment."""
    t, n = decision.experts.shape
    if gates is None:
        gates = Tensor(decision.gates)
    onehot = np.zeros((t, n, decision.num_experts))
    rows, ranks = np.nonzero(decision.kept)
    onehot[rows, ranks, decision.experts[rows, ranks]] = 1.0
    # (t, n, 1) * (t, n, E) summed over ranks
    return (gates.reshape(t, n, 1) * Tensor(onehot)).sum(axis=1)


def combine(expert_outputs, decision: RoutingDecision, layer_input=None,
            gates: Tensor | None = None) -> Tensor:
    """Gate-weighted sum of each token's kept expert outputs.

    Tokens with no kept assignment get a zero row; the enclosing residual
    connection carries them forward.
    """
    out = as_tensor(expert_outputs)
    e, c = decision.num_experts, decision.capacity
    if out.ndim != 3 or out.shape[:2] != (e, c):
        raise ValueError(f"expert outputs {out.shape} do not match ({e}, {c}, d_model)")
    if layer_input is not None and as_tensor(layer_input).shape != (decision.num_tokens, out.shape[2]):
        raise ValueError(f"layer input {as_tensor(layer_input).shape} does not match "
                         f"({decision.num_tokens}, {out.shape[2]})")
    mask = decision.dispatch_mask()                      # (E, C, T)
    w = combine_weights(decision, gates)                 # (T, E)
    per_slot = Tensor(mask) * w.transpose().reshape(e, 1, decision.num_tokens)
    return (per_slot.transpose(0, 2, 1) @ out).sum(axis=0)


def split_groups(batch, group_size: int) -> list:
    """Contiguous, order-preserving partition of the leading axis."""
    n = len(batch)
    if group_size < 1 or n % group_size:
        raise ValueError(f"batch of {n} tokens is not divisible by group size {group_size}")
    return [batch[i:i + group_size] for i in range(0, n, group_size)]


# -- statistics -----------------------------------------------------------

def entropy(counts) -> float:
    """Natural-log entropy of the empirical distribution given by ``counts``."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total == 0:
        return 0.0
    q = c[c > 0] / total
    return float(max(0.0, -(q * np.log(q)).sum()))


@dataclass
class RoutingStats:
    drop_fraction: float
    f: np.ndarray
    P: np.ndarray
    class_entropy: float | None = None
    num_candidates: int = 0
    num_dropped: int = 0


def routing_stats(decision: RoutingDecision, probs, token_mask=None,
                  class_mask=None) -> RoutingStats:
    """Drop fraction, argmax fractions ``f``, mean probabilities ``P``.

    ``class_entropy`` is the entropy of the top-1 routed expert over tokens in
    ``class_mask`` (e.g. sentinel tokens), or over all tokens if omitted.
    """
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    valid = np.ones(p.shape[0], dtype=bool) if token_mask is None else np.asarray(token_mask, bool)
    pv = p[valid]
    n_exp = p.shape[1]
    if pv.shape[0]:
        f = np.bincount(pv.argmax(axis=1), minlength=n_exp) / pv.shape[0]
        P = pv.mean(axis=0)
    else:
        f = np.zeros(n_exp)
        P = np.zeros(n_exp)
    n_cand = int(decision.candidate.sum())
    n_drop = int(decision.dropped.sum())
    cls = valid if class_mask is None else valid & np.asarray(class_mask, bool)
    top1 = decision.experts[cls, 0]
    ent = entropy(np.bincount(top1, minlength=n_exp)) if top1.size else None
    return RoutingStats(n_drop / n_cand if n_cand else 0.0, f, P, ent, n_cand, n_drop)


# -- trace serialization -------------------------------------------------

@dataclass
class TraceRecord:
    layer: str
    position: int
    token_id: int
    expert: int
    gate: float
    kept: bool
    sequence: int = 0
    rank: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def trace_records(layer: str, decision: RoutingDecision, token_ids: Sequence[int],
                  positions: Sequence[int], sequences: Sequence[int] | None = None
                  ) -> Iterator[TraceRecord]:
    for t in range(decision.num_tokens):
        for r in range(decision.experts.shape[1]):
            if not decision.candidate[t, r]:
                continue
            yield TraceRecord(layer, int(positions[t]), int(token_ids[t]),
                              int(decision.experts[t, r]), float(decision.gates[t, r]),
                              bool(decision.kept[t, r]),
                              int(sequences[t]) if sequences is not None else 0, r)


def write_trace(path, records: Iterable[TraceRecord]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    return n


def read_trace(path) -> list[TraceRecord]:
    with open(path) as fh:
        return [TraceRecord(**json.loads(line)) for line in fh if line.strip()]

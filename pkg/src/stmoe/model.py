"""Toy encoder-decoder Transformer with sparse expert FFN layers.

Each sublayer is ``x + dropout(layer(rms_norm(x)))``. Every ``round(1/freq)``-th
FFN (the last of each block) is a mixture-of-experts layer; with
``sparse_dense`` an extra dense FFN sits next to each sparse one.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from stmoe import tensor as T
from stmoe.errors import ConfigError
from stmoe.losses import load_balance_loss, router_z_loss
from stmoe.numerics import cross_entropy, ffn_geglu, ffn_relu, rms_norm
from stmoe.routing import (Candidates, DropPolicy, RouterConfig, RoutingDecision, assign_capacity,
                           combine, compute_gates, differentiable_gates, dispatch,
                           expert_capacity, select_top_n)
from stmoe.tensor import Tensor

log = logging.getLogger(__name__)

INIT_SCALE = 0.1
NEG_INF = -1e9


@dataclass
class ModelConfig:
    num_layers: int = 2
    d_model: int = 16
    d_ff: int = 32
    d_kv: int = 8
    num_heads: int = 2
    num_experts: int = 4
    expert_layer_freq: float = 0.5
    sparse_dense: bool = False
    dense_placement: str = "after"
    ffn_kind: str = "geglu"
    rms_scale: bool = True
    bias_mode: str = "none"
    dropout: float = 0.0
    expert_dropout: float = 0.0
    vocab_size: int = 64
    max_seq_len: int = 64
    router: RouterConfig = field(default_factory=RouterConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.expert_layer_freq, str):
            self.expert_layer_freq = float(Fraction(self.expert_layer_freq))
        if isinstance(self.router, dict):
            self.router = RouterConfig(**self.router)
        self.validate()

    def validate(self) -> None:
        for key in ("num_layers", "d_model", "d_ff", "d_kv", "num_heads", "vocab_size", "max_seq_len"):
            if getattr(self, key) < 1:
                raise ConfigError(f"model.{key}", "must be positive")
        if not 0 < self.expert_layer_freq <= 1:
            raise ConfigError("model.expert_layer_freq", "must be in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.dropout", "must be in [0, 1)")
        if not 0 <= self.expert_dropout < 1:
            raise ConfigError("model.expert_dropout", "must be in [0, 1)")
        if self.ffn_kind not in ("geglu", "relu"):
            raise ConfigError("model.ffn_kind", f"expected geglu or relu, got {self.ffn_kind!r}")
        if self.bias_mode not in ("none", "additive", "multiplicative"):
            raise ConfigError("model.bias_mode", f"unknown bias mode {self.bias_mode!r}")
        if self.dense_placement not in ("after", "before", "elsewhere"):
            raise ConfigError("model.dense_placement", f"unknown placement {self.dense_placement!r}")
        if self.router.num_experts != self.num_experts:
            self.router.num_experts = self.num_experts
            self.router.validate()

    @property
    def block(self) -> int:
        return max(1, round(1 / self.expert_layer_freq))

    @property
    def hidden(self) -> int:
        """Hidden width of an FFN; ReLU gets 1.5x to match GEGLU parameters and FLOPs."""
        return self.d_ff if self.ffn_kind == "geglu" else (3 * self.d_ff) // 2

    def num_moe_layers(self) -> int:
        return sum(1 for s in stack_layers(self) if s.kind == "moe")


# -- layer plan -----------------------------------------------------------

@dataclass(frozen=True)
class SublayerSpec:
    side: str
    layer: int
    kind: str  # self_attn | cross_attn | ffn | moe
    name: str

    def __str__(self) -> str:
        return f"{self.name}: {self.kind}"


def sparse_slots(num_ffn: int, freq: float) -> list[int]:
    """0-indexed FFN slots replaced by expert layers (last of each block)."""
    k = max(1, round(1 / freq))
    return [i for i in range(num_ffn) if (i + 1) % k == 0]


def stack_layers(config: ModelConfig) -> list[SublayerSpec]:
    """Ordered sublayer plan for the encoder then the decoder."""
    plan: list[SublayerSpec] = []
    k = config.block
    for side, prefix in (("encoder", "enc"), ("decoder", "dec")):
        sparse = set(sparse_slots(config.num_layers, config.expert_layer_freq))
        extras_at: dict[int, str] = {}
        if config.sparse_dense:
            for s in sparse:
                if config.dense_placement == "elsewhere" and k > 1:
                    extras_at[s - k + 1] = "after"
                else:
                    extras_at[s] = "before" if config.dense_placement == "before" else "after"
        for i in range(config.num_layers):
            p = f"{prefix}.{i}"
            if side == "encoder":
                plan.append(SublayerSpec(side, i, "self_attn", f"{p}.attn"))
            else:
                plan.append(SublayerSpec(side, i, "self_attn", f"{p}.self_attn"))
                plan.append(SublayerSpec(side, i, "cross_attn", f"{p}.cross_attn"))
            main = SublayerSpec(side, i, "moe" if i in sparse else "ffn",
                                f"{p}.moe" if i in sparse else f"{p}.ffn")
            extra = SublayerSpec(side, i, "ffn", f"{p}.ffn_extra")
            where = extras_at.get(i)
            if where == "before":
                plan.extend([extra, main])
            elif where == "after":
                plan.extend([main, extra])
            else:
                plan.append(main)
    return plan


def format_plan(plan: list[SublayerSpec]) -> str:
    return "\n".join(f"{i:3d}  {s}" for i, s in enumerate(plan))


def sublayer_flops(config: ModelConfig, kind: str, enc_len: int = 1) -> dict[str, float]:
    """Matmul FLOPs per token (2 per multiply-accumulate) of one sublayer."""
    d, h = config.d_model, config.hidden
    ffn = 2.0 * (3 * d * h if config.ffn_kind == "geglu" else 2 * d * h)
    inner = config.num_heads * config.d_kv
    if kind in ("self_attn", "cross_attn"):
        return {"matmul": 2.0 * 4 * d * inner + 2.0 * 2 * inner * enc_len}
    if kind == "ffn":
        return {"matmul": ffn}
    if kind == "moe":
        return {"matmul": ffn * config.router.top_n,
                "router": 2.0 * d * config.num_experts}
    raise ValueError(f"unknown sublayer kind {kind!r}")


def plan_flops(config: ModelConfig, plan: list[SublayerSpec] | None = None) -> float:
    """Per-token matmul FLOPs summed over the plan (router FLOPs excluded)."""
    plan = stack_layers(config) if plan is None else plan
    return sum(sublayer_flops(config, s.kind)["matmul"] for s in plan)


# -- parameters -----------------------------------------------------------

class Params:
    """Named parameter tensors plus a group tag for each.

    Groups: embedding, attention, ffn, moe (experts + routers), norm.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.tensors: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, group: str) -> None:
        self.tensors[name] = T.parameter(value, name=name)
        self.groups[name] = group

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def replace(self, arrays: dict[str, np.ndarray]) -> "Params":
        """New Params with the same layout and the given values."""
        out = Params(self.config)
        for name in self.tensors:
            out.add(name, arrays[name] if name in arrays else self.tensors[name].data,
                    self.groups[name])
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # per-name streams: adding or removing one tensor never shifts another's init
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def _weight(seed: int, name: str, shape: tuple[int, int], fan_in: int | None = None) -> np.ndarray:
    fan_in = shape[0] if fan_in is None else fan_in
    return truncated_normal(_param_rng(seed, name), shape, np.sqrt(INIT_SCALE / fan_in))


def _add_ffn(params: Params, seed: int, prefix: str, cfg: ModelConfig, group: str) -> None:
    d, h = cfg.d_model, cfg.hidden
    if cfg.ffn_kind == "geglu":
        params.add(f"{prefix}.w11", _weight(seed, f"{prefix}.w11", (d, h)), group)
        params.add(f"{prefix}.w12", _weight(seed, f"{prefix}.w12", (d, h)), group)
    else:
        params.add(f"{prefix}.w1", _weight(seed, f"{prefix}.w1", (d, h)), group)
    params.add(f"{prefix}.w2", _weight(seed, f"{prefix}.w2", (h, d)), group)
    if cfg.bias_mode == "additive":
        params.add(f"{prefix}.bias", np.zeros(h), group)
    elif cfg.bias_mode == "multiplicative":
        params.add(f"{prefix}.bias", np.ones(h), group)


def build_model(config: ModelConfig, seed: int | None = None) -> Params:
    """Initialise all weights from a truncated normal with std ``sqrt(0.1 / fan_in)``."""
    seed = config.seed if seed is None else seed
    cfg = config
    d, inner = cfg.d_model, cfg.num_heads * cfg.d_kv
    params = Params(cfg)
    params.add("embed", _weight(seed, "embed", (cfg.vocab_size, d), fan_in=d), "embedding")
    params.add("enc.pos", _weight(seed, "enc.pos", (cfg.max_seq_len, d), fan_in=d), "embedding")
    params.add("dec.pos", _weight(seed, "dec.pos", (cfg.max_seq_len, d), fan_in=d), "embedding")
    for spec in stack_layers(cfg):
        p = spec.name
        if cfg.rms_scale:
            params.add(f"{p}.norm", np.ones(d), "norm")
        if spec.kind in ("self_attn", "cross_attn"):
            for w in ("q", "k", "v"):
                params.add(f"{p}.{w}", _weight(seed, f"{p}.{w}", (d, inner)), "attention")
            params.add(f"{p}.o", _weight(seed, f"{p}.o", (inner, d)), "attention")
        elif spec.kind == "ffn":
            _add_ffn(params, seed, p, cfg, "ffn")
        else:
            params.add(f"{p}.router", _weight(seed, f"{p}.router", (d, cfg.num_experts)), "moe")
            for e in range(cfg.num_experts):
                _add_ffn(params, seed, f"{p}.expert{e}", cfg, "moe")
    for side in ("enc", "dec"):
        if cfg.rms_scale:
            params.add(f"{side}.final_norm", np.ones(d), "norm")
    params.add("lm_head", _weight(seed, "lm_head", (d, cfg.vocab_size)), "embedding")
    log.info("built model with %d parameters", params.count())
    return params


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of :func:`build_model`."""
    d, h, inner, n_exp = cfg.d_model, cfg.hidden, cfg.num_heads * cfg.d_kv, cfg.num_experts
    ffn = (3 if cfg.ffn_kind == "geglu" else 2) * d * h + (h if cfg.bias_mode != "none" else 0)
    attn = 4 * d * inner
    norm = d if cfg.rms_scale else 0
    moe_count = len(sparse_slots(cfg.num_layers, cfg.expert_layer_freq))
    extra = moe_count if cfg.sparse_dense else 0
    per_side_ffn = (cfg.num_layers - moe_count + extra) * (ffn + norm) \
        + moe_count * (d * n_exp + n_exp * ffn + norm)
    enc = cfg.num_layers * (attn + norm) + per_side_ffn + norm
    dec = cfg.num_layers * 2 * (attn + norm) + per_side_ffn + norm
    return (cfg.vocab_size * d + 2 * cfg.max_seq_len * d + d * cfg.vocab_size) + enc + dec


TRAINABLE_SUBSETS = ("all", "non_moe", "moe", "attention", "ffn")


def subset_names(params: Params, subset: str) -> list[str]:
    if subset not in TRAINABLE_SUBSETS:
        raise ConfigError("train.trainable_subset", f"expected one of {TRAINABLE_SUBSETS}")
    g = params.groups
    if subset == "all":
        return params.names()
    if subset == "non_moe":
        return [n for n in params.names() if g[n] != "moe"]
    return [n for n in params.names() if g[n] == subset]


# -- forward pieces -------------------------------------------------------

def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity outside train mode or at rate 0."""
    if mode != "train" or rate <= 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def sublayer(x: Tensor, layer: Callable[[Tensor], Tensor], g: Tensor | None = None,
             rate: float = 0.0, mode: str = "eval", rng=None) -> Tensor:
    """``x + dropout(layer(rms_norm(x, g)))``."""
    return x + dropout(layer(rms_norm(x, g, use_scale=g is not None)), rate, mode, rng)


def attention(x: Tensor, kv: Tensor, params: Params, prefix: str, cfg: ModelConfig,
              mask: np.ndarray) -> Tensor:
    """Multi-head scaled dot-product attention; ``mask`` is (B, Sq, Sk) boolean."""
    b, sq, _ = x.shape
    sk = kv.shape[1]
    h, dk = cfg.num_heads, cfg.d_kv

    def heads(t: Tensor, s: int) -> Tensor:
        return t.reshape(b, s, h, dk).transpose(0, 2, 1, 3)

    q = heads(x @ params[f"{prefix}.q"], sq)
    k = heads(kv @ params[f"{prefix}.k"], sk)
    v = heads(kv @ params[f"{prefix}.v"], sk)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
    bias = np.where(mask[:, None, :, :], 0.0, NEG_INF)
    weights = T.softmax_last(scores + bias)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, sq, h * dk)
    return ctx @ params[f"{prefix}.o"]


def _ffn_call(params: Params, prefix: str, cfg: ModelConfig, x: Tensor, hook=None) -> Tensor:
    if cfg.ffn_kind == "geglu":
        bias = params[f"{prefix}.bias"] if cfg.bias_mode != "none" else None
        return ffn_geglu(x, params[f"{prefix}.w11"], params[f"{prefix}.w12"],
                         params[f"{prefix}.w2"], cfg.bias_mode, bias, hidden_hook=hook)
    return ffn_relu(x, params[f"{prefix}.w1"], params[f"{prefix}.w2"], hidden_hook=hook)


@dataclass
class MoeGroupRecord:
    logits: Tensor        # valid tokens only
    probs: Tensor         # valid tokens only
    decision: RoutingDecision
    token_mask: np.ndarray
    token_ids: np.ndarray
    positions: np.ndarray
    sequences: np.ndarray


@dataclass
class MoeLayerRecord:
    name: str
    side: str
    groups: list[MoeGroupRecord] = field(default_factory=list)


@dataclass
class MoeOutput:
    y: Tensor
    logits: Tensor
    probs: Tensor
    decision: RoutingDecision
    candidates: Candidates


def moe_layer(x_group: Tensor, router_w: Tensor, experts: list[Callable[..., Tensor]],
              router: RouterConfig, mode: str = "eval", rng: np.random.Generator | None = None,
              token_mask: np.ndarray | None = None, side: str = "encoder",
              expert_dropout: float = 0.0) -> MoeOutput:
    """Route one group through its experts and combine the results.

    ``experts[e](x, hook)`` computes expert ``e`` on its slot batch; ``hook`` is
    applied to the expert hidden activation (expert dropout in train mode).
    Tokens outside ``token_mask`` (padding) are never routed.
    """
    policy = DropPolicy(router.drop_policy)
    if side == "decoder" and policy is DropPolicy.BPR:
        raise ConfigError("router.drop_policy",
                          "bpr reads future tokens and is refused on decoder layers")
    t = x_group.shape[0]
    if len(experts) != router.num_experts:
        raise ValueError(f"{len(experts)} experts for a router over {router.num_experts}")
    logits, probs = compute_gates(x_group, router_w, router.jitter_eps, mode, rng,
                                  router.router_precision)
    cand = select_top_n(probs, router.top_n, router.threshold, mode, rng, token_mask,
                        router.renormalize_top1)
    cap = expert_capacity(t, router.num_experts, router.capacity_factor(mode))
    decision = assign_capacity(cand, cap, policy.value)
    slots = dispatch(x_group, decision)
    counts = decision.expert_counts()
    hook = None
    if mode == "train" and expert_dropout > 0:
        hook = lambda h: dropout(h, expert_dropout, mode, rng)  # noqa: E731
    outs = []
    d = x_group.shape[1]
    for e, fn in enumerate(experts):
        c = int(counts[e])
        if c == 0:
            outs.append(Tensor(np.zeros((cap, d))))
            continue
        y_e = fn(slots[e, :c], hook)
        if c < cap:
            y_e = T.concat([y_e, Tensor(np.zeros((cap - c, d)))], axis=0)
        outs.append(y_e)
    gates = differentiable_gates(probs, cand)
    y = combine(T.stack(outs, axis=0), decision, x_group, gates=gates)
    return MoeOutput(y, logits, probs, decision, cand)


def _causal_mask(b: int, s: int, key_mask: np.ndarray) -> np.ndarray:
    causal = np.tril(np.ones((s, s), dtype=bool))
    return causal[None, :, :] & key_mask[:, None, :]


@dataclass
class ForwardAux:
    moe_layers: list[MoeLayerRecord] = field(default_factory=list)


class Forward:
    """One forward pass over a batch; holds the rng and collects routing records."""

    def __init__(self, params: Params, mode: str, rng: np.random.Generator | None):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        self.params = params
        self.cfg = params.config
        self.mode = mode
        self.rng = rng
        self.aux = ForwardAux()

    def _norm(self, name: str) -> Tensor | None:
        return self.params[f"{name}.norm"] if self.cfg.rms_scale else None

    def _sub(self, x: Tensor, name: str, fn) -> Tensor:
        return sublayer(x, fn, self._norm(name), self.cfg.dropout, self.mode, self.rng)

    def _moe(self, x: Tensor, spec: SublayerSpec, token_ids: np.ndarray, mask: np.ndarray) -> Tensor:
        cfg, p = self.cfg, self.params
        b, s, d = x.shape
        router = cfg.router
        if spec.side == "decoder" and router.drop_policy == DropPolicy.BPR.value:
            router = RouterConfig(**{**router.__dict__, "drop_policy": DropPolicy.LEFT_TO_RIGHT.value})
        total = b * s
        # a batch smaller than one group forms a single group
        group = min(router.group_for(spec.side), total)
        if total % group:
            key = "router.decoder_group_size" if spec.side == "decoder" else "router.group_size"
            raise ConfigError(key,
                              f"{spec.side} has {total} tokens, not divisible by group size {group}")
        flat = x.reshape(total, d)
        flat_mask = mask.reshape(-1)
        flat_ids = token_ids.reshape(-1)
        positions = np.tile(np.arange(s), b)
        sequences = np.repeat(np.arange(b), s)
        experts = [
            (lambda z, hook, _e=e: _ffn_call(p, f"{spec.name}.expert{_e}", cfg, z, hook))
            for e in range(cfg.num_experts)
        ]
        record = MoeLayerRecord(spec.name, spec.side)
        outs = []
        for start in range(0, total, group):
            sl = slice(start, start + group)
            out = moe_layer(flat[sl], p[f"{spec.name}.router"], experts, router, self.mode,
                            self.rng, flat_mask[sl], spec.side, cfg.expert_dropout)
            valid = np.flatnonzero(flat_mask[sl])
            record.groups.append(MoeGroupRecord(
                out.logits[valid], out.probs[valid], out.decision, flat_mask[sl].copy(),
                flat_ids[sl], positions[sl], sequences[sl]))
            outs.append(out.y)
        self.aux.moe_layers.append(record)
        y = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
        return y.reshape(b, s, d)

    def _stack(self, side: str, x: Tensor, token_ids: np.ndarray, mask: np.ndarray,
               self_mask: np.ndarray, enc: Tensor | None = None,
               cross_mask: np.ndarray | None = None) -> Tensor:
        cfg, p = self.cfg, self.params
        for spec in stack_layers(cfg):
            if spec.side != side:
                continue
            if spec.kind == "self_attn":
                x = self._sub(x, spec.name,
                              lambda z, _n=spec.name: attention(z, z, p, _n, cfg, self_mask))
            elif spec.kind == "cross_attn":
                x = self._sub(x, spec.name,
                              lambda z, _n=spec.name: attention(z, enc, p, _n, cfg, cross_mask))
            elif spec.kind == "ffn":
                x = self._sub(x, spec.name, lambda z, _n=spec.name: _ffn_call(p, _n, cfg, z))
            else:
                x = self._sub(x, spec.name,
                              lambda z, _s=spec: self._moe(z, _s, token_ids, mask))
        final = p[f"{side[:3]}.final_norm"] if cfg.rms_scale else None
        return rms_norm(x, final, use_scale=final is not None)

    def _embed(self, ids: np.ndarray, pos_name: str) -> Tensor:
        p = self.params
        s = ids.shape[1]
        if s > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {s} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.max(initial=0) >= self.cfg.vocab_size or ids.min(initial=0) < 0:
            raise ValueError("token id outside the vocabulary")
        x = p["embed"][ids] + p[pos_name][np.arange(s)]
        return dropout(x, self.cfg.dropout, self.mode, self.rng)

    def run(self, batch) -> Tensor:
        inputs = np.asarray(batch.inputs)
        in_mask = np.asarray(batch.input_mask, dtype=bool)
        dec_in = np.asarray(batch.decoder_inputs)
        dec_mask = np.asarray(batch.target_mask, dtype=bool)
        b, s_in = inputs.shape
        s_out = dec_in.shape[1]
        enc_self = np.broadcast_to(in_mask[:, None, :], (b, s_in, s_in))
        enc = self._stack("encoder", self._embed(inputs, "enc.pos"), inputs, in_mask, enc_self)
        # decoder position 0 (BOS) is always a valid key
        dec_keys = dec_mask.copy()
        dec_keys[:, 0] = True
        dec_self = _causal_mask(b, s_out, dec_keys)
        cross = np.broadcast_to(in_mask[:, None, :], (b, s_out, s_in))
        dec = self._stack("decoder", self._embed(dec_in, "dec.pos"), dec_in, dec_mask,
                          dec_self, enc, cross)
        return dec @ self.params["lm_head"]


def forward_span_corruption(params: Params, batch, mode: str = "eval",
                            rng: np.random.Generator | None = None) -> tuple[Tensor, ForwardAux]:
    """Vocabulary logits for every decoder position, plus the routing records."""
    fwd = Forward(params, mode, rng)
    logits = fwd.run(batch)
    return logits, fwd.aux


def auxiliary_losses(aux: ForwardAux) -> tuple[Tensor, Tensor]:
    """Load-balance (alpha = 1) and router z-loss, averaged over groups then layers."""
    lbs, zs = [], []
    for layer in aux.moe_layers:
        lb_g, z_g = [], []
        for g in layer.groups:
            if g.probs.shape[0] == 0:
                continue
            lb_g.append(load_balance_loss(g.probs, alpha=1.0))
            z_g.append(router_z_loss(g.logits))
        if lb_g:
            lbs.append(T.stack(lb_g).mean())
            zs.append(T.stack(z_g).mean())
    if not lbs:
        return Tensor(0.0), Tensor(0.0)
    return T.stack(lbs).mean(), T.stack(zs).mean()


def lm_loss(params: Params, batch, mode: str = "eval", rng=None):
    """Cross-entropy on target tokens plus the auxiliary terms and routing records."""
    logits, aux = forward_span_corruption(params, batch, mode, rng)
    ce = cross_entropy(logits, batch.targets, batch.target_mask)
    lb, z = auxiliary_losses(aux)
    return ce, lb, z, logits, aux


def drop_fraction(aux: ForwardAux) -> float:
    cand = sum(int(g.decision.candidate.sum()) for l in aux.moe_layers for g in l.groups)
    drop = sum(int(g.decision.dropped.sum()) for l in aux.moe_layers for g in l.groups)
    return drop / cand if cand else 0.0


def max_router_logit(aux: ForwardAux) -> float:
    vals = [float(np.abs(g.logits.data).max()) for l in aux.moe_layers for g in l.groups
            if g.logits.size]
    return max(vals) if vals else 0.0

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmoe import tensor as T
from stmoe.data import SynthCorpus, Vocab, span_batch
from stmoe.errors import ConfigError
from stmoe.model import (ModelConfig, build_model, drop_fraction, expected_param_count,
                         forward_span_corruption, lm_loss, moe_layer, plan_flops, sparse_slots,
                         stack_layers, sublayer_flops, subset_names)
from stmoe.routing import RouterConfig
from stmoe.tensor import Tensor

from oracles import numeric_grad, rel_err

VOCAB = Vocab(32, 4)


def small_cfg(**kw) -> ModelConfig:
    router = kw.pop("router", RouterConfig(decoder_group_size=16))
    return ModelConfig(vocab_size=VOCAB.size, router=router, **kw)


def batch(seed=0, b=2, s=16):
    corpus = SynthCorpus(VOCAB, seed=1)
    return span_batch(corpus, b, s, np.random.default_rng(seed))


# -- config and plan -----------------------------------------------------

def test_config_validation_names_key():
    with pytest.raises(ConfigError) as exc:
        ModelConfig(ffn_kind="swish")
    assert exc.value.key == "model.ffn_kind"
    assert ModelConfig(expert_layer_freq="1/4").expert_layer_freq == 0.25
    assert ModelConfig(num_experts=8).router.num_experts == 8


def test_sparse_slots_last_of_block():
    assert sparse_slots(4, 0.5) == [1, 3]
    assert sparse_slots(4, 0.25) == [3]
    assert sparse_slots(3, 1.0) == [0, 1, 2]


def test_plan_for_default_config():
    names = [s.name for s in stack_layers(ModelConfig())]
    assert names == ["enc.0.attn", "enc.0.ffn", "enc.1.attn", "enc.1.moe",
                     "dec.0.self_attn", "dec.0.cross_attn", "dec.0.ffn",
                     "dec.1.self_attn", "dec.1.cross_attn", "dec.1.moe"]


@pytest.mark.parametrize("placement,order", [("after", ["enc.1.moe", "enc.1.ffn_extra"]),
                                             ("before", ["enc.1.ffn_extra", "enc.1.moe"])])
def test_sparse_dense_placement(placement, order):
    plan = [s.name for s in stack_layers(ModelConfig(sparse_dense=True, dense_placement=placement))
            if s.side == "encoder" and s.kind in ("ffn", "moe") and s.layer == 1]
    assert plan == order


def test_sparse_dense_elsewhere_goes_to_block_start():
    plan = [s.name for s in stack_layers(ModelConfig(sparse_dense=True, dense_placement="elsewhere"))
            if s.side == "encoder"]
    assert plan.index("enc.0.ffn_extra") == plan.index("enc.0.ffn") + 1


# -- parameters ----------------------------------------------------------

@settings(max_examples=25)
@given(st.integers(1, 3), st.sampled_from([1, 2, 4, 8]), st.sampled_from(["1", "1/2", "1/4"]),
       st.booleans(), st.sampled_from(["geglu", "relu"]), st.booleans(),
       st.sampled_from(["none", "additive", "multiplicative"]))
def test_param_count_closed_form(layers, n, freq, sd, kind, scale, bias):
    cfg = ModelConfig(num_layers=layers, num_experts=n, expert_layer_freq=freq, sparse_dense=sd,
                      ffn_kind=kind, rms_scale=scale, bias_mode=bias)
    assert build_model(cfg, 0).count() == expected_param_count(cfg)


def test_relu_ablation_matches_geglu_parameters():
    a = build_model(ModelConfig(), 0).count()
    b = build_model(ModelConfig(ffn_kind="relu"), 0).count()
    assert a == b


def test_init_statistics_and_per_name_streams():
    cfg = ModelConfig(d_model=64, d_ff=128)
    p = build_model(cfg, 0)
    w = p["enc.0.ffn.w11"].data
    # a 2-sigma truncated normal has std 0.880 of the untruncated one
    assert math.isclose(w.std(), 0.880 * math.sqrt(0.1 / 64), rel_tol=0.05)
    assert np.abs(w).max() <= 2 * math.sqrt(0.1 / 64)
    q = build_model(ModelConfig(d_model=64, d_ff=128, num_experts=8), 0)
    assert np.array_equal(p["embed"].data, q["embed"].data)
    assert np.array_equal(p["enc.1.moe.expert0.w11"].data, q["enc.1.moe.expert0.w11"].data)
    assert not np.array_equal(build_model(cfg, 1)["embed"].data, p["embed"].data)


def test_subsets_partition_parameters():
    p = build_model(ModelConfig(), 0)
    moe = set(subset_names(p, "moe"))
    non = set(subset_names(p, "non_moe"))
    assert moe and non and not moe & non and moe | non == set(p.names())
    assert all(".moe." in n for n in moe)
    assert all(n.endswith((".q", ".k", ".v", ".o")) for n in subset_names(p, "attention"))
    with pytest.raises(ConfigError):
        subset_names(p, "bias")


def test_params_replace_keeps_layout():
    p = build_model(ModelConfig(), 0)
    q = p.replace({"embed": np.zeros_like(p["embed"].data)})
    assert q.names() == p.names() and q.groups == p.groups
    assert not q["embed"].data.any() and q["lm_head"] is not p["lm_head"]


# -- FLOPs ---------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 4, 8, 32])
def test_expert_flops_per_token_independent_of_experts(n):
    base = ModelConfig(num_experts=1)
    cfg = ModelConfig(num_experts=n)
    assert sublayer_flops(cfg, "moe")["matmul"] == sublayer_flops(base, "moe")["matmul"]
    assert plan_flops(cfg) == plan_flops(base)
    assert sublayer_flops(cfg, "moe")["router"] == 2.0 * cfg.d_model * n


def test_topn_scales_expert_flops():
    one = sublayer_flops(ModelConfig(), "moe")["matmul"]
    two = sublayer_flops(ModelConfig(router=RouterConfig(top_n=2)), "moe")["matmul"]
    assert two == 2 * one == 2 * sublayer_flops(ModelConfig(), "ffn")["matmul"]


# -- forward -------------------------------------------------------------

def test_forward_shapes_and_records():
    cfg = small_cfg()
    p = build_model(cfg, 0)
    b = batch()
    logits, aux = forward_span_corruption(p, b)
    assert logits.shape == b.targets.shape + (cfg.vocab_size,)
    assert [l.name for l in aux.moe_layers] == ["enc.1.moe", "dec.1.moe"]
    for layer in aux.moe_layers:
        for g in layer.groups:
            # padding never reaches a router
            assert not g.decision.candidate[~g.token_mask].any()
            assert g.probs.shape[0] == g.token_mask.sum()


def test_eval_is_deterministic_and_train_mode_uses_rng():
    cfg = small_cfg(dropout=0.1)
    p = build_model(cfg, 0)
    b = batch()
    a1 = lm_loss(p, b, "eval")[0].item()
    assert a1 == lm_loss(p, b, "eval")[0].item()
    t1 = lm_loss(p, b, "train", np.random.default_rng(0))[0].item()
    t2 = lm_loss(p, b, "train", np.random.default_rng(0))[0].item()
    t3 = lm_loss(p, b, "train", np.random.default_rng(1))[0].item()
    assert t1 == t2 != t3
    with pytest.raises(ValueError):
        lm_loss(p, b, "train", None)


def test_decoder_is_causal():
    cfg = small_cfg(router=RouterConfig(decoder_group_size=8, eval_cf=4.0))
    p = build_model(cfg, 0)
    b = batch(b=1)
    base = forward_span_corruption(p, b)[0].data
    t = 3
    b.decoder_inputs = b.decoder_inputs.copy()
    b.decoder_inputs[0, t + 1:] = (b.decoder_inputs[0, t + 1:] + 5) % VOCAB.content_size
    b.target_mask = b.target_mask.copy()
    b.target_mask[0, t + 1:] = True
    changed = forward_span_corruption(p, b)[0].data
    # eval_cf = N gives every expert room for the whole group, so no cross-token coupling
    assert np.allclose(base[0, :t + 1], changed[0, :t + 1], atol=1e-12)
    assert not np.allclose(base[0, t + 1:], changed[0, t + 1:])


def test_bpr_refused_on_decoder_and_coerced_in_model():
    router = RouterConfig(drop_policy="bpr", decoder_group_size=16)
    cfg = small_cfg(router=router)
    p = build_model(cfg, 0)
    _, aux = forward_span_corruption(p, batch())
    policies = {l.side: {g.decision.policy for g in l.groups} for l in aux.moe_layers}
    assert policies == {"encoder": {"bpr"}, "decoder": {"left_to_right"}}
    x = Tensor(np.zeros((4, cfg.d_model)))
    with pytest.raises(ConfigError):
        moe_layer(x, p["dec.1.moe.router"], [lambda z, h: z] * 4, router, side="decoder")


def test_group_size_must_divide_tokens():
    cfg = small_cfg(router=RouterConfig(group_size=24, decoder_group_size=16))
    p = build_model(cfg, 0)
    with pytest.raises(ConfigError) as exc:
        forward_span_corruption(p, batch(b=2, s=16))
    assert exc.value.key == "router.group_size"


def test_single_expert_model_never_drops_and_equals_scaled_ffn():
    cfg = small_cfg(num_experts=1)
    p = build_model(cfg, 0)
    _, aux = forward_span_corruption(p, batch())
    assert drop_fraction(aux) == 0.0
    for layer in aux.moe_layers:
        for g in layer.groups:
            assert np.allclose(g.probs.data, 1.0)


def test_expert_dropout_only_in_train():
    cfg = small_cfg(expert_dropout=0.5)
    p = build_model(cfg, 0)
    b = batch()
    assert lm_loss(p, b, "eval")[0].item() == lm_loss(build_model(small_cfg(), 0), b, "eval")[0].item()


def test_moe_layer_output_matches_manual_combination():
    rng = np.random.default_rng(3)
    router = RouterConfig(num_experts=3, top_n=2, eval_cf=1.0)
    x = Tensor(rng.normal(size=(6, 4)))
    w = Tensor(rng.normal(size=(4, 3)))
    mats = [rng.normal(size=(4, 4)) for _ in range(3)]
    experts = [lambda z, hook, m=m: z @ Tensor(m) for m in mats]
    out = moe_layer(x, w, experts, router)
    d = out.decision
    want = np.zeros((6, 4))
    for t in range(6):
        for r in range(2):
            if d.kept[t, r]:
                want[t] += d.gates[t, r] * (x.data[t] @ mats[d.experts[t, r]])
    assert np.allclose(out.y.data, want, atol=1e-12)


def test_model_gradient_spot_check():
    cfg = small_cfg(bias_mode="multiplicative")
    p = build_model(cfg, 0)
    b = batch()
    names = ["enc.1.moe.router", "enc.1.moe.expert2.bias", "dec.0.cross_attn.k", "lm_head"]
    total = lambda q: sum(x.item() * c for x, c in zip(lm_loss(q, b)[:3], (1, 1e-2, 1e-3)))  # noqa: E731
    ce, lb, z, _, _ = lm_loss(p, b)
    grads = T.gradients_of(ce + lb * 1e-2 + z * 1e-3, [p[n] for n in names])
    rng = np.random.default_rng(0)
    for name, g in zip(names, grads):
        v0 = p[name].data
        coords = rng.choice(v0.size, size=min(8, v0.size), replace=False)
        num = numeric_grad(lambda v: total(p.replace({name: v})), v0, h=1e-5, coords=coords)
        assert rel_err(g.reshape(-1)[coords], num.reshape(-1)[coords]) < 1e-5, name

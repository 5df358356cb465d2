"""Fast invariant suite behind the ``selfcheck`` subcommand.

Each check returns a short detail string and raises AssertionError on failure.
"""

from __future__ import annotations

import itertools
import math
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from stmoe import tensor as T
from stmoe.data import SynthCorpus, Vocab, span_batch, span_corrupt, uncorrupt
from stmoe.losses import load_balance_loss, router_z_loss
from stmoe.mesh import comm_cost, plan_mesh
from stmoe.model import ModelConfig, build_model, lm_loss
from stmoe.precision import BFLOAT16, FLOAT32, anchor_logits, softmax_exact, softmax_in_format
from stmoe.routing import (RouterConfig, assign_capacity, combine, dispatch, entropy,
                           expert_capacity, select_top_n)


def _softmax_anchor() -> str:
    exact = softmax_exact(anchor_logits())[0]
    bf = softmax_in_format(anchor_logits(), BFLOAT16)[0]
    assert abs(exact - 0.142) <= 2e-3 and abs(bf - 0.091) <= 2e-3, (exact, bf)
    return f"{exact:.4f} / {bf:.4f}"


def _ulp_ratio() -> str:
    xs = np.linspace(1.0, 2.0, 257)[:-1]
    ratio = max(BFLOAT16.ulp(x) / FLOAT32.ulp(x) for x in xs)
    assert ratio == 65536.0, ratio
    return f"{ratio:g}"


def _balance_identities() -> str:
    n = 8
    uniform = load_balance_loss(np.full((n * 4, n), 1.0 / n), np.tile(np.arange(n), 4)).item()
    collapsed = np.zeros((32, n))
    collapsed[:, 0] = 1.0
    col = load_balance_loss(collapsed).item()
    assert math.isclose(uniform, 1e-2, rel_tol=1e-12) and math.isclose(col, 1e-2 * n, rel_tol=1e-12)
    return f"{uniform:g}, {col:g}"


def _zloss_forms() -> str:
    z = router_z_loss(np.zeros((1, 2))).item()
    assert math.isclose(z, math.log(2) ** 2, rel_tol=1e-12)
    assert abs(router_z_loss(np.log(np.full((3, 4), 0.25))).item()) < 1e-24
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    g = T.gradients_of(router_z_loss(x), [x])[0]
    fd = T.finite_difference_grad(lambda a: router_z_loss(a).item(), x.data)
    err = np.linalg.norm(g - fd) / np.linalg.norm(fd)
    assert err < 1e-6, err
    return f"grad rel err {err:.1e}"


def _dispatch_oracle() -> str:
    rng = np.random.default_rng(1)
    for _ in range(50):
        t, n = int(rng.integers(1, 13)), int(rng.integers(1, 5))
        top = int(rng.integers(1, min(2, n) + 1))
        probs = rng.dirichlet(np.ones(n), size=t)
        x = rng.normal(size=(t, 3))
        cand = select_top_n(probs, top, 0.2, "eval")
        cap = expert_capacity(t, n, float(rng.uniform(0.5, 2.5)))
        dec = assign_capacity(cand, cap, "left_to_right")
        slots = dispatch(x, dec).data
        y = combine(slots[..., ::-1], dec).data
        want = np.zeros_like(x)
        for i in range(t):
            for r in range(top):
                if dec.kept[i, r]:
                    want[i] += dec.gates[i, r] * x[i, ::-1]
        assert np.abs(y - want).max() < 1e-12
    return "50 random groups"


def _drop_monotone() -> str:
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(4), size=24)
    cand = select_top_n(probs, 2, 0.2, "eval")
    fracs = []
    for cf in (0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0):
        dec = assign_capacity(cand, expert_capacity(24, 4, cf), "left_to_right")
        fracs.append(dec.dropped.sum() / dec.candidate.sum())
    assert all(a >= b for a, b in zip(fracs, fracs[1:])) and fracs[-1] == 0.0, fracs
    return " ".join(f"{f:.2f}" for f in fracs)


def _bpr_dominates() -> str:
    rng = np.random.default_rng(3)
    for _ in range(30):
        probs = rng.dirichlet(np.ones(3), size=9)
        cand = select_top_n(probs, 1, 0.2, "eval")
        cap = expert_capacity(9, 3, 0.7)
        kept = {p: (assign_capacity(cand, cap, p).kept * cand.gates).sum()
                for p in ("left_to_right", "bpr")}
        assert kept["bpr"] >= kept["left_to_right"] - 1e-12
        best = 0.0
        for e in range(3):
            g = [cand.gates[i, 0] for i in range(9) if cand.experts[i, 0] == e]
            best += max((sum(c) for c in itertools.combinations(g, min(cap, len(g)))), default=0.0)
        assert math.isclose(kept["bpr"], best, rel_tol=1e-12, abs_tol=1e-15)
    return "30 random groups"


def _mesh() -> str:
    a = plan_mesh(32, 8, 8, 4)
    b = plan_mesh(32, 2, 8, 4)
    assert a.shape == (8, 4) and b.shape == (4, 2, 4), (a.shape, b.shape)
    c1 = comm_cost("all2all", 1024, 16, 1.0, num_experts=2)
    assert c1 == comm_cost("all2all", 1024, 16, 1.0, num_experts=64)
    assert math.isclose(comm_cost("all2all", 1024, 16, 2.0), 2 * c1)
    return f"{a.shape} {b.shape}"


def _entropy() -> str:
    u = entropy(np.full(32, 5))
    assert abs(u - 3.47) <= 0.01 and entropy([0, 9, 0]) == 0.0
    return f"{u:.4f}"


def _span_roundtrip() -> str:
    vocab = Vocab(32, 8)
    rng = np.random.default_rng(4)
    for _ in range(200):
        seq = rng.integers(0, 32, size=int(rng.integers(2, 40)))
        inp, tgt = span_corrupt(seq, rng, vocab)
        assert np.array_equal(uncorrupt(inp, tgt, vocab), seq)
    return "200 sequences"


def _model_gradient() -> str:
    cfg = ModelConfig(vocab_size=Vocab(32, 4).size,
                      router=RouterConfig(decoder_group_size=16))
    params = build_model(cfg, 0)
    corpus = SynthCorpus(Vocab(32, 4), seed=0)
    batch = span_batch(corpus, 2, 16, np.random.default_rng(0))
    name = "enc.1.moe.router"

    def f(w):
        return lm_loss(params.replace({name: w}), batch, "eval")[0].item()

    ce = lm_loss(params, batch, "eval")[0]
    g = T.gradients_of(ce, [params[name]])[0]
    fd = T.finite_difference_grad(f, params[name].data)
    err = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-30)
    assert err < 1e-5, err
    return f"router grad rel err {err:.1e}"


def _checkpoint_roundtrip() -> str:
    from stmoe.checkpoint import Checkpoint, load_checkpoint, save_checkpoint

    params = build_model(ModelConfig(), 3)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "ck.stmoe"
        save_checkpoint(path, Checkpoint(params))
        back = load_checkpoint(path)
    assert back.params.names() == params.names()
    assert all(np.array_equal(back.params[n].data, params[n].data) for n in params.names())
    return f"{params.count()} parameters"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("softmax_bf16_anchor", _softmax_anchor),
    ("ulp_ratio_bf16_f32", _ulp_ratio),
    ("load_balance_identities", _balance_identities),
    ("z_loss_closed_forms", _zloss_forms),
    ("dispatch_combine_oracle", _dispatch_oracle),
    ("drop_fraction_monotone_in_cf", _drop_monotone),
    ("bpr_keeps_max_gate_mass", _bpr_dominates),
    ("mesh_layout_and_costs", _mesh),
    ("routing_entropy", _entropy),
    ("span_corruption_roundtrip", _span_roundtrip),
    ("model_router_gradient", _model_gradient),
    ("checkpoint_roundtrip", _checkpoint_roundtrip),
]


def run_selfcheck(emit: Callable[[str], None] = print) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            detail, ok = fn(), True
        except Exception as exc:  # report every failure, keep going
            detail, ok = f"{type(exc).__name__}: {exc}", False
        results.append((name, ok, detail))
        emit(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return results

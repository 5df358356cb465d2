import math

import numpy as np
import pytest

from stmoe.checkpoint import MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from stmoe.model import ModelConfig, build_model
from stmoe.optim import Adam, AdamState, inverse_sqrt_lr
from stmoe.routing import RouterConfig


def test_schedule():
    assert inverse_sqrt_lr(0, 1.0, 4) == 0.25
    assert inverse_sqrt_lr(3, 1.0, 4) == 1.0
    assert math.isclose(inverse_sqrt_lr(15, 1.0, 4), 0.5)
    assert inverse_sqrt_lr(10, 0.3, 0) == 0.3


def test_adam_first_step_is_sign_times_lr():
    opt = Adam()
    out = opt.step({"w": np.zeros(3)}, {"w": np.array([2.0, -0.5, 1e-3])}, 0.1)
    assert np.allclose(out["w"], [-0.1, 0.1, -0.1], rtol=1e-4)
    assert opt.state.step == 1


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=4) for _ in range(5)]
    w = np.ones(4)
    m = v = np.zeros(4)
    opt = Adam(0.9, 0.99)
    cur = {"w": w.copy()}
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
        cur = opt.step(cur, {"w": g}, 0.01)
    assert np.allclose(cur["w"], w, rtol=1e-12, atol=1e-15)


def test_update_clipping_bounds_rms():
    rng = np.random.default_rng(1)
    opt = Adam(clip=1e-9)
    w = rng.normal(size=(5, 5))
    out = opt.step({"w": w}, {"w": rng.normal(size=(5, 5))}, 1.0)
    rms = np.sqrt(np.mean((out["w"] - w) ** 2))
    assert rms <= 1e-9 * (1 + 1e-6)


def test_only_named_grads_updated():
    out = Adam().step({"a": np.ones(2), "b": np.ones(2)}, {"a": np.ones(2)}, 0.1)
    assert set(out) == {"a"}


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(bias_mode="additive", router=RouterConfig(top_n=2, decoder_group_size=8))
    params = build_model(cfg, 5)
    st = AdamState(7, {"embed": np.full_like(params["embed"].data, 0.5)},
                   {"embed": np.full_like(params["embed"].data, 0.25)})
    path = tmp_path / "c.stmoe"
    save_checkpoint(path, Checkpoint(params, st, {"note": "x"}))
    assert path.read_bytes()[:8] == MAGIC
    back = load_checkpoint(path)
    assert back.config == cfg
    assert back.params.names() == params.names() and back.params.groups == params.groups
    for n in params.names():
        assert np.array_equal(back.params[n].data, params[n].data)
    assert back.opt_state.step == 7 and np.array_equal(back.opt_state.v["embed"], st.v["embed"])
    assert back.meta == {"note": "x"}


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)
    good = tmp_path / "good"
    save_checkpoint(good, Checkpoint(build_model(ModelConfig(), 0)))
    good.write_bytes(good.read_bytes() + b"\0" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(good)

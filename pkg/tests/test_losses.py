import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from stmoe import tensor as T
from stmoe.errors import ConfigError, DivergenceError
from stmoe.losses import LossConfig, load_balance_loss, router_z_loss, total_loss
from stmoe.tensor import Tensor

from oracles import load_balance_loop, numeric_grad, rel_err, z_loss_loop


def test_defaults():
    assert LossConfig() == LossConfig(1e-2, 1e-3)
    with pytest.raises(ConfigError):
        LossConfig(c_z=-1)


@pytest.mark.parametrize("n", [1, 2, 4, 8, 32])
def test_load_balance_uniform_and_collapsed(n):
    uniform = np.full((n * 3, n), 1.0 / n)
    assign = np.tile(np.arange(n), 3)
    assert math.isclose(load_balance_loss(uniform, assign).item(), 1e-2, rel_tol=1e-12)
    collapsed = np.zeros((10, n))
    collapsed[:, 0] = 1.0
    assert math.isclose(load_balance_loss(collapsed).item(), 1e-2 * n, rel_tol=1e-12)


@given(st.integers(0, 10 ** 6), st.integers(1, 20), st.integers(1, 6))
def test_load_balance_matches_loop(seed, t, n):
    probs = np.random.default_rng(seed).dirichlet(np.ones(n), size=t)
    assert math.isclose(load_balance_loss(probs, alpha=0.3).item(),
                        load_balance_loop(probs, 0.3), rel_tol=1e-12, abs_tol=1e-15)


def test_load_balance_gradient_only_through_P():
    rng = np.random.default_rng(0)
    p0 = rng.dirichlet(np.ones(4), size=6)
    p = Tensor(p0, requires_grad=True)
    (g,) = T.gradients_of(load_balance_loss(p), [p])
    f = np.bincount(p0.argmax(axis=1), minlength=4) / 6
    assert np.allclose(g, np.tile(1e-2 * 4 * f / 6, (6, 1)))


def test_z_loss_closed_forms():
    assert math.isclose(router_z_loss(np.zeros((1, 2))).item(), math.log(2) ** 2, rel_tol=1e-14)
    rows = np.log(np.random.default_rng(1).dirichlet(np.ones(5), size=4))
    assert abs(router_z_loss(rows).item()) < 1e-28
    assert math.isclose(router_z_loss(np.zeros((7, 4))).item(), math.log(4) ** 2, rel_tol=1e-14)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-60, 60)))
def test_z_loss_matches_loop(x):
    assert math.isclose(router_z_loss(x).item(), z_loss_loop(x), rel_tol=1e-10, abs_tol=1e-12)


def test_z_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(5):
        x0 = rng.normal(size=(6, 4)) * 3
        x = Tensor(x0, requires_grad=True)
        (g,) = T.gradients_of(router_z_loss(x), [x])
        assert rel_err(g, numeric_grad(lambda v: router_z_loss(v).item(), x0)) < 1e-6


def test_z_loss_permutation_and_monotone_shift():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5)) + 2
    perm = rng.permutation(5)
    assert math.isclose(router_z_loss(x[:, perm]).item(), router_z_loss(x).item(), rel_tol=1e-14)
    assert router_z_loss(x + 0.5).item() > router_z_loss(x).item()


def test_z_loss_invariant_under_lse_preserving_change():
    # moving mass between logits while keeping each row's log-sum-exp fixed
    x = np.array([[1.0, 0.0, -1.0]])
    lse = np.log(np.exp(x).sum())
    a = 0.3
    y = np.array([[np.log(np.exp(1.0) - a), np.log(np.exp(0.0) + a), -1.0]])
    assert math.isclose(np.log(np.exp(y).sum()), lse, rel_tol=1e-15)
    assert abs(router_z_loss(y).item() - router_z_loss(x).item()) < 1e-10


@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(-30, 30)))
def test_losses_non_negative(x):
    assert router_z_loss(x).item() >= 0
    e = np.exp(x - x.max(axis=1, keepdims=True))
    assert load_balance_loss(e / e.sum(axis=1, keepdims=True)).item() >= 0


def test_total_loss_combination_and_divergence():
    cfg = LossConfig(0.5, 0.25)
    assert total_loss(2.0, 1.0, 4.0, cfg).item() == 2.0 + 0.5 + 1.0
    with pytest.raises(DivergenceError) as exc:
        total_loss(float("nan"), 1.0, float("inf"), cfg)
    assert "ce" in str(exc.value) and "z" in str(exc.value)
    assert exc.value.components["lb"] == 1.0


def test_z_loss_rejects_bad_shapes():
    with pytest.raises(ValueError):
        router_z_loss(np.zeros(3))
    with pytest.raises(ValueError):
        router_z_loss(np.zeros((0, 3)))

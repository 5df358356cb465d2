import math
import warnings

import pytest
from hypothesis import given, strategies as st

from stmoe.errors import ConfigError
from stmoe.mesh import (HardwareProfile, comm_cost, operational_intensity, plan_mesh,
                        step_time_estimate)
from stmoe.model import ModelConfig


def test_two_and_three_d_layouts():
    m2 = plan_mesh(32, 8, 8, 4)
    assert not m2.is_3d and m2.shape == (8, 4)
    m3 = plan_mesh(32, 2, 8, 4)
    assert m3.is_3d and (m3.outer, m3.inner, m3.model) == (4, 2, 4)
    assert m3.as_dict()["layout"] == "3d"


def test_more_experts_than_rows_warns():
    with pytest.warns(UserWarning):
        m = plan_mesh(32, 16, 8, 4)
    assert m.experts_per_inner_row == 2


def test_bad_factorization_lists_valid_ones():
    with pytest.raises(ConfigError, match="4x8"):
        plan_mesh(32, 8, 8, 8)
    with pytest.raises(ConfigError):
        plan_mesh(32, 3, 8, 4)
    with pytest.raises(ConfigError):
        plan_mesh(32, 8, 8, 4, batch=12)


def test_operational_intensity():
    assert operational_intensity(1024, 1024, 1) == 512
    assert operational_intensity(1024, 1024, 8) < operational_intensity(1024, 1024, 1)
    with pytest.raises(ValueError):
        operational_intensity(0, 1, 1)


@given(st.integers(1, 10 ** 5), st.integers(1, 1024), st.sampled_from([0.5, 1.0, 1.25, 2.0]),
       st.integers(1, 128), st.integers(1, 128))
def test_comm_cost_properties(tokens, d, cf, e1, e2):
    a = comm_cost("all2all", tokens, d, cf, num_experts=e1)
    assert a == comm_cost("all2all", tokens, d, cf, num_experts=e2)
    assert math.isclose(comm_cost("all2all", tokens, d, 2 * cf), 2 * a)
    r = comm_cost("allreduce", tokens, d, cf, devices=4, num_experts=e1)
    assert r == comm_cost("allreduce", tokens, d, cf, devices=4, num_experts=e2)
    assert math.isclose(comm_cost("allreduce", tokens, d, 2 * cf, devices=4), 2 * r)
    g = comm_cost("grad_allreduce", tokens, d, cf, devices=8, num_params=1e6)
    assert g == comm_cost("grad_allreduce", 7 * tokens, d, cf, devices=8, num_params=1e6)


def test_comm_cost_errors():
    with pytest.raises(ValueError):
        comm_cost("broadcast", 1, 1)
    with pytest.raises(ValueError):
        comm_cost("grad_allreduce", 1, 1)


def test_step_time_estimate_bandwidth_and_cf():
    mesh = plan_mesh(32, 8, 8, 4)
    cfg = ModelConfig(num_experts=8)
    slow = step_time_estimate(mesh, cfg, 1.25, HardwareProfile(comm_bytes_per_s=1e9), 4096)
    fast = step_time_estimate(mesh, cfg, 1.25, HardwareProfile(comm_bytes_per_s=2e9), 4096)
    assert math.isclose(slow.comm_s, 2 * fast.comm_s)
    lo = step_time_estimate(mesh, cfg, 1.0, HardwareProfile(), 4096)
    hi = step_time_estimate(mesh, cfg, 2.0, HardwareProfile(), 4096)
    assert hi.seconds > lo.seconds
    with warnings.catch_warnings():
        dead = step_time_estimate(mesh, cfg, 1.0, HardwareProfile(comm_bytes_per_s=0), 4096)
    assert math.isinf(dead.seconds) and any("bandwidth" in f for f in dead.flags)

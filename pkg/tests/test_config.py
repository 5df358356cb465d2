import pytest

from stmoe.config import canonical_json, config_hash, from_dict, to_dict
from stmoe.errors import ConfigError
from stmoe.model import ModelConfig
from stmoe.train import StudyConfig, TrainConfig


def test_round_trip_nested():
    tc = TrainConfig(steps=10, warmup_steps=2)
    tc.noise.dropout = 0.1
    back = from_dict(TrainConfig, to_dict(tc), "train")
    assert back == tc and back.noise.dropout == 0.1


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as info:
        from_dict(TrainConfig, {"data": {"seq_length": 3}}, "train")
    assert info.value.key == "train.data.seq_length"


def test_int_promoted_and_list_to_tuple():
    tc = from_dict(TrainConfig, {"lr": 1, "steps": 5, "warmup_steps": 0}, "train")
    assert isinstance(tc.lr, float)
    st = from_dict(StudyConfig, {"seeds": [0, 1]}, "study")
    assert st.seeds == [0, 1]


def test_validation_errors_become_config_errors():
    with pytest.raises(ConfigError, match="warmup"):
        TrainConfig(steps=3, warmup_steps=4)
    with pytest.raises(ConfigError):
        from_dict(TrainConfig, {"trainable_subset": "router"}, "train")


def test_hash_is_order_independent():
    a = {"x": 1, "y": [1, 2]}
    b = {"y": [1, 2], "x": 1}
    assert canonical_json(a) == canonical_json(b)
    assert config_hash(a) == config_hash(b) != config_hash({"x": 2, "y": [1, 2]})
    assert len(config_hash(to_dict(ModelConfig()))) == 16

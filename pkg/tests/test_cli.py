import json

import pytest

from stmoe.cli import EXIT_CONFIG, EXIT_OK, main, parse_config, serialize_config
from stmoe.errors import ConfigError

TINY = {
    "schema_version": 1,
    "train": {"steps": 6, "warmup_steps": 2, "batch_size": 4, "eval_batches": 1},
    "router": {"decoder_group_size": 16},
    "study": {"seeds": [0, 1], "variants": ["baseline", "z_loss"], "top_ns": [1, 2],
              "capacity_factors": [1.0, 2.0],
              "finetune": {"num_train": 16, "num_heldout": 8, "eval_every": 3}},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_config_round_trip_is_identity():
    cfg = parse_config(TINY)
    doc = serialize_config(cfg)
    assert parse_config(doc) == cfg
    assert serialize_config(parse_config(doc)) == doc


@pytest.mark.parametrize("doc, key", [
    ({"schema_version": 1, "train": {"stpes": 3}}, "train.stpes"),
    ({"schema_version": 1, "extras": {}}, "extras"),
    ({"train": {}}, "schema_version"),
    ({"schema_version": 2}, "schema_version"),
    ({"schema_version": 1, "model": {"router": {}}}, "model.router"),
    ({"schema_version": 1, "router": {"num_experts": 3}}, "router.num_experts"),
])
def test_bad_configs_name_the_key(doc, key):
    with pytest.raises(ConfigError) as info:
        parse_config(doc)
    assert info.value.key == key


def test_unknown_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "loss": {"cz": 1}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "loss.cz" in capsys.readouterr().err


@pytest.mark.parametrize("command, csv_name", [
    ("train", "report.csv"),
    ("finetune", "finetune.csv"),
    ("stability-study", "study.csv"),
    ("trace", "entropy.csv"),
    ("precision-demo", "precision.csv"),
])
def test_same_config_and_seed_gives_identical_bytes(tmp_path, tiny, command, csv_name):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main([command, "--config", tiny, "--out", str(out), "--seed", "3"]) == EXIT_OK
        outs.append((out / csv_name).read_bytes())
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == command and manifest["seed"] == 3
        assert csv_name in manifest["outputs"]
    assert outs[0] == outs[1]


def test_precision_demo_rows(tmp_path, capsys):
    assert main(["precision-demo", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "precision.csv").read_text().splitlines()
    assert lines[0].startswith("format") and len(lines) >= 3
    assert "bfloat16" in capsys.readouterr().out


def test_mesh_plan_json(tmp_path):
    assert main(["mesh-plan", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "mesh.json").read_text())
    assert doc["mesh"]["layout"] == "3d" and doc["mesh"]["shape"] == [2, 4, 4] and doc["comm_bytes"]["all2all"] > 0


def test_finetune_from_checkpoint(tmp_path, tiny):
    assert main(["train", "--config", tiny, "--out", str(tmp_path / "t")]) == EXIT_OK
    ck = str(tmp_path / "t" / "checkpoint.stmoe")
    assert main(["finetune", "--config", tiny, "--out", str(tmp_path / "f"),
                 "--checkpoint", ck]) == EXIT_OK
    assert (tmp_path / "f" / "finetune.csv").read_text().startswith("step,loss")


def test_selfcheck_passes(tmp_path):
    assert main(["selfcheck", "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "selfcheck.csv").read_text().splitlines()[1:]
    assert len(rows) == 12 and all(",1," in r for r in rows)

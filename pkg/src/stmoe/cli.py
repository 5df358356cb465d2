"""``stmoe`` command line: one subcommand per experiment, all outputs under ``--out``."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from stmoe.checkpoint import load_checkpoint, save_checkpoint
from stmoe.config import config_hash, from_dict, to_dict
from stmoe.data import span_batch
from stmoe.errors import ConfigError
from stmoe.losses import LossConfig
from stmoe.mesh import comm_cost, plan_mesh
from stmoe.model import ModelConfig, build_model
from stmoe.precision import precision_demo_rows
from stmoe.routing import RouterConfig
from stmoe import train as H

SCHEMA_VERSION = 1
SECTIONS = ("model", "router", "train", "loss", "study")
EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("stmoe")


@dataclass
class CliConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: H.TrainConfig = field(default_factory=H.TrainConfig)
    study: H.StudyConfig = field(default_factory=H.StudyConfig)
    schema_version: int = SCHEMA_VERSION


def parse_config(doc: dict) -> CliConfig:
    """Build a CliConfig from a JSON document; unknown keys raise ConfigError naming them."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    if "schema_version" not in doc:
        raise ConfigError("schema_version", "required")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {doc['schema_version']!r}")
    for key in doc:
        if key != "schema_version" and key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    for sec in SECTIONS:
        if sec in doc and not isinstance(doc[sec], dict):
            raise ConfigError(sec, "section must be an object")
    model_doc = dict(doc.get("model", {}))
    if "router" in model_doc:
        raise ConfigError("model.router", "use the top-level router section")
    train_doc = dict(doc.get("train", {}))
    if "loss" in train_doc:
        raise ConfigError("train.loss", "use the top-level loss section")
    router_doc = dict(doc.get("router", {}))
    n_exp = model_doc.get("num_experts", ModelConfig.num_experts)
    if "num_experts" in router_doc and router_doc["num_experts"] != n_exp:
        raise ConfigError("router.num_experts",
                          f"{router_doc['num_experts']} disagrees with model.num_experts={n_exp}")
    router_doc["num_experts"] = n_exp
    router = from_dict(RouterConfig, router_doc, "router")
    model = from_dict(ModelConfig, model_doc, "model")
    model.router = router
    model.validate()
    loss = from_dict(LossConfig, doc.get("loss", {}), "loss")
    tc = from_dict(H.TrainConfig, train_doc, "train")
    tc.loss = loss
    study = from_dict(H.StudyConfig, doc.get("study", {}), "study")
    return CliConfig(model, tc, study, SCHEMA_VERSION)


def serialize_config(cfg: CliConfig) -> dict:
    model = to_dict(cfg.model)
    router = model.pop("router")
    train = to_dict(cfg.train)
    loss = train.pop("loss")
    return {"schema_version": cfg.schema_version, "model": model, "router": router,
            "train": train, "loss": loss, "study": to_dict(cfg.study)}


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return parse_config({"schema_version": SCHEMA_VERSION})
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError("--config", str(exc)) from exc
    return parse_config(doc)


def _version(pkg: str) -> str:
    try:
        return metadata.version(pkg)
    except metadata.PackageNotFoundError:
        return "unknown"


# -- output helpers -------------------------------------------------------

class Outputs:
    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []
        root.mkdir(parents=True, exist_ok=True)

    def text(self, name: str, content: str) -> Path:
        path = self.root / name
        path.write_text(content)
        self.files.append(name)
        return path

    def json(self, name: str, obj) -> Path:
        return self.text(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_manifest(out: Outputs, command: str, cfg: CliConfig, extra: dict | None = None) -> None:
    doc = serialize_config(cfg)
    out.json("config.json", doc)
    manifest = {
        "command": command,
        "config_hash": config_hash(doc),
        "seed": cfg.train.seed,
        "versions": {"artifact": _version("artifact"), "numpy": np.__version__,
                     "python": platform.python_version()},
        "outputs": sorted(out.files) + ["manifest.json"],
        **(extra or {}),
    }
    out.json("manifest.json", manifest)


def _checkpoint_or_init(args, cfg: CliConfig):
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        return ckpt.params, ckpt.opt_state
    return build_model(H.effective_model_config(cfg.model, cfg.train), cfg.train.seed), None


# -- subcommands ----------------------------------------------------------

def cmd_train(args, cfg: CliConfig, out: Outputs) -> int:
    report, ckpt = H.train(cfg.model, cfg.train)
    out.text("report.csv", report.to_csv())
    out.json("summary.json", report.summary())
    save_checkpoint(out.path("checkpoint.stmoe"), ckpt)
    return EXIT_DIVERGED if report.diverged else EXIT_OK


def cmd_finetune(args, cfg: CliConfig, out: Outputs) -> int:
    params, opt_state = _checkpoint_or_init(args, cfg)
    report, ckpt = H.finetune(params.config, cfg.train, cfg.study.finetune, params, opt_state)
    out.text("finetune.csv", report.to_csv())
    out.json("summary.json", {"steps_to_full_train_acc": report.steps_to_full_train_acc,
                              "final_train_acc": report.final_train_acc,
                              "final_heldout_acc": report.final_heldout_acc,
                              "diverged": report.diverged})
    save_checkpoint(out.path("checkpoint.stmoe"), ckpt)
    if args.sweep:
        # both arms are pre-trained with the same train config before the grid
        dense_cfg = copy.deepcopy(cfg.model)
        dense_cfg.num_experts = 1
        dense_cfg.validate()
        ckpts = {}
        for label, mc in (("sparse", cfg.model), ("dense", dense_cfg)):
            pre, ck = H.train(mc, cfg.train)
            if pre.diverged:
                return EXIT_DIVERGED
            ckpts[label] = ck
        rows = H.finetune_sweep(ckpts, cfg.train, cfg.study.finetune, cfg.study)
        out.text("sweep.csv", H.table_csv(rows, H.SWEEP_COLUMNS))
    return EXIT_DIVERGED if report.diverged else EXIT_OK


def cmd_stability(args, cfg: CliConfig, out: Outputs) -> int:
    rows, runs = H.stability_study(cfg.model, cfg.train, cfg.study)
    out.text("study.csv", H.table_csv(rows, H.STUDY_ROW_COLUMNS))
    out.text("runs.csv", H.table_csv(runs, H.STUDY_RUN_COLUMNS))
    out.json("study.json", [to_dict(r) for r in rows])
    return EXIT_OK


def cmd_routing_bench(args, cfg: CliConfig, out: Outputs) -> int:
    rows = H.routing_bench(cfg.model, cfg.train, cfg.study)
    out.text("routing_bench.csv", H.table_csv(rows, H.BENCH_COLUMNS))
    return EXIT_OK


def cmd_drop_robustness(args, cfg: CliConfig, out: Outputs) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
    else:
        report, ckpt = H.train(cfg.model, cfg.train)
        if report.diverged:
            return EXIT_DIVERGED
    rows = H.drop_robustness(ckpt, cfg.train, cfg.study.finetune, cfg.study)
    out.text("drop_robustness.csv", H.table_csv(rows, H.DROP_COLUMNS))
    return EXIT_OK


def cmd_trace(args, cfg: CliConfig, out: Outputs) -> int:
    params, _ = _checkpoint_or_init(args, cfg)
    data = cfg.train.data
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 7919]))
    batch = span_batch(H.make_corpus(data), cfg.train.batch_size, data.seq_len, rng,
                       data.mean_span, data.corrupt_fraction)
    ent = H.trace_tokens(params, batch, out.path("trace.jsonl"), H.vocab_for(data))
    out.text("entropy.csv", "layer,side,sentinel_entropy\n" + "".join(
        f"{k},{'encoder' if k.startswith('enc') else 'decoder'},{v!r}\n" for k, v in ent.items()))
    return EXIT_OK


def cmd_precision(args, cfg: CliConfig, out: Outputs) -> int:
    rows = precision_demo_rows()
    cols = list(rows[0])
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_csv_cell(r[c]) for c in cols))
    out.text("precision.csv", "\n".join(lines) + "\n")
    for r in rows:
        print(f"{r['format']}: top prob {r['top_prob']:.4f}")
    return EXIT_OK


def _csv_cell(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_mesh(args, cfg: CliConfig, out: Outputs) -> int:
    st = cfg.study
    experts = st.mesh_experts if st.mesh_experts is not None else cfg.model.num_experts
    mesh = plan_mesh(st.mesh_cores, experts, st.mesh_data, st.mesh_model)
    tokens = cfg.train.batch_size * cfg.train.data.seq_len
    cf = cfg.model.router.train_cf
    d = cfg.model.d_model
    doc = {"mesh": mesh.as_dict(),
           "comm_bytes": {"all2all": comm_cost("all2all", tokens, d, cf, mesh.cores),
                          "allreduce": comm_cost("allreduce", tokens, d, cf, mesh.cores)}}
    out.json("mesh.json", doc)
    print(json.dumps(doc["mesh"], sort_keys=True))
    return EXIT_OK


def cmd_selfcheck(args, cfg: CliConfig, out: Outputs) -> int:
    from stmoe.selfcheck import run_selfcheck

    results = run_selfcheck()
    out.text("selfcheck.csv", "check,passed,detail\n" + "".join(
        f"{n},{int(ok)},\"{d}\"\n" for n, ok, d in results))
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_DIVERGED


COMMANDS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "stability-study": cmd_stability,
    "routing-bench": cmd_routing_bench,
    "drop-robustness": cmd_drop_robustness,
    "trace": cmd_trace,
    "precision-demo": cmd_precision,
    "mesh-plan": cmd_mesh,
    "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stmoe", description="Desk-scale sparse MoE toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config path (defaults apply when omitted)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides train.seed and model.seed")
        p.add_argument("--threads", type=int, help="worker processes (env ST_MOE_THREADS)")
        if name in ("finetune", "drop-robustness", "trace"):
            p.add_argument("--checkpoint", help="checkpoint to start from")
        if name == "finetune":
            p.add_argument("--sweep", action="store_true",
                           help="also pre-train dense and sparse models and run the batch size x "
                                "LR x reset grid on both")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.train.seed = args.seed
            cfg.model.seed = args.seed
        if args.threads is not None:
            cfg.study.workers = args.threads
        out = Outputs(Path(args.out))
        code = COMMANDS[args.command](args, cfg, out)
        write_manifest(out, args.command, cfg, {"exit_code": code})
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

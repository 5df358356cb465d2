"""Training loop, run reports and the study runners built on it."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from stmoe import tensor as T
from stmoe.checkpoint import Checkpoint
from stmoe.data import ClassificationTask, SynthCorpus, Vocab, make_classification, span_batch
from stmoe.errors import ConfigError, DivergenceError
from stmoe.losses import LossConfig, total_loss
from stmoe.model import (ModelConfig, Params, build_model, drop_fraction,
                         forward_span_corruption, lm_loss, max_router_logit, subset_names, TRAINABLE_SUBSETS)
from stmoe.optim import Adam, AdamState, inverse_sqrt_lr
from stmoe.routing import entropy, trace_records, write_trace

log = logging.getLogger(__name__)


@dataclass
class NoiseConfig:
    input_jitter: bool = False
    jitter_eps: float = 1e-2
    dropout: float | None = None
    expert_dropout: float | None = None


@dataclass
class AblationConfig:
    remove_geglu: bool = False
    remove_rms_scale: bool = False


@dataclass
class DataConfig:
    content_size: int = 64
    num_sentinels: int = 8
    seq_len: int = 32
    mean_span: float = 3.0
    corrupt_fraction: float = 0.15
    corpus_seed: int = 1234
    num_motifs: int = 16


@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 1e-2
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.99
    clip_update: float | None = None
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    trainable_subset: str = "all"
    reset_optimizer_state: bool = False
    divergence_threshold: float = 10.0
    eval_batches: int = 4
    log_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("train.steps", "must be >= 0")
        if self.warmup_steps > self.steps:
            raise ConfigError("train.warmup_steps",
                              f"{self.warmup_steps} exceeds steps={self.steps}")
        if self.trainable_subset not in TRAINABLE_SUBSETS:
            raise ConfigError("train.trainable_subset",
                              f"expected one of {TRAINABLE_SUBSETS}, got {self.trainable_subset!r}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")


def vocab_for(data: DataConfig) -> Vocab:
    return Vocab(data.content_size, data.num_sentinels)


def effective_model_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelConfig:
    """Apply the train-time noise and ablation switches to a copy of the model config."""
    cfg = copy.deepcopy(model_cfg)
    if train_cfg.ablation.remove_geglu:
        cfg.ffn_kind = "relu"
    if train_cfg.ablation.remove_rms_scale:
        cfg.rms_scale = False
    if train_cfg.noise.input_jitter:
        cfg.router.jitter_eps = train_cfg.noise.jitter_eps
    if train_cfg.noise.dropout is not None:
        cfg.dropout = train_cfg.noise.dropout
    if train_cfg.noise.expert_dropout is not None:
        cfg.expert_dropout = train_cfg.noise.expert_dropout
    vocab = vocab_for(train_cfg.data)
    if cfg.vocab_size != vocab.size:
        cfg.vocab_size = vocab.size
    cfg.validate()
    return cfg


# -- reports --------------------------------------------------------------

STEP_COLUMNS = ("step", "lr", "ce", "lb", "z", "total", "drop_fraction", "max_router_logit")


@dataclass
class StepRow:
    step: int
    lr: float
    ce: float
    lb: float
    z: float
    total: float
    drop_fraction: float
    max_router_logit: float


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunReport:
    rows: list[StepRow] = field(default_factory=list)
    diverged: bool = False
    divergence_step: int | None = None
    divergence_reason: str = ""
    quality: float | None = None
    layer_entropy: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in STEP_COLUMNS])
        return buf.getvalue()

    @staticmethod
    def rows_from_csv(text: str) -> list[StepRow]:
        reader = csv.DictReader(io.StringIO(text))
        types = {f.name: f.type for f in fields(StepRow)}
        out = []
        for rec in reader:
            out.append(StepRow(**{k: (int(v) if types[k] in (int, "int") else float(v))
                                  for k, v in rec.items()}))
        return out

    def summary(self) -> dict:
        return {"steps": len(self.rows), "diverged": self.diverged,
                "divergence_step": self.divergence_step,
                "divergence_reason": self.divergence_reason, "quality": self.quality,
                "layer_entropy": self.layer_entropy, **self.extra}


# -- training -------------------------------------------------------------

@dataclass
class Streams:
    data: np.random.Generator
    model: np.random.Generator


def make_streams(seed: int) -> Streams:
    data_ss, model_ss = np.random.SeedSequence(seed).spawn(2)
    return Streams(np.random.default_rng(data_ss), np.random.default_rng(model_ss))


def make_corpus(data: DataConfig) -> SynthCorpus:
    return SynthCorpus(vocab_for(data), seed=data.corpus_seed, num_motifs=data.num_motifs)


def eval_batches(corpus: SynthCorpus, data: DataConfig, n: int, batch_size: int):
    # held-out stream independent of every training seed
    rng = np.random.default_rng(np.random.SeedSequence([data.corpus_seed, 31337]))
    return [span_batch(corpus, batch_size, data.seq_len, rng, data.mean_span,
                       data.corrupt_fraction) for _ in range(n)]


def evaluate(params: Params, batches) -> float:
    """Negative log perplexity (mean eval-mode cross-entropy, negated)."""
    if not batches:
        return float("nan")
    ces = [lm_loss(params, b, "eval")[0].item() for b in batches]
    return -float(np.mean(ces))


def _sentinel_counts(aux, num_experts: int, vocab: Vocab, counts: dict) -> dict:
    for layer in aux.moe_layers:
        c = counts.setdefault(layer.name, np.zeros(num_experts))
        for g in layer.groups:
            sel = g.token_mask & vocab.is_sentinel(g.token_ids)
            np.add.at(c, g.decision.experts[sel, 0], 1)
    return counts


def sentinel_entropy(params: Params, batches, vocab: Vocab) -> dict[str, float]:
    """Per expert layer: entropy of the top-1 expert over routed sentinel tokens."""
    counts: dict[str, np.ndarray] = {}
    for b in batches:
        aux = forward_span_corruption(params, b, "eval")[1]
        _sentinel_counts(aux, params.config.num_experts, vocab, counts)
    return {k: entropy(v) for k, v in counts.items()}


def loss_step(params: Params, batch, loss_cfg: LossConfig, mode: str, rng):
    ce, lb, z, logits, aux = lm_loss(params, batch, mode, rng)
    tot = total_loss(ce, lb, z, loss_cfg)
    return tot, ce, lb, z, aux


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, params: Params | None = None,
          opt_state: AdamState | None = None, batch_fn=None, evaluate_fn=None
          ) -> tuple[RunReport, Checkpoint]:
    """Run the optimisation loop and return the per-step report and final state.

    ``batch_fn(step, rng)`` overrides the span-corruption batches (used by
    fine-tuning); ``evaluate_fn(params)`` overrides the held-out quality.
    """
    cfg = effective_model_config(model_cfg, train_cfg) if params is None else params.config
    if params is None:
        params = build_model(cfg, train_cfg.seed)
    streams = make_streams(train_cfg.seed)
    data = train_cfg.data
    corpus = make_corpus(data) if batch_fn is None else None
    if batch_fn is None:
        def batch_fn(step, rng):
            return span_batch(corpus, train_cfg.batch_size, data.seq_len, rng, data.mean_span,
                              data.corrupt_fraction)

    state = None if train_cfg.reset_optimizer_state else (copy.deepcopy(opt_state) if opt_state else None)
    opt = Adam(train_cfg.beta1, train_cfg.beta2, clip=train_cfg.clip_update, state=state)
    trainable = subset_names(params, train_cfg.trainable_subset)
    report = RunReport()
    initial = None
    for step in range(train_cfg.steps):
        lr = inverse_sqrt_lr(step, train_cfg.lr, train_cfg.warmup_steps)
        batch = batch_fn(step, streams.data)
        try:
            tot, ce, lb, z, aux = loss_step(params, batch, train_cfg.loss, "train", streams.model)
        except (DivergenceError, FloatingPointError) as exc:
            report.diverged, report.divergence_step = True, step
            report.divergence_reason = str(exc)
            break
        row = StepRow(step, float(lr), ce.item(), lb.item(), z.item(), tot.item(),
                      drop_fraction(aux), max_router_logit(aux))
        report.rows.append(row)
        initial = row.total if initial is None else initial
        if not math.isfinite(row.total) or row.total > train_cfg.divergence_threshold * initial:
            report.diverged, report.divergence_step = True, step
            report.divergence_reason = (f"loss {row.total:.4g} exceeds "
                                        f"{train_cfg.divergence_threshold:g}x initial {initial:.4g}")
            break
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            log.info("step %d total %.4f ce %.4f", step, row.total, row.ce)
        tensors = [params[n] for n in trainable]
        grads = T.gradients_of(tot, tensors)
        if not all(np.isfinite(g).all() for g in grads):
            report.diverged, report.divergence_step = True, step
            report.divergence_reason = "non-finite gradient"
            break
        if lr != 0.0:
            updated = opt.step(params.arrays(), dict(zip(trainable, grads)), lr)
            params = params.replace(updated)
        else:
            opt.state.step += 1
    if evaluate_fn is not None:
        report.quality = evaluate_fn(params)
    elif train_cfg.eval_batches and not report.diverged:
        held = eval_batches(make_corpus(data), data, train_cfg.eval_batches, train_cfg.batch_size)
        report.quality = evaluate(params, held)
        report.layer_entropy = sentinel_entropy(params, held[:1], vocab_for(data))
    ckpt = Checkpoint(params, opt.state, {"steps": len(report.rows), "seed": train_cfg.seed})
    return report, ckpt


# -- fine-tuning ----------------------------------------------------------

SMALL_N = 256
LARGE_N = 16384


@dataclass
class FinetuneConfig:
    num_train: int = SMALL_N
    num_heldout: int = 256
    num_classes: int = 4
    label_noise: float = 0.0
    task_seed: int = 7
    eval_every: int = 10
    stop_at_full_train_acc: bool = False


@dataclass
class FinetuneRow:
    step: int
    loss: float
    train_acc: float
    heldout_acc: float
    drop_fraction: float


FINETUNE_COLUMNS = tuple(f.name for f in fields(FinetuneRow))


@dataclass
class FinetuneReport:
    rows: list[FinetuneRow] = field(default_factory=list)
    steps_to_full_train_acc: int | None = None
    final_train_acc: float = 0.0
    final_heldout_acc: float = 0.0
    diverged: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FINETUNE_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in FINETUNE_COLUMNS])
        return buf.getvalue()

    def best(self) -> FinetuneRow | None:
        """Row with the highest held-out accuracy (earliest on ties).

        ``drop_fraction`` on a row is the mean train-mode drop fraction over
        the steps since the previous evaluation.
        """
        return max(self.rows, key=lambda r: (r.heldout_acc, -r.step)) if self.rows else None


def classification_accuracy(params: Params, task, idx=None, chunk: int = 64) -> tuple[float, float]:
    """(accuracy, drop fraction) in eval mode; prediction = argmax over the label tokens."""
    idx = np.arange(len(task)) if idx is None else np.asarray(idx)
    correct = 0
    cand = drop = 0
    for start in range(0, len(idx), chunk):
        b = task.batch(idx[start:start + chunk])
        logits, aux = forward_span_corruption(params, b, "eval")
        scores = logits.data[:, 0, task.label_tokens]
        correct += int((scores.argmax(axis=1) == task.labels[idx[start:start + chunk]]).sum())
        for layer in aux.moe_layers:
            for g in layer.groups:
                cand += int(g.decision.candidate.sum())
                drop += int(g.decision.dropped.sum())
    return correct / len(idx), (drop / cand if cand else 0.0)


def make_tasks(train_cfg: TrainConfig, ft: FinetuneConfig) -> tuple[ClassificationTask, ClassificationTask]:
    corpus = make_corpus(train_cfg.data)
    seq = train_cfg.data.seq_len
    tr = make_classification(corpus, ft.num_train, seq, ft.num_classes, ft.task_seed, ft.label_noise)
    # held-out labels are clean and drawn from a disjoint seed
    ho = make_classification(corpus, ft.num_heldout, seq, ft.num_classes, ft.task_seed + 1_000_003)
    return tr, ho


def finetune(model_cfg: ModelConfig, train_cfg: TrainConfig, ft: FinetuneConfig,
             params: Params | None = None, opt_state: AdamState | None = None
             ) -> tuple[FinetuneReport, Checkpoint]:
    """Fine-tune on the synthetic classification task, evaluating every ``eval_every`` steps.

    ``params`` may come from a pre-training checkpoint; otherwise the model is
    built from ``model_cfg``.  The trainable subset and optimizer reset come
    from ``train_cfg``.
    """
    task, heldout = make_tasks(train_cfg, ft)
    if params is None:
        params = build_model(effective_model_config(model_cfg, train_cfg), train_cfg.seed)
    streams = make_streams(train_cfg.seed)
    order: list[int] = []
    bs = min(train_cfg.batch_size, len(task))

    def next_batch():
        nonlocal order
        if len(order) < bs:
            order = order + list(streams.data.permutation(len(task)))
        idx, order = order[:bs], order[bs:]
        return task.batch(idx)

    state = None if train_cfg.reset_optimizer_state else (copy.deepcopy(opt_state) if opt_state else None)
    opt = Adam(train_cfg.beta1, train_cfg.beta2, clip=train_cfg.clip_update, state=state)
    trainable = subset_names(params, train_cfg.trainable_subset)
    report = FinetuneReport()

    def record(step, loss, train_drop):
        tr_acc, _ = classification_accuracy(params, task)
        ho_acc = classification_accuracy(params, heldout)[0] if len(heldout) else float("nan")
        report.rows.append(FinetuneRow(step, loss, tr_acc, ho_acc, train_drop))
        if tr_acc == 1.0 and report.steps_to_full_train_acc is None:
            report.steps_to_full_train_acc = step
        return tr_acc

    loss_val = float("nan")
    drops: list[float] = []
    for step in range(train_cfg.steps):
        if step % ft.eval_every == 0:
            acc = record(step, loss_val, float(np.mean(drops)) if drops else 0.0)
            drops = []
            if acc == 1.0 and ft.stop_at_full_train_acc:
                break
        lr = inverse_sqrt_lr(step, train_cfg.lr, train_cfg.warmup_steps)
        tot, ce, lb, z, aux = loss_step(params, next_batch(), train_cfg.loss, "train", streams.model)
        loss_val = tot.item()
        drops.append(drop_fraction(aux))
        if not math.isfinite(loss_val):
            report.diverged = True
            break
        grads = T.gradients_of(tot, [params[n] for n in trainable])
        params = params.replace(opt.step(params.arrays(), dict(zip(trainable, grads)), lr))
    else:
        record(train_cfg.steps, loss_val, float(np.mean(drops)) if drops else 0.0)
    last = report.rows[-1]
    report.final_train_acc, report.final_heldout_acc = last.train_acc, last.heldout_acc
    return report, Checkpoint(params, opt.state, {"steps": train_cfg.steps, "seed": train_cfg.seed})


# -- parallel runs --------------------------------------------------------

def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("ST_MOE_THREADS", "1") or 1)
    return max(1, int(workers))


def run_jobs(fn, jobs: list, workers: int | None = None) -> list:
    """Apply ``fn`` to every job, in worker processes when ``workers > 1``.

    Results come back in job order regardless of completion order.
    """
    workers = resolve_workers(workers)
    if workers == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def sign_test_p(wins: int, n: int) -> float:
    """One-sided binomial sign test: P(X >= wins) for X ~ Bin(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


# -- stability study ------------------------------------------------------

STABILITY_VARIANTS = ("baseline", "remove_geglu", "remove_rms_scale", "input_jitter",
                      "dropout", "update_clipping", "z_loss")


@dataclass
class StudyConfig:
    seeds: list[int] = field(default_factory=lambda: list(range(8)))
    variants: list[str] = field(default_factory=lambda: list(STABILITY_VARIANTS))
    aggressive_lr: float = 1.0
    c_z: float = 1e-3
    jitter_eps: float = 1e-2
    dropout_rate: float = 0.1
    clip_update: float = 0.1
    workers: int | None = None
    # fine-tuning sweep grid and drop robustness
    batch_sizes: list[int] = field(default_factory=lambda: [8, 16, 32])
    learning_rates: list[float] = field(default_factory=lambda: [1e-3, 3e-3, 1e-2])
    reset_flags: list[bool] = field(default_factory=lambda: [False, True])
    capacity_factors: list[float] = field(default_factory=lambda: [0.75, 1.0, 1.25, 2.0])
    top_ns: list[int] = field(default_factory=lambda: [1, 2, 3])
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    # mesh planner inputs; mesh_experts defaults to the model's expert count
    mesh_cores: int = 32
    mesh_data: int = 8
    mesh_model: int = 4
    mesh_experts: int | None = None

    def __post_init__(self):
        if len(self.seeds) < 2:
            raise ConfigError("study.seeds", "need at least 2 seeds per variant")
        bad = [v for v in self.variants if v not in STABILITY_VARIANTS]
        if bad:
            raise ConfigError("study.variants", f"unknown variants {bad}; expected {STABILITY_VARIANTS}")


def variant_configs(variant: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    study: StudyConfig) -> tuple[ModelConfig, TrainConfig]:
    """Model/train configs for one stability variant.  The baseline has no z-loss."""
    tc = copy.deepcopy(train_cfg)
    tc.lr = study.aggressive_lr
    tc.loss = LossConfig(train_cfg.loss.c_b, 0.0)
    if variant == "remove_geglu":
        tc.ablation.remove_geglu = True
    elif variant == "remove_rms_scale":
        tc.ablation.remove_rms_scale = True
    elif variant == "input_jitter":
        tc.noise.input_jitter, tc.noise.jitter_eps = True, study.jitter_eps
    elif variant == "dropout":
        tc.noise.dropout = study.dropout_rate
    elif variant == "update_clipping":
        tc.clip_update = study.clip_update
    elif variant == "z_loss":
        tc.loss = LossConfig(train_cfg.loss.c_b, study.c_z)
    elif variant != "baseline":
        raise ConfigError("study.variants", f"unknown variant {variant!r}")
    return copy.deepcopy(model_cfg), tc


@dataclass
class StudyRun:
    variant: str
    seed: int
    diverged: bool
    quality: float
    late_max_logit: float
    steps: int


STUDY_RUN_COLUMNS = tuple(f.name for f in fields(StudyRun))


@dataclass
class StudyRow:
    variant: str
    num_seeds: int
    fraction_stable: float
    mean_quality: float
    std_quality: float
    mean_late_max_logit: float


STUDY_ROW_COLUMNS = tuple(f.name for f in fields(StudyRow))


def late_mean(values: np.ndarray) -> float:
    """Mean over the last 50% of steps."""
    if values.size == 0:
        return float("nan")
    return float(values[len(values) // 2:].mean())


def _study_job(job) -> StudyRun:
    variant, seed, model_cfg, train_cfg = job
    tc = replace(train_cfg, seed=seed)
    report, _ = train(model_cfg, tc)
    q = report.quality if report.quality is not None else float("nan")
    return StudyRun(variant, seed, report.diverged, float(q),
                    late_mean(report.column("max_router_logit")), len(report.rows))


def stability_study(model_cfg: ModelConfig, train_cfg: TrainConfig, study: StudyConfig
                    ) -> tuple[list[StudyRow], list[StudyRun]]:
    jobs = []
    for variant in sorted(study.variants):
        mc, tc = variant_configs(variant, model_cfg, train_cfg, study)
        jobs += [(variant, seed, mc, tc) for seed in sorted(study.seeds)]
    runs = run_jobs(_study_job, jobs, study.workers)
    runs.sort(key=lambda r: (r.variant, r.seed))
    return summarize_study(runs), runs


def summarize_study(runs: list[StudyRun]) -> list[StudyRow]:
    rows = []
    for variant in sorted({r.variant for r in runs}):
        rs = [r for r in runs if r.variant == variant]
        q = np.array([r.quality for r in rs if not r.diverged and math.isfinite(r.quality)])
        rows.append(StudyRow(variant, len(rs), sum(not r.diverged for r in rs) / len(rs),
                             float(q.mean()) if q.size else float("nan"),
                             float(q.std()) if q.size else float("nan"),
                             float(np.mean([r.late_max_logit for r in rs]))))
    return rows


@dataclass
class ZLossEffect:
    seeds: list[int]
    stable_without: float
    stable_with: float
    logit_without: list[float]
    logit_with: list[float]
    wins: int
    p_value: float


def zloss_effect(model_cfg: ModelConfig, train_cfg: TrainConfig, study: StudyConfig) -> ZLossEffect:
    """Paired baseline vs z-loss runs; a win is a strictly smaller late max |logit|."""
    sub = replace(study, variants=["baseline", "z_loss"])
    _, runs = stability_study(model_cfg, train_cfg, sub)
    base = {r.seed: r for r in runs if r.variant == "baseline"}
    zl = {r.seed: r for r in runs if r.variant == "z_loss"}
    seeds = sorted(base)
    lw = [base[s].late_max_logit for s in seeds]
    lz = [zl[s].late_max_logit for s in seeds]
    wins = sum(b > z for b, z in zip(lw, lz))
    return ZLossEffect(seeds, sum(not base[s].diverged for s in seeds) / len(seeds),
                       sum(not zl[s].diverged for s in seeds) / len(seeds), lw, lz, wins,
                       sign_test_p(wins, len(seeds)))


# -- fine-tuning sweep and dropped-token robustness -----------------------

@dataclass
class SweepRow:
    model: str
    batch_size: int
    lr: float
    reset_optimizer_state: bool
    final_train_acc: float
    final_heldout_acc: float
    best_heldout_acc: float


SWEEP_COLUMNS = tuple(f.name for f in fields(SweepRow))


def _sweep_job(job) -> SweepRow:
    label, ckpt, tc, ft = job
    report, _ = finetune(ckpt.config, tc, ft, ckpt.params, ckpt.opt_state)
    best = report.best()
    return SweepRow(label, tc.batch_size, tc.lr, tc.reset_optimizer_state, report.final_train_acc,
                    report.final_heldout_acc, best.heldout_acc if best else float("nan"))


def finetune_sweep(checkpoints: dict[str, Checkpoint], train_cfg: TrainConfig, ft: FinetuneConfig,
                   study: StudyConfig) -> list[SweepRow]:
    """Batch size x learning rate x optimizer-reset grid for every named checkpoint."""
    jobs = []
    for label in sorted(checkpoints):
        for bs in study.batch_sizes:
            for lr in study.learning_rates:
                for reset in study.reset_flags:
                    tc = replace(train_cfg, batch_size=bs, lr=lr, reset_optimizer_state=reset)
                    jobs.append((label, checkpoints[label], tc, ft))
    return run_jobs(_sweep_job, jobs, study.workers)


@dataclass
class DropRow:
    train_cf: float
    eval_cf: float
    aux: bool
    drop_pct: float
    heldout_acc: float


DROP_COLUMNS = tuple(f.name for f in fields(DropRow))


def with_capacity(params: Params, train_cf: float, eval_cf: float) -> Params:
    cfg = copy.deepcopy(params.config)
    cfg.router.train_cf, cfg.router.eval_cf = train_cf, eval_cf
    cfg.validate()
    out = Params(cfg)
    out.tensors, out.groups = dict(params.tensors), dict(params.groups)
    return out


def _drop_job(job) -> DropRow:
    ckpt, cf, eval_cf, aux, tc, ft = job
    tc = replace(tc, loss=LossConfig(tc.loss.c_b if aux else 0.0, tc.loss.c_z))
    params = with_capacity(ckpt.params, cf, eval_cf)
    report, _ = finetune(params.config, tc, ft, params, ckpt.opt_state)
    best = report.best()
    # rows after step 0 each carry the mean drop of the steps since the previous one
    drops = [r.drop_fraction for r in report.rows if r.step > 0]
    pct = 100.0 * float(np.mean(drops)) if drops else 0.0
    return DropRow(cf, eval_cf, aux, pct, best.heldout_acc)


def drop_robustness(ckpt: Checkpoint, train_cfg: TrainConfig, ft: FinetuneConfig,
                    study: StudyConfig, aux_settings=(True, False), eval_cf: float | None = None
                    ) -> list[DropRow]:
    eval_cf = ckpt.config.router.eval_cf if eval_cf is None else eval_cf
    jobs = [(ckpt, cf, eval_cf, aux, train_cfg, ft)
            for aux in aux_settings for cf in sorted(study.capacity_factors)]
    rows = run_jobs(_drop_job, jobs, study.workers)
    return sorted(rows, key=lambda r: (not r.aux, r.train_cf))


# -- routing tracer -------------------------------------------------------

def trace_tokens(params: Params, batch, path, vocab: Vocab) -> dict[str, float]:
    """Write the line-JSON routing trace for ``batch``; return sentinel entropy per layer."""
    aux = forward_span_corruption(params, batch, "eval")[1]
    write_trace(path, (rec for layer in aux.moe_layers for g in layer.groups
                       for rec in trace_records(layer.name, g.decision, g.token_ids,
                                                g.positions, g.sequences)))
    counts = _sentinel_counts(aux, params.config.num_experts, vocab, {})
    return {k: entropy(v) for k, v in counts.items()}


def table_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in columns])
    return buf.getvalue()


# -- routing benchmark ----------------------------------------------------

@dataclass
class BenchRow:
    algorithm: str
    top_n: int
    train_cf: float
    eval_cf: float
    quality: float
    train_drop_fraction: float
    eval_drop_fraction: float


BENCH_COLUMNS = tuple(f.name for f in fields(BenchRow))


def _bench_job(job) -> BenchRow:
    top_n, cf, model_cfg, train_cfg = job
    mc = copy.deepcopy(model_cfg)
    mc.router.top_n, mc.router.train_cf = top_n, cf
    mc.validate()
    report, ckpt = train(mc, replace(train_cfg, eval_batches=max(1, train_cfg.eval_batches)))
    data = train_cfg.data
    held = eval_batches(make_corpus(data), data, max(1, train_cfg.eval_batches), train_cfg.batch_size)
    eval_drop = float(np.mean([drop_fraction(lm_loss(ckpt.params, b, "eval")[4]) for b in held]))
    q = report.quality if report.quality is not None else float("nan")
    return BenchRow(f"top-{top_n}", top_n, cf, mc.router.eval_cf, float(q),
                    late_mean(report.column("drop_fraction")), eval_drop)


def routing_bench(model_cfg: ModelConfig, train_cfg: TrainConfig, study: StudyConfig) -> list[BenchRow]:
    """Train one model per (top-n, train capacity factor) and report held-out quality."""
    jobs = [(n, cf, model_cfg, train_cfg) for n in sorted(study.top_ns)
            for cf in sorted(study.capacity_factors) if n <= model_cfg.num_experts]
    return run_jobs(_bench_job, jobs, study.workers)

"""End-to-end run driver: stages, artifacts and the manifest that ties them together.

Everything lives under ``RunConfig.run_dir``::

    data/{train,tune,dev}.jsonl, data/vocab.txt, data/spec.json
    teacher.dfwt        full model after teacher training
    student_init.dfwt   weights transferred to the decomposed model
    student.dfwt        fine-tuned decomposed model
    cache.dfrm          layer-k states of the dev passages, from student.dfwt
    reports/<stage>.txt and reports/<stage>.jsonl
    manifest.json       per stage: input key and sha256 of every output

A stage is skipped when the manifest holds the same input key (its own
settings plus the hashes of the artifacts it reads) and its outputs still
hash to the recorded values. The cache is built after fine-tuning because
its states must come from the weights that will serve queries.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .analysis import divergence_profile, passage_variance_profile, sparkline
from .cache import BF16, F32, CacheFile, encode_and_store
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticTaskSpec, encode_examples, gen_data, read_jsonl
from .decomposed import DeformerModel, deformer_forward, transfer_weights
from .encoder import EncoderWeights, ModelConfig, forward, pack_pair
from .errors import ConfigurationError, DependencyError, StaleArtifactError
from .evaluation import evaluate_spans, retention
from .losses import LossWeights
from .metering import (BERT_BASE, BERT_LARGE, CostParams, cost_decomposed, cost_original,
                       count_oracle, flops_decomposed, flops_full, memory_reduction)
from .teacher import TrainSettings, train_teacher
from .training import FineTuneSettings, fine_tune, history_lines
from .tuner import bo_tune, trial_lines
from .vocab import Vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    run_dir: Path = Path("run")
    # data
    n_keys: int = 12
    n_values: int = 12
    min_pairs: int = 2
    max_pairs: int = 4
    min_span: int = 1
    max_span: int = 2
    n_train: int = 4000
    n_dev: int = 400
    data_seed: int = 0
    # model
    n_layers: int = 4
    hidden_dim: int = 32
    n_heads: int = 4
    ffn_dim: int = 64
    k: int = 2
    model_seed: int = 0
    # training
    teacher_steps: int = 3000
    teacher_lr: float = 2e-3
    finetune_steps: int = 3000
    finetune_lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    gamma: float = 0.7
    alpha: float = 1.1
    beta: float = 0.5
    include_split_layer: bool = False
    use_tuned_weights: bool = False
    max_span_len: int = 2
    eval_every: int = 500
    # tuning
    tune_iterations: int = 50
    tune_steps: int = 300
    tune_seed: int = 0
    # cache
    precision: str = "f32"
    # profile and cost
    profile_preset: str = "run"
    profile_q_len: int = 0
    profile_p_len: int = 0
    g_u: float = 2.48
    n_seq: float = 30e6
    cost_batch: int = 640
    t_b_original: float = 4.6
    t_b_decomposed: float = 1.4
    storage_gb: float = 226.0
    s_u: float = 0.02
    r_u: float = 0.004
    # analysis
    analysis_passages: int = 100
    analysis_questions: int = 5
    divergence_metric: str = "euclidean"

    def __post_init__(self):
        object.__setattr__(self, "run_dir", Path(self.run_dir))
        if not 0 <= self.k <= self.n_layers:
            raise ConfigurationError(f"k={self.k} outside [0, {self.n_layers}]")
        if self.precision not in ("f32", "bf16"):
            raise ConfigurationError("precision must be f32 or bf16")
        if self.profile_preset not in ("run", "bert-base", "bert-large"):
            raise ConfigurationError("profile_preset must be run, bert-base or bert-large")

    def task_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(self.n_keys, self.n_values, (self.min_pairs, self.max_pairs),
                                 (self.min_span, self.max_span), self.n_train, self.n_dev,
                                 seed=self.data_seed)

    def model_config(self, vocab_size: int) -> ModelConfig:
        spec = self.task_spec()
        q_max, p_max = spec.max_question_len, spec.max_passage_len
        return ModelConfig(self.n_layers, self.hidden_dim, self.n_heads, self.ffn_dim,
                           vocab_size, q_max + p_max + 3, q_max, p_max, seed=self.model_seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.gamma, self.alpha, self.beta)

    def cost_params(self, t_b: float) -> CostParams:
        return CostParams(self.g_u, self.n_seq, self.cost_batch, t_b, self.storage_gb,
                          self.s_u, self.r_u)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["run_dir"] = str(self.run_dir)
        return d


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class Stage:
    name: str
    inputs: tuple[str, ...]         # artifacts read (relative paths)
    outputs: tuple[str, ...]        # artifacts written
    settings: tuple[str, ...]       # RunConfig fields that affect the outputs
    run: Callable[["Run"], dict]


class Run:
    """Holds one RunConfig, its directory and manifest."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.dir = config.run_dir
        self.manifest_path = self.dir / "manifest.json"
        self.manifest = (json.loads(self.manifest_path.read_text())
                         if self.manifest_path.exists() else {})
        self._producer = {out: s.name for s in STAGES.values() for out in s.outputs}

    def path(self, rel: str) -> Path:
        return self.dir / rel

    # -- artifact access -------------------------------------------------
    def _check_input(self, rel: str) -> str:
        producer = self._producer.get(rel, "?")
        if not self.path(rel).exists():
            raise DependencyError(f"{rel} is missing; run the '{producer}' stage first")
        digest = _sha256(self.path(rel))
        recorded = self.manifest.get(producer, {}).get("outputs", {}).get(rel)
        if recorded is not None and recorded != digest:
            raise StaleArtifactError(
                f"{rel} changed since the '{producer}' stage wrote it; rerun that stage")
        return digest

    def vocab(self) -> Vocab:
        return Vocab.load(self.path("data/vocab.txt"))

    def split(self, name: str):
        return encode_examples(read_jsonl(self.path(f"data/{name}.jsonl")), self.vocab())

    def teacher(self) -> EncoderWeights:
        w = load_checkpoint(self.path("teacher.dfwt"))
        if isinstance(w, DeformerModel):
            raise StaleArtifactError("teacher.dfwt holds a decomposed model")
        expected = self.config.model_config(len(self.vocab()))
        if w.config != expected:
            raise StaleArtifactError("teacher.dfwt was trained with a different model config")
        return w

    def student(self, name: str = "student.dfwt") -> DeformerModel:
        m = load_checkpoint(self.path(name))
        if not isinstance(m, DeformerModel):
            raise StaleArtifactError(f"{name} holds a full model")
        if m.k != self.config.k:
            raise StaleArtifactError(f"{name} has k={m.k}, config asks for k={self.config.k}")
        return m

    def cache(self, model: DeformerModel) -> CacheFile:
        cache = CacheFile(self.path("cache.dfrm"))
        if cache.k != model.k:
            raise StaleArtifactError(f"cache.dfrm was built with k={cache.k}, model has k={model.k}")
        if cache.fingerprint != model.weights.fingerprint:
            raise StaleArtifactError("cache.dfrm was built from different weights")
        return cache

    def report(self, stage: str, text: str, records: list[dict] | str) -> None:
        out = self.path("reports")
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stage}.txt").write_text(text)
        lines = records if isinstance(records, str) else "".join(
            json.dumps(r, sort_keys=True) + "\n" for r in records)
        (out / f"{stage}.jsonl").write_text(lines)

    # -- stage execution ---------------------------------------------------
    def stage_key(self, stage: Stage, input_hashes: dict[str, str]) -> str:
        settings = {name: getattr(self.config, name) for name in stage.settings}
        blob = json.dumps({"settings": settings, "inputs": input_hashes}, sort_keys=True,
                          default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def up_to_date(self, stage: Stage, key: str) -> bool:
        rec = self.manifest.get(stage.name)
        if rec is None or rec.get("key") != key:
            return False
        for rel, digest in rec.get("outputs", {}).items():
            if not self.path(rel).exists() or _sha256(self.path(rel)) != digest:
                return False
        return True

    def execute(self, name: str, force: bool = False) -> dict:
        stage = STAGES[name]
        hashes = {rel: self._check_input(rel) for rel in stage.inputs}
        key = self.stage_key(stage, hashes)
        if not force and self.up_to_date(stage, key):
            log.info("%s: up to date, skipped", name)
            return {"stage": name, "skipped": True}
        self.dir.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        summary = stage.run(self)
        outputs = [rel for rel in stage.outputs if self.path(rel).exists()]
        outputs += [f"reports/{name}.{ext}" for ext in ("txt", "jsonl")
                    if self.path(f"reports/{name}.{ext}").exists()]
        self.manifest[name] = {"key": key,
                               "outputs": {rel: _sha256(self.path(rel)) for rel in outputs}}
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")
        summary = dict(summary, stage=name, skipped=False,
                       seconds=round(time.perf_counter() - started, 3))
        return summary


# ---------------------------------------------------------------------------
# Stage bodies


def _gen_data(run: Run) -> dict:
    paths = gen_data(run.config.task_spec(), run.path("data"))
    counts = {name: sum(1 for _ in open(p)) for name, p in paths.items()}
    text = "".join(f"{name:6s} {n:6d} examples\n" for name, n in counts.items())
    run.report("gen-data", text, [{"split": k, "examples": v} for k, v in counts.items()])
    return counts


def _train_teacher(run: Run) -> dict:
    c = run.config
    config = c.model_config(len(run.vocab()))
    settings = TrainSettings(steps=c.teacher_steps, lr=c.teacher_lr, batch_size=c.batch_size,
                             eval_every=c.eval_every, max_span_len=c.max_span_len, seed=c.seed)
    dev = run.split("dev")
    w, history = train_teacher(run.split("train"), config, settings, eval_set=dev)
    save_checkpoint(w, run.path("teacher.dfwt"))
    stored = run.teacher()
    metrics = evaluate_spans(stored, dev, c.max_span_len)
    evals = [r for r in history if "em" in r]
    text = "".join(f"step {r['step']:6d} loss {r['loss']:.4f} dev_em {r['em']:.2f}\n"
                   for r in evals)
    text += f"final dev em {metrics['em']:.2f} f1 {metrics['f1']:.2f}\n"
    run.report("train-teacher", text, history)
    return {"dev_em": metrics["em"], "dev_f1": metrics["f1"]}


def _decompose(run: Run) -> dict:
    student = transfer_weights(run.teacher(), run.config.k)
    fp = save_checkpoint(student, run.path("student_init.dfwt"))
    metrics = evaluate_spans(run.student("student_init.dfwt"), run.split("dev"),
                             run.config.max_span_len)
    text = (f"k {run.config.k} fingerprint {fp.hex()[:16]}\n"
            f"zero-shot dev em {metrics['em']:.2f} f1 {metrics['f1']:.2f}\n")
    run.report("decompose", text, [dict(metrics, k=run.config.k)])
    return metrics


def _tuned_weights(run: Run) -> LossWeights:
    path = run.path("reports/tune.jsonl")
    if not path.exists():
        raise DependencyError("use_tuned_weights is set; run the 'tune' stage first")
    best = [json.loads(line) for line in path.read_text().splitlines() if '"best"' in line]
    return LossWeights(*best[-1]["point"])


def _finetune(run: Run) -> dict:
    c = run.config
    weights = _tuned_weights(run) if c.use_tuned_weights else c.loss_weights()
    settings = FineTuneSettings(steps=c.finetune_steps, lr=c.finetune_lr,
                                batch_size=c.batch_size, eval_every=c.eval_every,
                                max_span_len=c.max_span_len, seed=c.seed,
                                include_split_layer=c.include_split_layer)
    model, history = fine_tune(run.student("student_init.dfwt"), run.teacher(),
                               run.split("train"), weights, settings, eval_set=run.split("dev"))
    save_checkpoint(model, run.path("student.dfwt"))
    evals = [r for r in history if "em" in r]
    text = f"weights gamma {weights.gamma:.4g} alpha {weights.alpha:.4g} beta {weights.beta:.4g}\n"
    text += "".join(f"step {r['step']:6d} l_ts {r['l_ts']:.4f} l_kd {r['l_kd']:.4f} "
                    f"l_lrs {r['l_lrs']:.4f} l_total {r['l_total']:.4f} dev_em {r['em']:.2f}\n"
                    for r in evals)
    run.report("finetune", text, history_lines(history))
    return {"dev_em": evals[-1]["em"] if evals else None}


def _encode_cache(run: Run) -> dict:
    model = run.student()
    passages = [ex.passage for ex in run.split("dev")]
    precision = F32 if run.config.precision == "f32" else BF16
    summary = encode_and_store(passages, model, precision, run.path("cache.dfrm"))
    rec = {"entries": summary.entries, "bytes": summary.bytes,
           "payload_bytes": summary.payload_bytes, "offline_flops": summary.offline_flops,
           "precision": run.config.precision}
    text = "".join(f"{k:14s} {v}\n" for k, v in rec.items())
    run.report("encode-cache", text, [rec])
    return rec


def _eval(run: Run) -> dict:
    c = run.config
    dev = run.split("dev")
    teacher = run.teacher()
    student = run.student()
    cache = run.cache(student)
    t = evaluate_spans(teacher, dev, c.max_span_len)
    s = evaluate_spans(student, dev, c.max_span_len)
    sc = evaluate_spans(student, dev, c.max_span_len, cache=cache)
    rows = [{"model": "teacher", **t}, {"model": "deformer", **s},
            {"model": "deformer+cache", **sc}]
    for r in rows[1:]:
        r["em_retention"] = retention(r["em"], t["em"])
        r["f1_retention"] = retention(r["f1"], t["f1"])
    text = f"{'model':16s} {'em':>7s} {'f1':>7s} {'retention':>9s}\n"
    text += "".join(f"{r['model']:16s} {r['em']:7.2f} {r['f1']:7.2f} "
                    f"{r.get('em_retention', 100.0):9.2f}\n" for r in rows)
    run.report("eval", text, rows)
    return {r["model"]: r["em"] for r in rows}


def _profile_shape(run: Run) -> tuple[ModelConfig, int, int, int]:
    c = run.config
    if c.profile_preset == "bert-base":
        config, k = BERT_BASE, 9
    elif c.profile_preset == "bert-large":
        config, k = BERT_LARGE, 20
    else:
        config, k = c.model_config(len(run.vocab())), c.k
    q = c.profile_q_len or (32 if c.profile_preset != "run" else config.q_max)
    p = c.profile_p_len or (286 if c.profile_preset != "run" else config.p_max)
    return config, q, p, k


def _profile(run: Run) -> dict:
    config, q, p, k = _profile_shape(run)
    full = flops_full(config, q, p)
    dec = flops_decomposed(config, q, p, k)
    rec = {"n_layers": config.n_layers, "hidden_dim": config.hidden_dim, "q_len": q,
           "p_len": p, "k": k, "full_online": full.online, "decomposed_online": dec.online,
           "decomposed_offline": dec.offline, "cache_bytes": dec.cache_bytes,
           "speedup": full.online / dec.online,
           "memory_full": full.peak_memory_bytes, "memory_decomposed": dec.peak_memory_bytes,
           "memory_reduction_pct": memory_reduction(config, q, p, k)}
    if run.config.profile_preset == "run":
        w = run.student()
        rng = np.random.default_rng(run.config.seed)
        ids = lambda n: [int(x) for x in rng.integers(4, config.vocab_size, n)]  # noqa: E731
        qi, pi = ids(q), ids(p)
        counted_full = count_oracle(lambda: forward(pack_pair(qi, pi, config), w.weights)).total
        counted_dec = count_oracle(lambda: deformer_forward(qi, pi, w)).total
        rec.update(instrumented_full=counted_full, instrumented_decomposed=counted_dec,
                   analytic_matches=bool(counted_full == full.online
                                         and counted_dec == dec.online + dec.offline))
    width = max(len(k) for k in rec)
    text = "".join(f"{k:{width}s}  {v:,.4g}\n" if isinstance(v, float) else f"{k:{width}s}  {v}\n"
                   for k, v in rec.items())
    run.report("profile", text, [rec, {"by_op_full": full.by_op},
                                 {"by_op_decomposed": dec.by_op}])
    return rec


def _cost(run: Run) -> dict:
    c = run.config
    original = cost_original(c.cost_params(c.t_b_original))
    dec = cost_decomposed(c.cost_params(c.t_b_decomposed))
    rec = {"original": original, "decomposed": dec.total, "decomposed_gpu": dec.gpu,
           "decomposed_reads": dec.reads, "decomposed_storage": dec.storage}
    text = "".join(f"{k:20s} ${v:10.2f}\n" for k, v in rec.items())
    run.report("cost", text, [rec])
    return rec


def analysis_sample(examples, vocab: Vocab, n_passages: int, n_questions: int):
    """Distinct dev passages, each paired with questions about its own keys."""
    seen, passages, questions = set(), [], []
    for ex in examples:
        if ex.passage in seen:
            continue
        seen.add(ex.passage)
        keys = [t for t in ex.passage if vocab.itos[t].startswith("k")]
        qs = [(key,) for key in keys] + [(key, vocab.stoi["?"]) for key in keys]
        if len(qs) < 2:
            continue
        passages.append(ex.passage)
        questions.append(qs[:n_questions])
        if len(passages) == n_passages:
            break
    return passages, questions


def _analyze(run: Run) -> dict:
    c = run.config
    vocab = run.vocab()
    dev = run.split("dev")
    teacher, student = run.teacher(), run.student()
    passages, questions = analysis_sample(dev, vocab, c.analysis_passages,
                                          c.analysis_questions)
    var_t = passage_variance_profile(teacher, passages, questions)
    var_s = passage_variance_profile(student, passages, questions)
    pairs = [(ex.question, ex.passage) for ex in dev[:c.analysis_passages * c.analysis_questions]]
    div = divergence_profile(teacher, student, pairs, metric=c.divergence_metric)
    records = ([{"kind": "variance", "model": "teacher", **r} for r in var_t.records()]
               + [{"kind": "variance", "model": "deformer", **r} for r in var_s.records()]
               + [{"kind": "divergence", **r} for r in div.records()])
    text = (f"passages {len(passages)} questions/passage {var_t.questions_per_passage}\n"
            f"variance teacher   |{sparkline(var_t.raw)}| "
            + " ".join(f"{v:.3g}" for v in var_t.raw) + "\n"
            f"variance deformer  |{sparkline(var_s.raw)}| "
            + " ".join(f"{v:.3g}" for v in var_s.raw) + "\n"
            f"divergence question |{sparkline(div.question)}| "
            + " ".join(f"{v:.3g}" for v in div.question) + "\n"
            f"divergence passage  |{sparkline(div.passage)}| "
            + " ".join(f"{v:.3g}" for v in div.passage) + "\n")
    run.report("analyze", text, records)
    return {"upper_passage_divergence": div.upper_passage(c.k)}


def _tune(run: Run) -> dict:
    c = run.config
    teacher = run.teacher()
    start = run.student("student_init.dfwt")
    train, tune = run.split("train"), run.split("tune")
    settings = FineTuneSettings(steps=c.tune_steps, lr=c.finetune_lr, batch_size=c.batch_size,
                                eval_every=max(c.tune_steps, 1), max_span_len=c.max_span_len,
                                seed=c.seed, include_split_layer=c.include_split_layer)

    def objective(point):
        model, _ = fine_tune(start, teacher, train, LossWeights(*point), settings)
        return evaluate_spans(model, tune, c.max_span_len)["em"]

    best, trials = bo_tune(objective, n_iterations=c.tune_iterations, seed=c.tune_seed)
    text = "".join(f"iter {t.iteration:3d} gamma {t.point[0]:.3f} alpha {t.point[1]:.3f} "
                   f"beta {t.point[2]:.3f} tune_em {t.value:.2f}\n" for t in trials)
    text += f"best iter {best.iteration} tune_em {best.value:.2f}\n"
    run.report("tune", text, trial_lines(trials) + json.dumps(
        {"best": True, **best.as_record()}, sort_keys=True) + "\n")
    return {"best": list(best.point), "tune_em": best.value}


_DATA = ("n_keys", "n_values", "min_pairs", "max_pairs", "min_span", "max_span", "n_train",
         "n_dev", "data_seed")
_MODEL = ("n_layers", "hidden_dim", "n_heads", "ffn_dim", "model_seed")
_FT = ("finetune_steps", "finetune_lr", "batch_size", "seed", "gamma", "alpha", "beta",
       "include_split_layer", "use_tuned_weights", "max_span_len", "eval_every")
_COST = ("g_u", "n_seq", "cost_batch", "t_b_original", "t_b_decomposed", "storage_gb", "s_u",
         "r_u")

STAGES: dict[str, Stage] = {s.name: s for s in [
    Stage("gen-data", (), ("data/train.jsonl", "data/tune.jsonl", "data/dev.jsonl",
                           "data/vocab.txt", "data/spec.json"), _DATA, _gen_data),
    Stage("train-teacher", ("data/train.jsonl", "data/dev.jsonl", "data/vocab.txt"),
          ("teacher.dfwt",), _MODEL + ("teacher_steps", "teacher_lr", "batch_size", "seed",
                                       "max_span_len", "eval_every"), _train_teacher),
    Stage("decompose", ("teacher.dfwt", "data/dev.jsonl"), ("student_init.dfwt",),
          ("k", "max_span_len"), _decompose),
    Stage("tune", ("teacher.dfwt", "student_init.dfwt", "data/train.jsonl", "data/tune.jsonl"),
          (), ("tune_iterations", "tune_steps", "tune_seed") + _FT, _tune),
    Stage("finetune", ("teacher.dfwt", "student_init.dfwt", "data/train.jsonl",
                       "data/dev.jsonl"), ("student.dfwt",), _FT, _finetune),
    Stage("encode-cache", ("student.dfwt", "data/dev.jsonl"), ("cache.dfrm",),
          ("precision", "k"), _encode_cache),
    Stage("eval", ("teacher.dfwt", "student.dfwt", "cache.dfrm", "data/dev.jsonl"), (),
          ("max_span_len", "k"), _eval),
    Stage("profile", ("student.dfwt",), (),
          ("profile_preset", "profile_q_len", "profile_p_len", "k", "seed"), _profile),
    Stage("cost", (), (), _COST, _cost),
    Stage("analyze", ("teacher.dfwt", "student.dfwt", "data/dev.jsonl"), (),
          ("analysis_passages", "analysis_questions", "divergence_metric", "k"), _analyze),
]}

DEFAULT_STAGES = ("gen-data", "train-teacher", "decompose", "finetune", "encode-cache", "eval",
                  "profile", "cost", "analyze")


def run_pipeline(config: RunConfig, stages=DEFAULT_STAGES, force: bool = False) -> list[dict]:
    """Run ``stages`` in order; returns one summary record per stage."""
    run = Run(config)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigurationError(f"unknown stage(s): {', '.join(unknown)}")
    return [run.execute(name, force) for name in stages]

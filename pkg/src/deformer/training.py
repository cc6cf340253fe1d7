"""Fine-tuning a decomposed student against a frozen full teacher."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EncodedExample
from .decomposed import DeformerModel, forward_batch
from .encoder import EncoderWeights, encode_full, pack_batch, qa_head
from .errors import ConfigurationError, NumericalError
from .evaluation import evaluate_spans
from .losses import (LossWeights, DEFAULT_WEIGHTS, kd_loss, lrs_loss, task_loss, total_loss,
                     weighted_total)
from .optim import Adam
from .tensor import no_tape, value_and_grad
from .teacher import sample_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FineTuneSettings:
    steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 32
    warmup: int = 50
    eval_every: int = 250
    max_span_len: int = 2
    seed: int = 0
    include_split_layer: bool = False


def _teacher_targets(teacher: EncoderWeights, pb):
    with no_tape():
        stack = encode_full(pb, teacher)
        dist = qa_head(stack, pb, teacher)
    return dist, stack


def student_loss_fn(student: DeformerModel, teacher: EncoderWeights,
                    batch: Sequence[EncodedExample], weights: LossWeights,
                    include_split_layer: bool = False, parts_out: dict | None = None):
    """Closure over the student's parameters computing L_total for one batch."""
    pb = pack_batch([(ex.question, ex.passage) for ex in batch], student.config)
    starts = [ex.start for ex in batch]
    ends = [ex.end for ex in batch]
    need_kd = weights.alpha > 0
    need_lrs = weights.beta > 0 and student.k < student.config.n_layers
    t_dist, t_stack = _teacher_targets(teacher, pb) if (need_kd or need_lrs) else (None, None)
    n = student.config.n_layers

    def loss(*params):
        model = DeformerModel(student.weights.with_params(params), student.k)
        dist, stack = forward_batch(pb, model)
        l_ts = task_loss(dist, starts, ends)
        l_kd = kd_loss(dist, t_dist) if need_kd else None
        l_lrs = (lrs_loss(stack, t_stack, student.k, n, include_split_layer)
                 if need_lrs else None)
        if parts_out is not None:
            parts_out.update(l_ts=l_ts.item(), l_kd=l_kd.item() if l_kd is not None else 0.0,
                             l_lrs=l_lrs.item() if l_lrs is not None else 0.0)
        return weighted_total(weights, l_ts, l_kd, l_lrs)

    return loss


def fine_tune(student: DeformerModel, teacher: EncoderWeights,
              dataset: Sequence[EncodedExample], weights: LossWeights = DEFAULT_WEIGHTS,
              settings: FineTuneSettings = FineTuneSettings(),
              eval_set: Sequence[EncodedExample] | None = None):
    """Optimise L_total for the student; the teacher is never modified.

    Returns (trained DeformerModel, history). Each history record holds the
    step, the LossBreakdown fields and, at evaluation intervals, ``em``.
    """
    if student.config != teacher.config:
        raise ConfigurationError("teacher and student configurations differ")
    rng = np.random.default_rng(settings.seed)
    opt = Adam(lr=settings.lr, warmup=settings.warmup)
    model = student
    history: list[dict] = []
    for step in range(1, settings.steps + 1):
        batch = sample_batch(dataset, rng, settings.batch_size)
        parts: dict = {}
        fn = student_loss_fn(model, teacher, batch, weights, settings.include_split_layer, parts)
        loss, grads = value_and_grad(fn, model.weights.tensors())
        if not np.isfinite(loss.item()):
            raise NumericalError(f"student loss diverged at step {step}")
        breakdown = total_loss(weights, parts["l_ts"], parts["l_kd"], parts["l_lrs"])
        model = DeformerModel(model.weights.with_params(opt.step(model.weights.tensors(), grads)),
                              model.k)
        rec = {"step": step, "l_ts": breakdown.l_ts, "l_kd": breakdown.l_kd,
               "l_lrs": breakdown.l_lrs, "l_total": breakdown.l_total}
        if eval_set is not None and (step % settings.eval_every == 0 or step == settings.steps):
            rec["em"] = evaluate_spans(model, eval_set, settings.max_span_len)["em"]
            log.info("finetune step %d total %.4f em %.2f", step, breakdown.l_total, rec["em"])
        history.append(rec)
    return model, history


def history_lines(history: Sequence[dict]) -> str:
    """Line-delimited JSON, one record per step."""
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)

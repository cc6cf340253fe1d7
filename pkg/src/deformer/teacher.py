"""Training the full encoder on the task loss alone (the teacher)."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EncodedExample
from .encoder import EncoderWeights, ModelConfig, encode_full, pack_batch, qa_head
from .errors import InputError, NumericalError
from .evaluation import evaluate_spans
from .losses import task_loss
from .optim import Adam
from .tensor import value_and_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 3000
    lr: float = 2e-3
    batch_size: int = 32
    warmup: int = 100
    eval_every: int = 250
    max_span_len: int = 2
    seed: int = 0


def sample_batch(examples: Sequence[EncodedExample], rng: np.random.Generator, size: int):
    idx = rng.integers(0, len(examples), size=size)
    return [examples[i] for i in idx]


def teacher_loss_fn(w: EncoderWeights, batch: Sequence[EncodedExample]):
    pb = pack_batch([(ex.question, ex.passage) for ex in batch], w.config)
    starts = [ex.start for ex in batch]
    ends = [ex.end for ex in batch]

    def loss(*params):
        wp = w.with_params(params)
        return task_loss(qa_head(encode_full(pb, wp), pb, wp), starts, ends)

    return loss


def train_teacher(dataset: Sequence[EncodedExample], config: ModelConfig,
                  settings: TrainSettings = TrainSettings(),
                  eval_set: Sequence[EncodedExample] | None = None,
                  init: EncoderWeights | None = None):
    """Adam on the span NLL. Returns (weights, history records).

    History has one ``{"step", "loss"}`` record per step and an ``"em"``
    field at every evaluation interval (and at the end) when ``eval_set`` is
    given.
    """
    if not dataset:
        raise InputError("empty dataset")
    w = init if init is not None else EncoderWeights.init(config, settings.seed)
    rng = np.random.default_rng(settings.seed)
    opt = Adam(lr=settings.lr, warmup=settings.warmup)
    history: list[dict] = []
    for step in range(1, settings.steps + 1):
        batch = sample_batch(dataset, rng, settings.batch_size)
        loss, grads = value_and_grad(teacher_loss_fn(w, batch), w.tensors())
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"teacher loss diverged at step {step}")
        w = w.with_params(opt.step(w.tensors(), grads))
        rec = {"step": step, "loss": value}
        if eval_set is not None and (step % settings.eval_every == 0 or step == settings.steps):
            rec["em"] = evaluate_spans(w, eval_set, settings.max_span_len)["em"]
            log.info("teacher step %d loss %.4f em %.2f", step, value, rec["em"])
        history.append(rec)
    return w, history

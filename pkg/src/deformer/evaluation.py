"""Span metrics: exact match, token-overlap F1 and teacher retention."""
from __future__ import annotations

from typing import Sequence

from .data import EncodedExample
from .errors import InputError
from .tensor import no_tape

EVAL_BATCH = 256


def span_f1(pred: tuple[int, int], gold: tuple[int, int]) -> float:
    """Harmonic mean of token precision and recall between two inclusive spans."""
    overlap = max(0, min(pred[1], gold[1]) - max(pred[0], gold[0]) + 1)
    if overlap == 0:
        return 0.0
    precision = overlap / (pred[1] - pred[0] + 1)
    recall = overlap / (gold[1] - gold[0] + 1)
    return 2 * precision * recall / (precision + recall)


def score_spans(preds: Sequence[tuple[int, int]], golds: Sequence[tuple[int, int]]) -> dict:
    if not golds:
        raise InputError("empty dataset")
    em = sum(p == g for p, g in zip(preds, golds)) / len(golds)
    f1 = sum(span_f1(p, g) for p, g in zip(preds, golds)) / len(golds)
    return {"em": 100.0 * em, "f1": 100.0 * f1, "n": len(golds)}


def predict_dataset(model, examples: Sequence[EncodedExample], max_span_len: int,
                    cache=None) -> list[tuple[int, int]]:
    """Predicted spans for every example.

    ``model`` is EncoderWeights or DeformerModel. With ``cache`` (an open
    cache file) passages are answered one at a time from cached states,
    falling back to inline encoding on a miss.
    """
    from .decomposed import deformer_forward, predictions
    from .encoder import pack_batch, predict_span, predict_spans

    out: list[tuple[int, int]] = []
    with no_tape():
        if cache is not None:
            for ex in examples:
                entry = cache.lookup_tokens(ex.passage)
                dist, _ = deformer_forward(ex.question, entry if entry is not None else ex.passage,
                                           model)
                out.append(predict_span(*dist.example(0), max_span_len))
            return out
        for i in range(0, len(examples), EVAL_BATCH):
            chunk = examples[i:i + EVAL_BATCH]
            batch = pack_batch([(ex.question, ex.passage) for ex in chunk], model.config)
            dist, _ = predictions(model, batch)
            out.extend(predict_spans(dist, max_span_len))
    return out


def evaluate_spans(model, examples: Sequence[EncodedExample], max_span_len: int,
                   cache=None) -> dict:
    if not examples:
        raise InputError("empty dataset")
    preds = predict_dataset(model, examples, max_span_len, cache)
    return score_spans(preds, [(ex.start, ex.end) for ex in examples])


def retention(student_metric: float, teacher_metric: float) -> float:
    """Student score as a percentage of the teacher's."""
    if teacher_metric == 0:
        return 0.0
    return 100.0 * student_metric / teacher_metric

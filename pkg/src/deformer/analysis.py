"""Diagnostics: how much passage states depend on the question, and how far a
decomposed model drifts from its teacher, layer by layer.

Layer 0 is the embedding output; layer i is the output of encoder layer i.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decomposed import DeformerModel, predictions
from .encoder import EncoderWeights, pack_batch, pack_pair
from .errors import ConfigurationError, InputError
from .tensor import no_tape

SPARK = " .:-=+*#%@"


def centroid_cosine_variance(vectors) -> float:
    """Mean cosine distance of ``vectors`` from their elementwise mean.

    Bitwise-identical inputs return exactly 0.0 so that structurally
    question-independent states are reported as such.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or len(v) < 2:
        raise InputError("need at least two vectors of equal length")
    if np.all(v == v[0]):
        if not np.any(v[0]):
            raise InputError("zero-norm vector")
        return 0.0
    norms = np.linalg.norm(v, axis=1)
    centroid = v.mean(axis=0)
    c_norm = np.linalg.norm(centroid)
    if np.any(norms == 0):
        raise InputError("zero-norm vector")
    if c_norm == 0:
        raise InputError("centroid has zero norm")
    cos = (v @ centroid) / (norms * c_norm)
    return float(np.mean(1.0 - cos))


def min_max(values: Sequence[float]) -> list[float]:
    """Rescale to [0, 1]; a constant profile maps to all zeros."""
    a = np.asarray(values, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return [0.0] * len(a)
    return [float(x) for x in (a - lo) / (hi - lo)]


def sparkline(values: Sequence[float]) -> str:
    norm = min_max(values) if len(values) else []
    return "".join(SPARK[min(int(round(x * (len(SPARK) - 1))), len(SPARK) - 1)] for x in norm)


@dataclass
class VarianceProfile:
    raw: list[float]
    normalized: list[float]
    passages: int
    questions_per_passage: int
    skipped_tokens: int = 0
    mode: str = "token"

    def records(self) -> list[dict]:
        return [{"layer": i, "raw": r, "normalized": z}
                for i, (r, z) in enumerate(zip(self.raw, self.normalized))]

    def lines(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())


@dataclass
class DivergenceProfile:
    question: list[float]
    passage: list[float]
    metric: str = "euclidean"
    pairs: int = 0
    extra: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        return [{"layer": i, "question": q, "passage": p}
                for i, (q, p) in enumerate(zip(self.question, self.passage))]

    def lines(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    def upper_passage(self, k: int) -> float:
        """Mean passage divergence over layers k+1..n."""
        upper = self.passage[k + 1:]
        return float(np.mean(upper)) if upper else 0.0


def _layers(model, question, passage) -> list[np.ndarray]:
    with no_tape():
        _, stack = predictions(model, pack_pair(question, passage, model.config))
    return [t.data[0] for t in stack.layers]


def passage_variance_profile(model: EncoderWeights | DeformerModel,
                             passages: Sequence[Sequence[int]],
                             questions: Sequence[Sequence[Sequence[int]]],
                             layers: Sequence[int] | None = None,
                             mode: str = "token") -> VarianceProfile:
    """Question-conditioned variance of passage representations per layer.

    ``questions[i]`` lists the questions paired with ``passages[i]``. Each
    pair is encoded on its own so that identical passage states really are
    bitwise identical. Token mode scores each passage token across question
    variants and averages; pooled mode first mean-pools the passage tokens.
    """
    if mode not in ("token", "pooled"):
        raise InputError(f"unknown mode {mode!r}")
    if len(passages) != len(questions) or not passages:
        raise InputError("need one question list per passage")
    config = model.config
    chosen = list(range(config.n_layers + 1)) if layers is None else list(layers)
    per_layer = {layer: [] for layer in chosen}
    skipped = 0
    q_count = None
    off = config.passage_offset
    for passage, qs in zip(passages, questions):
        if len(qs) < 2:
            raise InputError("each passage needs at least two questions")
        q_count = len(qs) if q_count is None else min(q_count, len(qs))
        stacks = [_layers(model, q, passage) for q in qs]
        p = len(passage)
        for layer in chosen:
            states = np.stack([s[layer][off:off + p] for s in stacks])  # (Q, p, d)
            if mode == "pooled":
                try:
                    per_layer[layer].append(centroid_cosine_variance(states.mean(axis=1)))
                except InputError:
                    skipped += 1
                continue
            scores = []
            for t in range(p):
                try:
                    scores.append(centroid_cosine_variance(states[:, t]))
                except InputError:
                    skipped += 1
            if scores:
                per_layer[layer].append(float(np.mean(scores)))
    raw = [float(np.mean(per_layer[layer])) if per_layer[layer] else math.nan
           for layer in chosen]
    return VarianceProfile(raw, min_max(raw), len(passages), q_count or 0, skipped, mode)


def _shape_key(config) -> dict:
    d = config.as_dict()
    d.pop("seed", None)
    return d


def divergence_profile(model_a, model_b, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                       metric: str = "euclidean", batch_size: int = 64) -> DivergenceProfile:
    """Mean per-token distance between two models' representations at every layer."""
    if metric not in ("euclidean", "cosine"):
        raise InputError(f"unknown metric {metric!r}")
    if _shape_key(model_a.config) != _shape_key(model_b.config):
        raise ConfigurationError("models do not share a configuration shape")
    if not pairs:
        raise InputError("no pairs to compare")
    n_layers = model_a.config.n_layers + 1
    sums = np.zeros((2, n_layers))
    counts = np.zeros(2)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        batch = pack_batch(chunk, model_a.config)
        with no_tape():
            _, sa = predictions(model_a, batch)
            _, sb = predictions(model_b, batch)
        qb = batch.passage_offset
        blocks = [np.zeros_like(batch.valid), np.zeros_like(batch.valid)]
        blocks[0][:, :qb] = batch.valid[:, :qb]
        blocks[1][:, qb:] = batch.valid[:, qb:]
        for layer in range(n_layers):
            a, b = sa.at(layer).data, sb.at(layer).data
            if metric == "euclidean":
                dist = np.linalg.norm(a - b, axis=-1)
            else:
                na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
                denom = np.where(na * nb > 0, na * nb, 1.0)
                dist = np.maximum(1.0 - (a * b).sum(-1) / denom, 0.0)
                dist = np.where(np.all(a == b, axis=-1), 0.0, dist)  # exact for equal rows
            for i, mask in enumerate(blocks):
                sums[i, layer] += dist[mask].sum()
        counts += [blocks[0].sum(), blocks[1].sum()]
    means = sums / counts[:, None]
    return DivergenceProfile(list(map(float, means[0])), list(map(float, means[1])), metric,
                             len(pairs))

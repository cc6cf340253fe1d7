"""Task, distillation and layerwise-similarity losses and their weighted sum.

Batch convention: every loss is computed per example and averaged over the
batch, so a batch of one gives the per-example value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import HiddenStack, PredictionDistribution
from .errors import InputError, NumericalError, ShapeError
from .tensor import Tensor

KD_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.7  # task
    alpha: float = 1.1  # distillation
    beta: float = 0.5   # layerwise similarity

    def __post_init__(self):
        for name in ("gamma", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.gamma, self.alpha, self.beta)


DEFAULT_WEIGHTS = LossWeights(0.7, 1.1, 0.5)


@dataclass(frozen=True)
class LossBreakdown:
    l_ts: float
    l_kd: float
    l_lrs: float
    l_total: float


def task_loss(pred: PredictionDistribution, starts, ends) -> Tensor:
    """Mean over the batch of -(ln p_start[gold] + ln p_end[gold]) / 2."""
    starts = np.atleast_1d(np.asarray(starts, dtype=np.int64))
    ends = np.atleast_1d(np.asarray(ends, dtype=np.int64))
    b, width = pred.valid.shape
    if starts.shape != (b,) or ends.shape != (b,):
        raise ShapeError("one gold span per example expected")
    rows = np.arange(b)
    for name, idx in (("start", starts), ("end", ends)):
        if ((idx < 0) | (idx >= width)).any() or not pred.valid[rows, idx].all():
            raise InputError(f"gold {name} outside the valid passage slots")
    ps = T.index(pred.start, (rows, starts))
    pe = T.index(pred.end, (rows, ends))
    nll = T.neg(T.log(ps) + T.log(pe)) * 0.5
    return T.sum(nll) * (1.0 / b)


def _kl(pa: Tensor, pb: Tensor) -> Tensor:
    floored = T.maximum(pb, KD_FLOOR)
    return T.sum(T.xlogy(pa, pa) - T.xlogy(pa, floored), axis=-1)


def kd_loss(p_a: PredictionDistribution, p_b: PredictionDistribution) -> Tensor:
    """D_KL(P_A || P_B) summed over the start and end distributions.

    P_A is the decomposed (student) prediction, P_B the full model's. Terms
    with P_A = 0 contribute 0 and P_B is floored at 1e-12.
    """
    if p_a.valid.shape != p_b.valid.shape or not np.array_equal(p_a.valid, p_b.valid):
        raise InputError("distributions have different supports")
    per_example = _kl(p_a.start, p_b.start) + _kl(p_a.end, p_b.end)
    return T.sum(per_example) * (1.0 / p_a.valid.shape[0])


def lrs_layers(k: int, n: int, include_split_layer: bool = False) -> range:
    """Layers compared by the similarity loss: k+1..n (k..n with the switch)."""
    return range(k if include_split_layer else k + 1, n + 1)


def lrs_loss(student: HiddenStack, teacher: HiddenStack, k: int, n: int,
             include_split_layer: bool = False) -> Tensor:
    """Sum over upper layers and non-pad tokens of ||v - u||^2 (batch mean).

    ``teacher`` is treated as a constant.
    """
    if not 0 <= k < n:
        raise InputError(f"need 0 <= k < n, got k={k}, n={n}")
    if student.valid.shape != teacher.valid.shape or not np.array_equal(student.valid,
                                                                        teacher.valid):
        raise ShapeError("student and teacher stacks cover different tokens")
    b = student.valid.shape[0]
    weight = student.valid.astype(np.float64)[..., None]
    total = None
    for layer in lrs_layers(k, n, include_split_layer):
        u = student.at(layer)
        v = teacher.at(layer).data
        if u.shape != v.shape:
            raise ShapeError(f"layer {layer}: {u.shape} vs {v.shape}")
        diff = (u - Tensor(v, dtype=u.dtype)) * Tensor(weight, dtype=u.dtype)
        term = T.sum(diff * diff)
        total = term if total is None else total + term
    return total * (1.0 / b)


def weighted_total(weights: LossWeights, l_ts: Tensor, l_kd: Tensor | None,
                   l_lrs: Tensor | None) -> Tensor:
    total = l_ts * weights.gamma
    if l_kd is not None:
        total = total + l_kd * weights.alpha
    if l_lrs is not None:
        total = total + l_lrs * weights.beta
    return total


def total_loss(weights: LossWeights, l_ts: float, l_kd: float, l_lrs: float) -> LossBreakdown:
    parts = [float(getattr(x, "data", x)) for x in (l_ts, l_kd, l_lrs)]
    if not all(math.isfinite(p) for p in parts):
        raise NumericalError(f"non-finite loss component {parts}")
    g, a, b = weights.as_tuple()
    return LossBreakdown(*parts, g * parts[0] + a * parts[1] + b * parts[2])

"""Adam with a constant learning rate after an optional linear warmup."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 1.0


@dataclass
class Adam:
    lr: float = 1e-3
    warmup: int = 0
    clip_norm: float | None = CLIP_NORM
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[Tensor], grads: list[np.ndarray]) -> list[Tensor]:
        """Return updated copies of ``params`` (tensors are immutable)."""
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if self.clip_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        self.step_count += 1
        t = self.step_count
        lr = self.lr * min(1.0, t / self.warmup) if self.warmup else self.lr
        c1 = 1.0 - BETA1 ** t
        c2 = 1.0 - BETA2 ** t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g
            update = lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + ADAM_EPS)
            out.append(Tensor((p.data - update).astype(p.dtype)))
        return out

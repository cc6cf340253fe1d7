"""Bayesian optimisation of the loss weights (gamma, alpha, beta).

Surrogate: zero-mean Gaussian process on inputs rescaled to the unit cube,
outputs standardised, squared-exponential kernel with unit amplitude and a
single length-scale picked from ``LENGTH_SCALES`` by log marginal likelihood,
observation noise ``NOISE``. The first ``N_INITIAL`` trials come from a seeded
Latin hypercube. Later trials maximise expected improvement: EI is scored at
``N_STARTS`` seeded uniform points and the best ``N_REFINE`` are polished
with L-BFGS-B inside the box.

Objectives are maximised. A trial whose objective is not finite is logged
with ``failed=True`` and left out of the surrogate.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import qmc

from .errors import ParameterError
from .losses import LossWeights

DEFAULT_BOUNDS = ((0.1, 2.0),) * 3
LENGTH_SCALES = (0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0)
NOISE = 1e-6
N_INITIAL = 10
N_STARTS = 256
N_REFINE = 5


@dataclass(frozen=True)
class TuneTrial:
    iteration: int
    point: tuple[float, ...]
    value: float
    failed: bool = False

    @property
    def weights(self) -> LossWeights:
        return LossWeights(*self.point)

    def as_record(self) -> dict:
        return {"iteration": self.iteration, "point": list(self.point),
                "value": self.value if not self.failed else None, "failed": self.failed}


def trial_lines(trials: Sequence[TuneTrial]) -> str:
    return "".join(json.dumps(t.as_record(), sort_keys=True) + "\n" for t in trials)


def _check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 2 or len(b) == 0:
        raise ParameterError("bounds must be a sequence of (lo, hi) pairs")
    if not np.all(b[:, 0] < b[:, 1]):
        raise ParameterError("every bound needs lo < hi")
    return b


def _kernel(a: np.ndarray, b: np.ndarray, ell: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return np.exp(-0.5 * d2 / (ell * ell))


class GaussianProcess:
    """Exact GP regression on unit-cube inputs with a grid-fitted length-scale."""

    def __init__(self, x: np.ndarray, y: np.ndarray, noise: float = NOISE,
                 length_scales: Sequence[float] = LENGTH_SCALES):
        self.x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.mean = float(y.mean())
        std = float(y.std())
        self.std = std if std > 0 else 1.0
        self.y = (y - self.mean) / self.std
        self.noise = noise
        best = None
        for ell in length_scales:
            fit = self._fit(ell)
            if fit is not None and (best is None or fit[0] > best[0]):
                best = fit
        if best is None:
            raise ParameterError("no length-scale gave a positive definite kernel")
        self.log_marginal, self.length_scale, self._chol, self._alpha = best

    def _fit(self, ell: float):
        n = len(self.x)
        k = _kernel(self.x, self.x, ell)
        for jitter in (self.noise, 1e-5, 1e-4, 1e-3):
            try:
                chol = cho_factor(k + jitter * np.eye(n), lower=True)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            return None
        alpha = cho_solve(chol, self.y)
        logdet = 2.0 * np.log(np.diag(chol[0])).sum()
        lml = -0.5 * self.y @ alpha - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi)
        return lml, ell, chol, alpha

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation in standardised units."""
        ks = _kernel(np.atleast_2d(x), self.x, self.length_scale)
        mu = ks @ self._alpha
        v = cho_solve(self._chol, ks.T)
        var = np.maximum(1.0 - (ks * v.T).sum(1), 1e-12)
        return mu, np.sqrt(var)


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float) -> np.ndarray:
    z = (mu - best) / sigma
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return (mu - best) * ndtr(z) + sigma * pdf


def _propose(gp: GaussianProcess, dim: int, rng: np.random.Generator) -> np.ndarray:
    best = float(gp.y.max())
    starts = rng.random((N_STARTS, dim))
    mu, sd = gp.predict(starts)
    ei = expected_improvement(mu, sd, best)
    order = np.argsort(-ei)[:N_REFINE]

    def neg_ei(u):
        m, s = gp.predict(u[None, :])
        return -float(expected_improvement(m, s, best)[0])

    champion, champion_val = starts[order[0]], -float(ei[order[0]])
    for i in order:
        res = minimize(neg_ei, starts[i], method="L-BFGS-B", bounds=[(0.0, 1.0)] * dim)
        if res.fun < champion_val:
            champion, champion_val = np.clip(res.x, 0.0, 1.0), float(res.fun)
    return champion


def _evaluate(objective, lo, hi, u, iteration) -> TuneTrial:
    point = tuple(float(v) for v in lo + u * (hi - lo))
    try:
        value = float(objective(point))
    except (FloatingPointError, OverflowError):
        value = math.nan
    if not math.isfinite(value):
        return TuneTrial(iteration, point, math.nan, failed=True)
    return TuneTrial(iteration, point, value)


def bo_tune(objective: Callable[[tuple[float, ...]], float], bounds=DEFAULT_BOUNDS,
            n_iterations: int = 50, seed: int = 0) -> tuple[TuneTrial, list[TuneTrial]]:
    """Maximise ``objective`` over the box; returns (best trial, all trials)."""
    b = _check_bounds(bounds)
    if n_iterations < N_INITIAL:
        raise ParameterError(f"n_iterations must be at least {N_INITIAL}")
    lo, hi, dim = b[:, 0], b[:, 1], len(b)
    rng = np.random.default_rng(seed)
    design = qmc.LatinHypercube(d=dim, seed=rng).random(N_INITIAL)
    trials: list[TuneTrial] = []
    units: list[np.ndarray] = []
    for i in range(n_iterations):
        ok = [j for j, t in enumerate(trials) if not t.failed]
        if i < N_INITIAL or len(ok) < 2:
            u = design[i] if i < N_INITIAL else rng.random(dim)
        else:
            gp = GaussianProcess(np.array([units[j] for j in ok]),
                                 np.array([trials[j].value for j in ok]))
            u = _propose(gp, dim, rng)
        units.append(u)
        trials.append(_evaluate(objective, lo, hi, u, i))
    return best_trial(trials), trials


def random_search(objective: Callable[[tuple[float, ...]], float], bounds=DEFAULT_BOUNDS,
                  n_iterations: int = 50, seed: int = 0) -> tuple[TuneTrial, list[TuneTrial]]:
    """Uniform random baseline with the same budget and failure handling."""
    b = _check_bounds(bounds)
    lo, hi = b[:, 0], b[:, 1]
    rng = np.random.default_rng(seed)
    trials = [_evaluate(objective, lo, hi, rng.random(len(b)), i) for i in range(n_iterations)]
    return best_trial(trials), trials


def best_trial(trials: Sequence[TuneTrial]) -> TuneTrial:
    ok = [t for t in trials if not t.failed]
    if not ok:
        raise ParameterError("every trial failed")
    return max(ok, key=lambda t: t.value)

import math

import numpy as np
import pytest

from deformer.errors import ParameterError
from deformer.tuner import (N_INITIAL, DEFAULT_BOUNDS, GaussianProcess, TuneTrial, best_trial,
                            bo_tune, expected_improvement, random_search, trial_lines)


def quadratic(w):
    return -sum((x - 1.0) ** 2 for x in w)


def _inside(point, bounds=DEFAULT_BOUNDS):
    return all(lo <= x <= hi for x, (lo, hi) in zip(point, bounds))


class TestBoTune:
    def test_bounds_respected(self):
        best, trials = bo_tune(quadratic, n_iterations=20, seed=3)
        assert len(trials) == 20 and all(_inside(t.point) for t in trials)
        assert [t.iteration for t in trials] == list(range(20))
        assert best.value == max(t.value for t in trials)

    def test_constant_objective(self):
        best, trials = bo_tune(lambda w: 1.0, n_iterations=12, seed=0)
        assert _inside(best.point) and not any(t.failed for t in trials)

    def test_failures_skipped(self):
        def flaky(w):
            return math.nan if w[0] > 1.0 else quadratic(w)

        best, trials = bo_tune(flaky, n_iterations=15, seed=1)
        failed = [t for t in trials if t.failed]
        assert failed and all(math.isnan(t.value) for t in failed)
        assert not best.failed and best.point[0] <= 1.0

    def test_seeded(self):
        a = bo_tune(quadratic, n_iterations=12, seed=4)[1]
        b = bo_tune(quadratic, n_iterations=12, seed=4)[1]
        assert a == b

    def test_initial_design_fills_space(self):
        _, trials = bo_tune(lambda w: 0.0, n_iterations=N_INITIAL, seed=2)
        for dim in range(3):
            # Latin hypercube: one point per tenth of every axis
            cells = sorted(int((t.point[dim] - 0.1) / 0.19) for t in trials)
            assert cells == list(range(N_INITIAL))

    def test_quadratic_optimum(self):
        best, _ = bo_tune(quadratic, n_iterations=50, seed=0)
        assert max(abs(x - 1.0) for x in best.point) <= 0.15

    def test_too_few_iterations(self):
        with pytest.raises(ParameterError):
            bo_tune(quadratic, n_iterations=N_INITIAL - 1)

    @pytest.mark.parametrize("bounds", [((1.0, 1.0),), ((2.0, 0.1),), ()])
    def test_bad_bounds(self, bounds):
        with pytest.raises(ParameterError):
            bo_tune(quadratic, bounds=bounds, n_iterations=10)


class TestPieces:
    def test_random_search_same_budget(self):
        best, trials = random_search(quadratic, n_iterations=30, seed=0)
        assert len(trials) == 30 and all(_inside(t.point) for t in trials)

    def test_all_failed(self):
        with pytest.raises(ParameterError):
            best_trial([TuneTrial(0, (1.0,), math.nan, failed=True)])

    def test_gp_interpolates(self):
        rng = np.random.default_rng(0)
        x = rng.random((8, 2))
        y = np.sin(3 * x[:, 0]) + x[:, 1]
        gp = GaussianProcess(x, y)
        mu, sd = gp.predict(x)
        np.testing.assert_allclose(mu * gp.std + gp.mean, y, atol=1e-3)
        assert np.all(sd < 1e-2)

    def test_expected_improvement(self):
        ei = expected_improvement(np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, 1e-12]), 1.0)
        assert np.all(ei >= 0)
        assert ei[1] == pytest.approx(1 / math.sqrt(2 * math.pi))
        assert ei[2] == pytest.approx(1.0)

    def test_trial_log(self):
        trials = [TuneTrial(0, (0.5, 0.5, 0.5), 2.0), TuneTrial(1, (1.0, 1.0, 1.0), math.nan, True)]
        lines = trial_lines(trials).splitlines()
        assert len(lines) == 2 and '"value": null' in lines[1]
        assert trials[0].weights.as_tuple() == (0.5, 0.5, 0.5)

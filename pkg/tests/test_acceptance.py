#!/usr/bin/env python3
"""
Long-run statistical checks on Env B in d = 3.

Every test here is marked slow; run with `pytest -m slow`.
"""

import numpy as np
import pytest

from brwre_core import RunConfig
from brwre_env import load_environment
from brwre_oracle import two_walk_series
from brwre_stats import ALIVE
from ensemble_manager import run_ensemble

POPULATION_ONLY = {
    "DensityStats": {"enabled": False},
    "YStatistics": {"enabled": False},
    "CltMoments": {"enabled": False},
    "CosineSpotCheck": {"enabled": False},
}

pytestmark = pytest.mark.slow


class TestMartingaleEnsemble:
    """2 * 10^4 replicas up to t = 50."""

    @pytest.fixture(scope="class")
    def ensemble(self):
        config = RunConfig(dimension=3, horizon=50, replicas=20_000, env_seed=11, particle_seed=12).validate()
        summary, _ = run_ensemble(config, POPULATION_ONLY)
        return summary

    def test_mean_is_one(self, ensemble):
        """E[Nbar_t] = 1 within 3 standard errors for every t <= 50."""
        mean = ensemble.mean('Nbar_t')
        se = ensemble.se('Nbar_t')
        for t in range(1, 51):
            assert abs(mean[t] - 1.0) <= 3 * se[t], t

    def test_survival_at_horizon(self, ensemble):
        """Some replicas are still alive at t = 50."""
        assert ensemble.survival.loc[50] > 0

    def test_second_moment_bridge(self, ensemble):
        """E[Nbar_t^2] matches the two-walk series at t = 2, 5, 10."""
        series = two_walk_series(load_environment("env-b"), 3, 10)
        mean = ensemble.mean('Nbar_t_sq')
        se = ensemble.se('Nbar_t_sq')
        for t in (2, 5, 10):
            assert abs(mean[t] - series.second_moment[t]) <= 3 * se[t], t


class TestCltMoments:
    """Survival-conditioned moments of rho_200 against N(0, I/3)."""

    @pytest.fixture(scope="class")
    def survivors(self):
        config = RunConfig(
            dimension=3, horizon=200, replicas=600, env_seed=21, particle_seed=22,
            moment_indices=[[1], [2], [4]], y_indices=[], cosine_frequencies=[[1.0]],
        ).validate()
        _, frame = run_ensemble(config, {"YStatistics": {"enabled": False}})
        final = frame[(frame['t'] == 200) & (frame['status'] == ALIVE)]
        assert len(final) >= 200
        return final

    def test_second_moment(self, survivors):
        """Within 5% of 1/3."""
        assert survivors['Mrho_2_0_0'].mean() == pytest.approx(1 / 3, rel=0.05)

    def test_fourth_moment(self, survivors):
        """Within 10% of 1/3."""
        assert survivors['Mrho_4_0_0'].mean() == pytest.approx(1 / 3, rel=0.10)

    def test_odd_moment(self, survivors):
        """Centered within 3 standard errors."""
        values = survivors['Mrho_1_0_0']
        se = values.std(ddof=1) / np.sqrt(len(values))
        assert abs(values.mean()) <= 3 * se

    def test_cosine_limit(self, survivors):
        """Bounded spot check near exp(-1/6)."""
        assert survivors['cos_0'].mean() == pytest.approx(np.exp(-1 / 6), abs=0.03)


class TestYDecay:
    """|Y_(2,0,0)(t)| / t shrinks between t = 12 and t = 192."""

    def test_median_halves(self):
        config = RunConfig(
            dimension=3, horizon=192, replicas=120, env_seed=31, particle_seed=32,
            y_indices=[[2]], moment_indices=[], cosine_frequencies=[],
        ).validate()
        stats = {"DensityStats": {"enabled": False}, "CltMoments": {"enabled": False},
                 "CosineSpotCheck": {"enabled": False}}
        _, frame = run_ensemble(config, stats)
        alive = frame[(frame['t'] == 192) & (frame['status'] == ALIVE)]['replica']
        kept = frame[frame['replica'].isin(alive)].set_index(['replica', 't'])['Y_2_0_0']
        early = (kept.xs(12, level='t').abs() / 12).median()
        late = (kept.xs(192, level='t').abs() / 192).median()
        assert late < 0.5 * early


class TestYCentering:
    """Y_n starts at W_n(0, 0) = 0 for |n| >= 1, so its ensemble mean stays at 0."""

    @pytest.fixture(scope="class")
    def ensemble(self):
        config = RunConfig(
            dimension=3, horizon=10, replicas=4000, env_seed=41, particle_seed=42,
            y_indices=[[2], [1, 1], [1]], moment_indices=[], cosine_frequencies=[],
        ).validate()
        stats = {"DensityStats": {"enabled": False}, "CltMoments": {"enabled": False},
                 "CosineSpotCheck": {"enabled": False}}
        summary, _ = run_ensemble(config, stats)
        return summary

    @pytest.mark.parametrize("column", ["Y_2_0_0", "Y_1_1_0", "Y_1_0_0"])
    def test_mean_is_zero(self, ensemble, column):
        """Within 3 standard errors at t = 5 and t = 10."""
        mean = ensemble.mean(column)
        se = ensemble.se(column)
        for t in (5, 10):
            assert se[t] > 0
            assert abs(mean[t]) <= 3 * se[t], t

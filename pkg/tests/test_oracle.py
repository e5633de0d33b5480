#!/usr/bin/env python3
"""
Test Suite for the exact oracles: quenched mean, two-walk series,
brute-force moments and the zeta identity
"""

import random
from fractions import Fraction

import numpy as np
import pytest

from brwre_core import CapError, ConfigError, DomainError
from brwre_env import EnvironmentField, build_environment, load_environment
from brwre_kernels import BESSEL_INTEGRAL, return_probability
from brwre_oracle import (
    DP, RENEWAL, DifferenceDP, brute_force_moments, quenched_mean,
    quenched_mean_monte_carlo, two_walk_series, u_limit, verify_zeta_identity,
)
from brwre_sim import ForcedDraws
from brwre_stats import fit_power_law


def random_exact_environments(count, seed):
    """Two-atom environments with rational pmfs on {0, 1, 2}."""
    rng = random.Random(seed)
    models = []
    for _ in range(count):
        pmfs = []
        for _ in range(2):
            raw = [rng.randint(0, 6) for _ in range(3)]
            raw[rng.randrange(1, 3)] += 1
            total = sum(raw)
            pmfs.append([Fraction(v, total) for v in raw])
        w = Fraction(rng.randint(1, 9), 10)
        models.append(build_environment([(pmfs[0], w), (pmfs[1], 1 - w)]))
    return models


class TestTwoWalkSeries:
    """Test the annealed second-moment series."""

    @pytest.fixture
    def env_b(self):
        return load_environment("env-b")

    def test_first_values(self, env_b):
        """u_1 = alpha; second_moment[1] = m2 / m^2; second_moment[2] = 5.76 / 1.2^4."""
        series = two_walk_series(env_b, 3, 4)
        assert series.u[0] == 1.0
        assert series.u[1] == pytest.approx(5 / 3, abs=1e-15)
        assert series.second_moment[0] == 1.0
        assert series.second_moment[1] == pytest.approx(5 / 3, abs=1e-14)
        assert series.second_moment[2] == pytest.approx(5.76 / 1.2 ** 4, abs=1e-14)
        assert round(series.second_moment[2], 4) == 2.7778

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_dp_and_renewal_agree(self, env_b, d):
        """Both methods agree within 1e-10."""
        dp = two_walk_series(env_b, d, 20, method=DP)
        renewal = two_walk_series(env_b, d, 20, method=RENEWAL)
        assert np.allclose(dp.u, renewal.u, rtol=0, atol=1e-10)
        assert np.allclose(dp.second_moment, renewal.second_moment, rtol=0, atol=1e-10)
        assert np.allclose(dp.overlap, renewal.overlap, rtol=0, atol=1e-10)
        assert dp.truncated_mass < 1e-12

    def test_overlap_below_second_moment(self, env_b):
        """sum_x Nbar_{t,x}^2 <= Nbar_t^2 in expectation."""
        series = two_walk_series(env_b, 3, 50)
        assert np.all(series.overlap <= series.second_moment + 1e-15)

    def test_auto_method(self, env_b):
        """Small boxes use the DP, large ones the renewal recursion."""
        assert two_walk_series(env_b, 3, 10).method == DP
        assert two_walk_series(env_b, 3, 200).method == RENEWAL

    def test_to_frame(self, env_b):
        frame = two_walk_series(env_b, 2, 5).to_frame()
        assert list(frame.columns) == ['t', 'u', 'second_moment', 'overlap']
        assert len(frame) == 6

    def test_invalid_arguments(self, env_b):
        """Horizon, dimension and method checks."""
        with pytest.raises(DomainError):
            two_walk_series(env_b, 3, 0)
        with pytest.raises(DomainError):
            two_walk_series(env_b, 0, 5)
        with pytest.raises(ConfigError):
            two_walk_series(env_b, 3, 5, method="guess")

    def test_small_radius_warns(self, env_b, caplog):
        """A box too small for the horizon reports truncated mass."""
        series = two_walk_series(env_b, 1, 30, method=DP, radius=4)
        assert series.truncated_mass > 1e-12
        assert "truncated mass" in caplog.text


class TestDifferenceDP:
    """Test the dense difference-walk program."""

    def test_symmetry(self):
        """Weights stay invariant under sign flips and permutations."""
        dp = DifferenceDP(3, 5 / 3, 12)
        for _ in range(6):
            dp.step()
        assert dp.is_symmetric()

    def test_mass_without_boost(self):
        """alpha = 1 conserves mass while nothing leaves the box."""
        dp = DifferenceDP(2, 1.0, 10)
        for _ in range(5):
            dp.step()
        assert dp.total_weight() == pytest.approx(1.0, abs=1e-14)
        assert dp.truncated_mass < 1e-14

    def test_bad_radius(self):
        with pytest.raises(ConfigError):
            DifferenceDP(1, 1.0, 0)


class TestBruteForce:
    """Test exact enumeration of E[N_t] and E[N_t^2]."""

    def test_env_b_values(self):
        """E[N_1] = 6/5, E[N_1^2] = 12/5, E[N_2^2] = 5.76."""
        model = load_environment("env-b")
        first, second = brute_force_moments(model, 3, 1)
        assert first == Fraction(6, 5)
        assert second == Fraction(12, 5)
        _, second = brute_force_moments(model, 3, 2)
        assert second == Fraction(144, 25)

    @pytest.mark.parametrize("d", [1, 3])
    def test_agrees_with_series(self, d):
        """E[N_t^2] / m^{2t} = second_moment[t] for t <= 2."""
        model = load_environment("env-b")
        series = two_walk_series(model, d, 2)
        for t in (1, 2):
            _, second = brute_force_moments(model, d, t)
            assert abs(float(second / model.m ** (2 * t)) - series.second_moment[t]) < 1e-12

    def test_random_environments(self):
        """Five randomized rational environments."""
        for model in random_exact_environments(5, seed=2024):
            series = two_walk_series(model, 1, 2, method=DP)
            assert series.second_moment[1] == pytest.approx(float(model.m2 / model.m ** 2), abs=1e-12)
            for t in (1, 2):
                first, second = brute_force_moments(model, 1, t)
                assert first == model.m ** t
                assert abs(float(second / model.m ** (2 * t)) - series.second_moment[t]) < 1e-12

    def test_cap(self):
        """Enumeration beyond the cap."""
        with pytest.raises(CapError):
            brute_force_moments(load_environment("env-a"), 3, 2, cap=10)


class TestQuenchedMean:
    """Test the transfer recursion for E^q[Nbar_{t,x}]."""

    def test_deterministic_is_simple_walk(self):
        """m_{t,x} = 1 everywhere gives the simple-walk law and Zbar = 1."""
        field = EnvironmentField(load_environment("deterministic"), seed=0)
        qm = quenched_mean(field, 1, 4)
        assert qm.horizon == 4
        assert qm.at(2) == pytest.approx({(-2,): 0.25, (0,): 0.5, (2,): 0.25})
        assert np.allclose(qm.zbar, 1.0)

    def test_env_b_first_step(self):
        """Zbar_1 = m_{0,0} / m."""
        model = load_environment("env-b")
        field = EnvironmentField(model, seed=5)
        qm = quenched_mean(field, 3, 3)
        m00 = float(field.mean_offspring(0, np.zeros((1, 3), dtype=np.int64))[0])
        assert qm.zbar[0] == 1.0
        assert qm.zbar[1] == pytest.approx(m00 / 1.2)

    def test_annealed_mean_one(self):
        """Zbar_5 averages to 1 over environment seeds."""
        model = load_environment("env-b")
        values = [quenched_mean(EnvironmentField(model, seed=s), 2, 5).zbar[5] for s in range(2000)]
        mean = np.mean(values)
        se = np.std(values, ddof=1) / np.sqrt(len(values))
        assert abs(mean - 1.0) < 3 * se

    def test_to_frame(self):
        field = EnvironmentField(load_environment("env-b"), seed=1)
        frame = quenched_mean(field, 2, 2).to_frame()
        assert list(frame.columns) == ['t', 'x1', 'x2', 'mean']
        assert frame[frame.t == 0]['mean'].tolist() == [1.0]

    def test_invalid(self):
        field = EnvironmentField(load_environment("env-b"), seed=1)
        with pytest.raises(DomainError):
            quenched_mean(field, 3, -1)

    def test_monte_carlo_bridge(self):
        """Genealogy averages match the transfer values sitewise."""
        field = EnvironmentField(load_environment("env-b"), seed=3)
        exact = quenched_mean(field, 1, 4)
        mc = quenched_mean_monte_carlo(field, 1, 4, runs=4000, seed=9)
        for row in mc.itertuples(index=False):
            expected = exact.at(row.t).get((row.x1,), 0.0)
            assert abs(row.mean - expected) <= 5 * row.se + 1e-12, row

    def test_monte_carlo_needs_runs(self):
        field = EnvironmentField(load_environment("env-b"), seed=3)
        with pytest.raises(ConfigError):
            quenched_mean_monte_carlo(field, 1, 2, runs=1)


class TestZetaIdentity:
    """Test the pathwise Feynman-Kac check."""

    def test_forced_draws(self):
        """One step with every particle sent along +e1 with two children."""
        field = EnvironmentField(load_environment("env-b"), seed=0)
        check = verify_zeta_identity(field, 0, 3, 1, draws=ForcedDraws(0, 2))
        assert check.max_error <= 1e-15
        assert check.aggregated_error <= 1e-15
        assert check.paths == 12

    def test_keyed_seeds(self):
        """Labeled and spatial identities hold to 1e-12 over many seeds."""
        for i in range(20):
            field = EnvironmentField(load_environment("env-b"), seed=100 + i)
            check = verify_zeta_identity(field, 200 + i, 3, 3)
            assert check.max_error < 1e-12
            assert check.aggregated_error < 1e-12

    @pytest.mark.slow
    def test_hundred_seeds(self):
        """100 environment/particle seed pairs at T = 3."""
        for i in range(100):
            field = EnvironmentField(load_environment("env-b"), seed=i)
            assert verify_zeta_identity(field, i, 3, 3).max_error < 1e-12

    def test_path_cap(self):
        field = EnvironmentField(load_environment("env-b"), seed=0)
        with pytest.raises(CapError):
            verify_zeta_identity(field, 0, 3, 6, path_cap=1000)

    def test_to_dict(self):
        field = EnvironmentField(load_environment("env-b"), seed=0)
        data = verify_zeta_identity(field, 4, 1, 2).to_dict()
        assert set(data) == {"max_error", "aggregated_error", "paths", "horizon", "particle_seed"}


class TestGrowthRegimes:
    """Second-moment behavior on each side of the growth condition."""

    def test_env_b_plateau(self):
        """Value at t = 200 within 1% of the max over t <= 200."""
        series = two_walk_series(load_environment("env-b"), 3, 200)
        assert series.second_moment[200] >= 0.99 * series.second_moment.max()

    def test_env_a_grows(self):
        """Value at t = 200 more than twice the value at t = 50."""
        series = two_walk_series(load_environment("env-a"), 3, 200)
        assert series.second_moment[200] > 2 * series.second_moment[50]
        assert np.all(np.diff(series.second_moment[10:]) > 0)

    def test_overlap_decay_slope(self):
        """log overlap vs log t over [64, 192] has slope near -d/2."""
        series = two_walk_series(load_environment("env-b"), 3, 192)
        ts = np.arange(64, 193)
        fit = fit_power_law(ts, series.overlap[64:193])
        assert -1.8 <= fit.slope <= -1.2

    def test_u_limit(self):
        """Renewal u_T, tail-corrected, matches the geometric limit within 1e-3."""
        model = load_environment("env-b")
        pi_3 = return_probability(3, method=BESSEL_INTEGRAL).value
        limit = u_limit(model, pi_3)
        u = two_walk_series(model, 3, 2000, method=RENEWAL).u
        gap_500, gap_2000 = limit - u[500], limit - u[2000]
        assert 0 < gap_2000 < gap_500
        assert gap_2000 / gap_500 == pytest.approx(0.5, abs=0.1)
        corrected = u[2000] + (u[2000] - u[500])
        assert abs(corrected - limit) < 1e-3

    def test_u_limit_diverges(self):
        """alpha * pi >= 1 has no finite limit."""
        assert u_limit(load_environment("env-a"), 0.34054) == float('inf')

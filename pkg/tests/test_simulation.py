#!/usr/bin/env python3
"""
Test Suite for the aggregate and genealogy simulation engines
"""

import logging
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from brwre_core import CapError, ConfigError, DomainError, PopulationOverflowError, RunConfig
from brwre_env import EnvironmentField, build_environment, load_environment
from brwre_sim import (
    AGGREGATE, GENEALOGY,
    ForcedDraws, GenealogyState, KeyedDraws, OccupancyState, SimulationEngine,
    annealed_law, approximate_multinomial, exact_total, init_state, occupancy_law,
    quenched_law, run_trajectory, step,
)
from brwre_stats import ALIVE, EXTINCT

DOUBLING = [(["0", "0", "1"], "1")]
DYING = [(["1"], "1")]


def run_engine(engine, steps):
    state = engine.init_state()
    for _ in range(steps):
        state = engine.step(state)
    return state


def varied_quenched_law(steps, d=1):
    """First Env B field, from seed 21 on, whose exact law has four or more likely outcomes."""
    model = load_environment("env-b")
    for seed in range(21, 221):
        field = EnvironmentField(model, seed=seed)
        law = occupancy_law({(0,) * d: 1}, 0, steps, quenched_law(field), d)
        if sum(p >= Fraction(1, 100) for p in law.values()) >= 4:
            return field, law
    raise AssertionError("no field with a varied law")


class TestStates:
    """Test OccupancyState and GenealogyState."""

    def test_origin(self):
        """One particle at the origin."""
        state = OccupancyState.origin(3)
        assert state.total == 1
        assert state.as_dict() == {(0, 0, 0): 1}
        assert state.satisfies_invariants()

    def test_from_dict_drops_zeros(self):
        """Stored counts are positive."""
        state = OccupancyState.from_dict(2, {(1, 1): 3, (0, 0): 0, (-2, 0): 1}, 2)
        assert state.as_dict() == {(1, 1): 3, (-2, 0): 1}
        assert state.satisfies_invariants()

    def test_parity_violation_detected(self):
        """Sites with the wrong parity break the invariants."""
        state = OccupancyState.from_dict(2, {(1, 0): 1}, 2)
        assert not state.satisfies_invariants()

    def test_exact_total_beyond_int64(self):
        """Totals are exact Python ints."""
        counts = np.array([2 ** 63, 2 ** 63 - 1], dtype=np.uint64)
        assert exact_total(counts) == 2 ** 64 - 1

    def test_genealogy_to_occupancy(self):
        """Particles on the same site are counted together."""
        state = GenealogyState(1, [((1, 1), (1,)), ((1, 2), (1,)), ((1, 3), (-1,))])
        assert state.labels_are_consistent()
        assert state.to_occupancy(1).as_dict() == {(1,): 2, (-1,): 1}

    def test_init_state_modes(self):
        """Mode picks the representation."""
        assert isinstance(init_state(2, AGGREGATE), OccupancyState)
        assert isinstance(init_state(2, GENEALOGY), GenealogyState)
        with pytest.raises(ConfigError):
            init_state(2, "neither")


class TestAggregateEngine:
    """Test aggregate-mode stepping."""

    @pytest.fixture
    def env_b_engine(self):
        field = EnvironmentField(load_environment("env-b"), seed=4)
        return SimulationEngine(field, 3, AGGREGATE, rng=np.random.default_rng(9))

    def test_doubling(self):
        """delta_2 everywhere: N_t = 2^t."""
        field = EnvironmentField(build_environment(DOUBLING), seed=0)
        engine = SimulationEngine(field, 3, AGGREGATE, rng=np.random.default_rng(0))
        state = run_engine(engine, 12)
        assert state.total == 2 ** 12
        assert state.satisfies_invariants()

    def test_deterministic_single_walker(self):
        """delta_1: one particle performing a simple walk."""
        field = EnvironmentField(load_environment("deterministic"), seed=0)
        engine = SimulationEngine(field, 2, AGGREGATE, rng=np.random.default_rng(1))
        state = engine.init_state()
        for t in range(1, 20):
            state = engine.step(state)
            assert state.total == 1
            assert state.t == t
            assert state.satisfies_invariants()

    def test_extinction_is_absorbing(self):
        """No children: extinct after one step, and it stays so."""
        field = EnvironmentField(build_environment(DYING), seed=0)
        engine = SimulationEngine(field, 1, AGGREGATE, rng=np.random.default_rng(0))
        state = run_engine(engine, 3)
        assert state.is_extinct
        assert state.t == 3

    def test_direction_counts_conserve_particles(self, env_b_engine):
        """Direction draws split every site's count exactly."""
        state = env_b_engine.init_state()
        for _ in range(6):
            if state.is_extinct:
                break
            counts = state.counts.copy()
            state = env_b_engine.step(state)
            draws = env_b_engine.last_draws
            assert np.array_equal(draws.direction_counts.sum(axis=1), counts)
            assert state.satisfies_invariants()

    def test_same_seed_same_trajectory(self):
        """Particle rng and field seed fix the run."""
        field = EnvironmentField(load_environment("env-b"), seed=2)
        a = run_engine(SimulationEngine(field, 3, rng=np.random.default_rng(5)), 8)
        b = run_engine(SimulationEngine(field, 3, rng=np.random.default_rng(5)), 8)
        assert a.as_dict() == b.as_dict()

    def test_approximate_sampling_flag(self, caplog):
        """Counts above the threshold switch to approximate multinomials once."""
        field = EnvironmentField(build_environment(DOUBLING), seed=0)
        engine = SimulationEngine(field, 1, AGGREGATE, rng=np.random.default_rng(0), exact_threshold=4)
        with caplog.at_level(logging.WARNING):
            state = run_engine(engine, 6)
        assert engine.approx_sampling
        assert state.total == 2 ** 6
        assert sum("approximate" in r.message for r in caplog.records) == 1

    def test_overflow_detected(self):
        """Totals leaving the 64-bit range abort with the failing time."""
        field = EnvironmentField(build_environment(DOUBLING), seed=0)
        engine = SimulationEngine(field, 1, AGGREGATE, rng=np.random.default_rng(0))
        state = OccupancyState(0, np.zeros((1, 1), dtype=np.int64), np.array([2 ** 63], dtype=np.uint64))
        with pytest.raises(PopulationOverflowError) as excinfo:
            engine.step(state)
        assert excinfo.value.t == 1

    def test_bad_arguments(self):
        """Dimension and mode are validated."""
        field = EnvironmentField(load_environment("env-b"), seed=0)
        with pytest.raises(DomainError):
            SimulationEngine(field, 0)
        with pytest.raises(ConfigError):
            SimulationEngine(field, 2, mode="other")

    def test_module_step(self):
        """step() with a throwaway engine."""
        field = EnvironmentField(build_environment(DOUBLING), seed=0)
        state = step(init_state(2), field, np.random.default_rng(0))
        assert state.total == 2


class TestApproximateMultinomial:
    """Test the approximate multinomial sampler."""

    def test_rows_sum_exactly(self):
        """Every row sums to its n."""
        rng = np.random.default_rng(0)
        n = np.array([10 ** 12, 3, 0, 10 ** 15], dtype=np.uint64)
        out = approximate_multinomial(rng, n, [0.2, 0.3, 0.5])
        assert np.array_equal(out.sum(axis=1), n)

    def test_mean_proportions(self):
        """Large counts follow pvals closely."""
        rng = np.random.default_rng(1)
        n = np.full(200, 10 ** 9, dtype=np.uint64)
        out = approximate_multinomial(rng, n, [1 / 6] * 6).astype(np.float64)
        assert np.allclose(out.mean(axis=0) / 1e9, 1 / 6, atol=1e-4)

    def test_dominant_and_rare_categories(self):
        """A category above one half is mirrored; a mean-10 category stays near 10."""
        rng = np.random.default_rng(2)
        n = np.full(400, 10 ** 9, dtype=np.uint64)
        out = approximate_multinomial(rng, n, [0.9, 1e-8, 0.1 - 1e-8])
        assert np.array_equal(out.sum(axis=1), n)
        means = out.astype(np.float64).mean(axis=0)
        assert abs(means[0] / 1e9 - 0.9) < 1e-5
        assert abs(means[1] - 10.0) < 1.5
        assert out[:, 1].max() < 100


class TestGenealogyEngine:
    """Test genealogy-mode stepping."""

    def test_forced_draws(self):
        """Direction e_1 and two children: 2^T particles at T e_1."""
        field = EnvironmentField(load_environment("env-b"), seed=0)
        engine = SimulationEngine(field, 3, GENEALOGY, draws=ForcedDraws(0, 2))
        state = run_engine(engine, 4)
        assert state.total == 16
        assert state.labels_are_consistent()
        assert state.to_occupancy(3).as_dict() == {(4, 0, 0): 16}

    def test_labels_extend_parent(self):
        """A child's label is its parent's label plus its birth rank."""
        field = EnvironmentField(build_environment(DOUBLING), seed=0)
        engine = SimulationEngine(field, 2, GENEALOGY, rng=np.random.default_rng(0))
        state = run_engine(engine, 2)
        assert sorted(label for label, _ in state.particles) == [
            (1, 1, 1), (1, 1, 2), (1, 2, 1), (1, 2, 2)
        ]

    def test_keyed_draws_replay(self):
        """Keyed draws give the same genealogy every time."""
        field = EnvironmentField(load_environment("env-b"), seed=3)
        a = run_engine(SimulationEngine(field, 3, GENEALOGY, draws=KeyedDraws(17)), 5)
        b = run_engine(SimulationEngine(field, 3, GENEALOGY, draws=KeyedDraws(17)), 5)
        assert a.particles == b.particles

    def test_shared_pmf_per_site(self):
        """Particles on one site see one atom."""
        field = EnvironmentField(load_environment("env-b"), seed=8)
        engine = SimulationEngine(field, 1, GENEALOGY, draws=KeyedDraws(1))
        state = engine.init_state()
        for _ in range(5):
            if state.is_extinct:
                break
            state = engine.step(state)
            by_site = {}
            for x, atom in engine.last_draws.particle_atoms:
                by_site.setdefault(x, set()).add(atom)
            assert all(len(atoms) == 1 for atoms in by_site.values())

    def test_cap(self):
        """Populations above the cap are refused."""
        field = EnvironmentField(build_environment(DOUBLING), seed=0)
        engine = SimulationEngine(field, 1, GENEALOGY, rng=np.random.default_rng(0), genealogy_cap=10)
        with pytest.raises(CapError):
            run_engine(engine, 5)


class TestStepLaw:
    """Test exact occupancy laws against each other and against sampling."""

    def test_modes_share_one_law(self):
        """Genealogy and aggregate steps have the same occupancy law."""
        model = load_environment("env-b")
        start = {(0,): 2, (2,): 1}
        agg = occupancy_law(start, 0, 1, annealed_law(model), 1, AGGREGATE)
        gen = occupancy_law(start, 0, 1, annealed_law(model), 1, GENEALOGY)
        assert agg == gen
        assert sum(agg.values()) == 1

    def test_modes_share_annealed_law_two_steps(self):
        """Two annealed steps from the origin: same law in both modes."""
        model = load_environment("env-b")
        agg = occupancy_law({(0,): 1}, 0, 2, annealed_law(model), 1, AGGREGATE)
        gen = occupancy_law({(0,): 1}, 0, 2, annealed_law(model), 1, GENEALOGY)
        assert agg == gen
        assert sum(agg.values()) == 1

    @pytest.mark.parametrize("seed, steps", [(0, 3), (21, 3), (21, 4)])
    def test_modes_share_quenched_law(self, seed, steps):
        """Up to four steps in one fixed field: same law in both modes."""
        field = EnvironmentField(load_environment("env-b"), seed=seed)
        agg = occupancy_law({(0,): 1}, 0, steps, quenched_law(field), 1, AGGREGATE)
        gen = occupancy_law({(0,): 1}, 0, steps, quenched_law(field), 1, GENEALOGY)
        assert agg == gen
        assert sum(agg.values()) == 1

    def test_mean_population(self):
        """E[N_1] = m for one starting particle."""
        model = load_environment("env-a")
        law = occupancy_law({(0, 0): 1}, 0, 1, annealed_law(model), 2)
        mean = sum(p * sum(n for _, n in key) for key, p in law.items())
        assert mean == Fraction(6, 5)

    def test_enumeration_cap(self):
        """Too many outcomes."""
        model = load_environment("env-b")
        with pytest.raises(CapError):
            occupancy_law({(0,): 3}, 0, 2, annealed_law(model), 1, cap=5)

    @pytest.mark.parametrize("mode", [AGGREGATE, GENEALOGY])
    def test_sampler_matches_law(self, mode):
        """Chi-square goodness of fit of 10^4 four-step runs in a fixed field."""
        steps, runs = 4, 10_000
        field, law = varied_quenched_law(steps)
        engine = SimulationEngine(field, 1, mode, rng=np.random.default_rng(123))
        seen = Counter()
        for _ in range(runs):
            state = run_engine(engine, steps)
            if mode == GENEALOGY:
                assert state.labels_are_consistent()
                state = state.to_occupancy(1)
            seen[tuple(sorted(state.as_dict().items()))] += 1
        assert set(seen) <= set(law)

        keys = sorted(law, key=lambda k: -law[k])
        expected = np.array([float(law[k]) * runs for k in keys])
        observed = np.array([seen.get(k, 0) for k in keys], dtype=np.float64)
        big = expected >= 5
        exp_cells = np.append(expected[big], expected[~big].sum())
        obs_cells = np.append(observed[big], observed[~big].sum())
        if exp_cells[-1] == 0:
            exp_cells, obs_cells = exp_cells[:-1], obs_cells[:-1]
        assert stats.chisquare(obs_cells, exp_cells).pvalue > 1e-4


class TestRunTrajectory:
    """Test whole-trajectory runs and their records."""

    def test_columns_and_first_row(self):
        """Fixed column order; t = 0 is one particle at the origin."""
        result = run_trajectory(RunConfig(horizon=3))
        assert result.columns == [
            't', 'N_t', 'Nbar_t', 'rho_star', 'R_t', 'Y_2_0_0',
            'M_1_0_0', 'M_2_0_0', 'M_4_0_0', 'Mrho_1_0_0', 'Mrho_2_0_0', 'Mrho_4_0_0',
            'cos_0', 'status',
        ]
        first = result.to_frame().iloc[0]
        assert first['N_t'] == 1
        assert first['Nbar_t'] == 1.0
        assert first['rho_star'] == 1.0
        assert first['R_t'] == 1.0
        assert first['M_2_0_0'] == 0.0
        assert first['Y_2_0_0'] == 0.0
        assert first['cos_0'] == 1.0
        assert first['status'] == ALIVE

    def test_horizon_zero(self):
        """T = 0 gives a single row."""
        assert len(run_trajectory(RunConfig(horizon=0)).records) == 1

    def test_stops_at_extinction(self):
        """The last record is the extinct one."""
        config = RunConfig(horizon=10, environment={"atoms": [{"probs": ["1"], "weight": "1"}]})
        result = run_trajectory(config)
        assert result.status == EXTINCT
        assert len(result.records) == 2
        assert result.records[-1].N_t == 0

    def test_reproducible(self):
        """Identical configs give identical frames."""
        config = RunConfig(horizon=12, env_seed=3, particle_seed=4)
        a = run_trajectory(config).to_frame()
        b = run_trajectory(RunConfig(horizon=12, env_seed=3, particle_seed=4)).to_frame()
        assert a.equals(b)

    def test_step_count(self, mocker):
        """One engine step per time until the horizon."""
        spy = mocker.spy(SimulationEngine, 'step')
        run_trajectory(RunConfig(horizon=5, environment="deterministic"))
        assert spy.call_count == 5

    def test_genealogy_mode(self):
        """Genealogy runs produce the same columns."""
        result = run_trajectory(RunConfig(horizon=4, mode="genealogy"))
        assert result.to_frame()['t'].tolist()[0] == 0
        assert list(result.to_frame().columns) == result.columns

    def test_invalid_horizon(self):
        """Negative horizons are configuration errors."""
        with pytest.raises(ConfigError):
            run_trajectory(RunConfig(horizon=-1))

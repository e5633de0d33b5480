#!/usr/bin/env python3
"""
Forward simulation of the branching random walk in random environment.

Two exact modes share one step law. Each particle at (t, x) picks one of the
2d neighbors uniformly, draws K children from the site's offspring law, and
all K children land on the chosen neighbor at t + 1.

- aggregate: occupancy counts only, multinomial splits per site
- genealogy: explicit particles carrying their path labels (1, y_1, ..., y_t)
"""

import itertools
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from brwre_core import (
    CapError, ConfigError, DomainError, PopulationOverflowError, RunConfig,
    StatContext, StatPipeline, load_bundled_config,
)
from brwre_env import (
    TAG_CHILDREN, TAG_DIRECTION, EnvironmentField, EnvironmentModel, OffspringPmf,
    load_environment, prf_uniform,
)
from brwre_kernels import unit_vectors
from brwre_stats import ALIVE, EXTINCT, StatRecord, make_record
from plugins import get_available_plugins

logger = logging.getLogger(__name__)

Site = Tuple[int, ...]
Label = Tuple[int, ...]

MASK64 = (1 << 64) - 1
AGGREGATE = "aggregate"
GENEALOGY = "genealogy"


# ═══════════════════════════════════════════════════════════════════════════════
# STATES
# ═══════════════════════════════════════════════════════════════════════════════

def exact_total(counts: np.ndarray) -> int:
    """Sum of uint64 counts as a Python int, without wraparound."""
    if counts.size == 0:
        return 0
    if int(counts.max()) * counts.size <= MASK64:
        return int(counts.sum(dtype=np.uint64))
    return sum(int(c) for c in counts.tolist())


@dataclass
class OccupancyState:
    """Particle counts N_{t,x} on the occupied sites at time t."""

    t: int
    sites: np.ndarray
    counts: np.ndarray

    @classmethod
    def origin(cls, d: int) -> 'OccupancyState':
        return cls(0, np.zeros((1, d), dtype=np.int64), np.ones(1, dtype=np.uint64))

    @classmethod
    def from_dict(cls, t: int, mapping: Dict[Site, int], d: int) -> 'OccupancyState':
        items = sorted((site, n) for site, n in mapping.items() if n > 0)
        sites = np.array([s for s, _ in items], dtype=np.int64).reshape(-1, d)
        counts = np.array([n for _, n in items], dtype=np.uint64)
        return cls(t, sites, counts)

    @property
    def d(self) -> int:
        return self.sites.shape[1]

    @property
    def total(self) -> int:
        return exact_total(self.counts)

    @property
    def is_extinct(self) -> bool:
        return self.counts.size == 0

    def as_dict(self) -> Dict[Site, int]:
        return {tuple(int(v) for v in s): int(n) for s, n in zip(self.sites, self.counts)}

    def satisfies_invariants(self) -> bool:
        """Parity and range of every site; no stored zeros."""
        if self.is_extinct:
            return True
        l1 = np.abs(self.sites).sum(axis=1)
        return bool(np.all(l1 <= self.t) and np.all(l1 % 2 == self.t % 2) and np.all(self.counts > 0))


@dataclass
class GenealogyState:
    """Explicit particles (label, position) at time t."""

    t: int
    particles: List[Tuple[Label, Site]]

    @classmethod
    def origin(cls, d: int) -> 'GenealogyState':
        return cls(0, [((1,), (0,) * d)])

    @property
    def total(self) -> int:
        return len(self.particles)

    @property
    def is_extinct(self) -> bool:
        return not self.particles

    def to_occupancy(self, d: int) -> OccupancyState:
        counts: Dict[Site, int] = {}
        for _, x in self.particles:
            counts[x] = counts.get(x, 0) + 1
        return OccupancyState.from_dict(self.t, counts, d)

    def labels_are_consistent(self) -> bool:
        """Labels are distinct and each has length t + 1."""
        labels = [label for label, _ in self.particles]
        return len(set(labels)) == len(labels) and all(len(lb) == self.t + 1 for lb in labels)


@dataclass
class StepDraws:
    """What one step drew, kept for instrumentation."""
    t: int
    directions: List[int] = field(default_factory=list)
    child_counts: List[int] = field(default_factory=list)
    particle_atoms: List[Tuple[Site, int]] = field(default_factory=list)
    direction_counts: Optional[np.ndarray] = None
    site_atoms: Optional[np.ndarray] = None


# ═══════════════════════════════════════════════════════════════════════════════
# PARTICLE DRAW SOURCES (GENEALOGY MODE)
# ═══════════════════════════════════════════════════════════════════════════════

def inverse_cdf(pmf: OffspringPmf, u: float) -> int:
    """Child count k with F(k-1) <= u < F(k)."""
    cum = np.cumsum(pmf.as_array())
    return int(min(np.searchsorted(cum, u, side='right'), pmf.k_max))


class ParticleDraws(ABC):
    """Source of per-particle direction and child-count draws."""

    @abstractmethod
    def direction(self, t: int, x: Site, label: Label, d: int) -> int:
        """Index into unit_vectors(d)."""

    @abstractmethod
    def children(self, t: int, x: Site, label: Label, pmf: OffspringPmf) -> int:
        """Number of children drawn from pmf."""


class SequentialDraws(ParticleDraws):
    """Draws consumed in order from a numpy Generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def direction(self, t, x, label, d):
        return int(self.rng.integers(0, 2 * d))

    def children(self, t, x, label, pmf):
        return inverse_cdf(pmf, float(self.rng.random()))


class KeyedDraws(ParticleDraws):
    """Draws that are a pure function of (seed, t, x, label), so they can be replayed."""

    def __init__(self, seed: int):
        self.seed = seed

    def direction(self, t, x, label, d):
        u = float(prf_uniform(self.seed, TAG_DIRECTION, t, [x], label)[0])
        return min(int(u * 2 * d), 2 * d - 1)

    def children(self, t, x, label, pmf):
        u = float(prf_uniform(self.seed, TAG_CHILDREN, t, [x], label)[0])
        return inverse_cdf(pmf, u)


class ForcedDraws(ParticleDraws):
    """Fixed draws for tests: same direction and child count everywhere."""

    def __init__(self, direction: int, children: int):
        self._direction = direction
        self._children = children

    def direction(self, t, x, label, d):
        return self._direction

    def children(self, t, x, label, pmf):
        return self._children


# ═══════════════════════════════════════════════════════════════════════════════
# MULTINOMIAL SAMPLING
# ═══════════════════════════════════════════════════════════════════════════════

def _approximate_binomial(rng: np.random.Generator, n: np.ndarray, p: float) -> np.ndarray:
    """Binomial(n, p) for p <= 1/2: Poisson for means up to 30, rounded normal above."""
    rem = n.astype(np.float64)
    mean = rem * p
    small = mean <= 30.0
    draw = np.empty_like(rem)
    draw[small] = rng.poisson(mean[small])
    draw[~small] = np.rint(rng.normal(mean[~small], np.sqrt(mean[~small] * (1.0 - p))))
    draw = np.clip(draw, 0.0, rem)
    with np.errstate(invalid='ignore'):
        return np.where(draw >= rem, n, draw.astype(np.uint64))


def approximate_multinomial(rng: np.random.Generator, n: np.ndarray, pvals: Sequence[float]) -> np.ndarray:
    """
    Sequential conditional binomials with approximate binomial draws, vectorized over rows.

    Category j draws Binomial(remaining, p_j / p_left), mirrored through
    remaining - X when that probability exceeds one half. The last category
    takes the remainder, so every row sums to n exactly.
    """
    n = np.asarray(n, dtype=np.uint64)
    pvals = np.asarray(pvals, dtype=np.float64)
    out = np.zeros((n.size, pvals.size), dtype=np.uint64)
    remaining = n.copy()
    p_left = 1.0
    for j in range(pvals.size - 1):
        if not remaining.any():
            break
        p = pvals[j]
        if p <= 0.0:
            continue
        q = min(1.0, max(0.0, p / p_left))
        if q > 0.5:
            draw = remaining - _approximate_binomial(rng, remaining, 1.0 - q)
        else:
            draw = _approximate_binomial(rng, remaining, q)
        out[:, j] = draw
        remaining = remaining - draw
        p_left = max(p_left - p, 1e-10)
    out[:, -1] = remaining
    return out


# ═══════════════════════════════════════════════════════════════════════════════
# SIMULATION ENGINE
# ═══════════════════════════════════════════════════════════════════════════════

class SimulationEngine:
    """
    Steps states forward under one environment field.

    The field and the particle stream are independent: environment cells come
    from the counter-based hash, particle decisions from rng (aggregate mode)
    or from a ParticleDraws source (genealogy mode).
    """

    def __init__(
        self,
        field: EnvironmentField,
        d: int,
        mode: str = AGGREGATE,
        rng: Optional[np.random.Generator] = None,
        draws: Optional[ParticleDraws] = None,
        exact_threshold: int = 1_000_000,
        genealogy_cap: int = 100_000,
    ):
        if d < 1:
            raise DomainError(f"Dimension must be >= 1, got {d}")
        if mode not in (AGGREGATE, GENEALOGY):
            raise ConfigError(f"Unknown mode {mode!r}")
        self.field = field
        self.model: EnvironmentModel = field.model
        self.d = d
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng()
        self.draws = draws or SequentialDraws(self.rng)
        self.exact_threshold = int(exact_threshold)
        self.genealogy_cap = int(genealogy_cap)
        self.approx_sampling = False
        self.last_draws: Optional[StepDraws] = None

        self._units = np.array(unit_vectors(d), dtype=np.int64)
        self._unit_list = unit_vectors(d)
        self._dir_probs = np.full(2 * d, 1.0 / (2 * d))
        self._probs = self.model.prob_matrix()
        self._k = np.arange(self.model.k_max + 1, dtype=np.uint64)

    def init_state(self):
        """One particle at the origin, labeled 1 in genealogy mode."""
        if self.mode == GENEALOGY:
            return GenealogyState.origin(self.d)
        return OccupancyState.origin(self.d)

    def step(self, state):
        """Advance one time step in the engine's mode."""
        if isinstance(state, GenealogyState):
            return self._step_genealogy(state)
        return self._step_aggregate(state)

    # ─── aggregate mode ───────────────────────────────────────────────────────

    def _multinomial(self, n: np.ndarray, pvals: np.ndarray) -> np.ndarray:
        out = np.zeros((n.size, pvals.size), dtype=np.uint64)
        small = n <= self.exact_threshold
        if small.any():
            out[small] = self.rng.multinomial(n[small].astype(np.int64), pvals).astype(np.uint64)
        if not small.all():
            if not self.approx_sampling:
                logger.warning(f"Counts above {self.exact_threshold}: switching to approximate multinomials")
            self.approx_sampling = True
            out[~small] = approximate_multinomial(self.rng, n[~small], pvals)
        return out

    def _step_aggregate(self, state: OccupancyState) -> OccupancyState:
        t = state.t
        if state.is_extinct:
            return OccupancyState(t + 1, state.sites.copy(), state.counts.copy())

        n_dirs = 2 * self.d
        n_sites = state.counts.size
        total = state.total
        wide = self.model.k_max * total > MASK64

        dir_counts = self._multinomial(state.counts, self._dir_probs)
        atoms = self.field.atom_indices(t, state.sites)

        group_site = np.repeat(np.arange(n_sites), n_dirs)
        group_dir = np.tile(np.arange(n_dirs), n_sites)
        group_n = dir_counts.reshape(-1)
        keep = group_n > 0
        group_site, group_dir, group_n = group_site[keep], group_dir[keep], group_n[keep]
        group_atom = atoms[group_site]

        children = np.zeros(group_n.size, dtype=object if wide else np.uint64)
        for a in range(self.model.n_atoms):
            sel = np.flatnonzero(group_atom == a)
            if sel.size == 0:
                continue
            offspring = self._multinomial(group_n[sel], self._probs[a])
            if wide:
                children[sel] = offspring.astype(object) @ self._k.astype(object)
            else:
                children[sel] = offspring @ self._k

        if wide:
            grand = sum(children.tolist())
            if grand > MASK64:
                raise PopulationOverflowError(
                    f"Population {grand} at t={t + 1} exceeds the 64-bit range", t=t + 1
                )
            children = np.array(children.tolist(), dtype=np.uint64)

        self.last_draws = StepDraws(t=t, direction_counts=dir_counts, site_atoms=atoms)
        dest = state.sites[group_site] + self._units[group_dir]
        alive = children > 0
        return self._merge(t + 1, dest[alive], children[alive])

    def _merge(self, t: int, dest: np.ndarray, children: np.ndarray) -> OccupancyState:
        if children.size == 0:
            return OccupancyState(t, np.zeros((0, self.d), dtype=np.int64), np.zeros(0, dtype=np.uint64))
        base = 2 * t + 1
        if base ** self.d < 2 ** 62:
            keys = np.zeros(dest.shape[0], dtype=np.int64)
            for i in range(self.d - 1, -1, -1):
                keys = keys * base + (dest[:, i] + t)
        else:
            _, keys = np.unique(dest, axis=0, return_inverse=True)
            keys = keys.reshape(-1)
        order = np.argsort(keys, kind='stable')
        sorted_keys = keys[order]
        starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
        counts = np.add.reduceat(children[order], starts)
        sites = dest[order][starts]
        return OccupancyState(t, sites, counts.astype(np.uint64))

    # ─── genealogy mode ───────────────────────────────────────────────────────

    def _step_genealogy(self, state: GenealogyState) -> GenealogyState:
        t = state.t
        site_atoms: Dict[Site, int] = {}
        draws = StepDraws(t=t)
        born: List[Tuple[Label, Site]] = []
        for label, x in state.particles:
            if x not in site_atoms:
                site_atoms[x] = self.field.atom_index(t, x)
            atom = site_atoms[x]
            pmf = self.model.atoms[atom][0]
            j = self.draws.direction(t, x, label, self.d)
            k = self.draws.children(t, x, label, pmf)
            draws.directions.append(j)
            draws.child_counts.append(k)
            draws.particle_atoms.append((x, atom))
            y = tuple(a + b for a, b in zip(x, self._unit_list[j]))
            born.extend((label + (c,), y) for c in range(1, k + 1))
            if len(born) > self.genealogy_cap:
                raise CapError(f"Genealogy population exceeds the cap {self.genealogy_cap} at t={t + 1}")
        self.last_draws = draws
        return GenealogyState(t + 1, born)


def init_state(d: int, mode: str = AGGREGATE):
    """Initial state: one particle at the origin."""
    if mode == GENEALOGY:
        return GenealogyState.origin(d)
    if mode != AGGREGATE:
        raise ConfigError(f"Unknown mode {mode!r}")
    return OccupancyState.origin(d)


def step(state, field: EnvironmentField, particle_rng: Any, mode: str = AGGREGATE, **options):
    """
    One step of either mode with a throwaway engine.

    Args:
        state: OccupancyState or GenealogyState
        field: Environment field
        particle_rng: numpy Generator, or a ParticleDraws source in genealogy mode
    """
    d = state.d if isinstance(state, OccupancyState) else len(state.particles[0][1]) if state.particles else 1
    if isinstance(particle_rng, ParticleDraws):
        engine = SimulationEngine(field, d, mode, draws=particle_rng, **options)
    else:
        engine = SimulationEngine(field, d, mode, rng=particle_rng, **options)
    return engine.step(state)


# ═══════════════════════════════════════════════════════════════════════════════
# EXACT STEP LAW
# ═══════════════════════════════════════════════════════════════════════════════

OccupancyKey = Tuple[Tuple[Site, int], ...]
SiteLaw = Callable[[int, Site], List[Tuple[OffspringPmf, Fraction]]]


def quenched_law(field: EnvironmentField) -> SiteLaw:
    """The field's own pmf at each cell, with probability one."""
    return lambda t, x: [(field.sample_pmf(t, x), Fraction(1))]


def annealed_law(model: EnvironmentModel) -> SiteLaw:
    """Every atom of Q at each cell, with its weight."""
    return lambda t, x: [(pmf, Fraction(w)) for pmf, w in model.atoms]


def _compositions(n: int, k: int) -> Iterator[Tuple[int, ...]]:
    if k == 1:
        yield (n,)
        return
    for first in range(n + 1):
        for rest in _compositions(n - first, k - 1):
            yield (first,) + rest


def _multinomial_pmf(counts: Sequence[int], probs: Sequence[Fraction]) -> Fraction:
    coeff = math.factorial(sum(counts))
    value = Fraction(1)
    for c, p in zip(counts, probs):
        coeff //= math.factorial(c)
        value *= p ** c
    return coeff * value


def _children_law(n: int, probs: Sequence[Fraction]) -> Dict[int, Fraction]:
    """Law of the total children of n particles with a shared pmf."""
    law: Dict[int, Fraction] = {}
    for comp in _compositions(n, len(probs)):
        p = _multinomial_pmf(comp, probs)
        if p:
            total = sum(k * c for k, c in enumerate(comp))
            law[total] = law.get(total, Fraction(0)) + p
    return law


def _site_law(t: int, x: Site, n: int, site_law: SiteLaw, d: int, mode: str) -> Dict[OccupancyKey, Fraction]:
    units = unit_vectors(d)
    p_dir = Fraction(1, 2 * d)
    outcomes: Dict[OccupancyKey, Fraction] = {}

    def add(children: Sequence[int], p: Fraction):
        key = tuple(sorted(
            (tuple(a + b for a, b in zip(x, units[j])), c) for j, c in enumerate(children) if c
        ))
        outcomes[key] = outcomes.get(key, Fraction(0)) + p

    for pmf, weight in site_law(t, x):
        probs = [Fraction(p) for p in pmf.probs]
        if mode == GENEALOGY:
            choices = [(j, k, p_dir * q) for j in range(2 * d) for k, q in enumerate(probs) if q]
            for combo in itertools.product(choices, repeat=n):
                children = [0] * (2 * d)
                p = weight
                for j, k, q in combo:
                    children[j] += k
                    p *= q
                add(children, p)
        else:
            for split in _compositions(n, 2 * d):
                p_split = weight * _multinomial_pmf(split, [p_dir] * (2 * d))
                groups = [_children_law(g, probs) if g else {0: Fraction(1)} for g in split]
                for combo in itertools.product(*[list(g.items()) for g in groups]):
                    p = p_split
                    for _, q in combo:
                        p *= q
                    add([c for c, _ in combo], p)
    return outcomes


def occupancy_law(
    start: Dict[Site, int],
    t0: int,
    steps: int,
    site_law: SiteLaw,
    d: int,
    mode: str = AGGREGATE,
    cap: int = 1_000_000,
) -> Dict[OccupancyKey, Fraction]:
    """
    Exact law of the occupancy after some steps, by full enumeration.

    Genealogy mode enumerates every particle's (direction, children) pair;
    aggregate mode enumerates direction splits and per-group offspring
    compositions. Both draw one pmf per occupied cell.
    """
    law: Dict[OccupancyKey, Fraction] = {tuple(sorted((s, n) for s, n in start.items() if n)): Fraction(1)}
    for t in range(t0, t0 + steps):
        nxt: Dict[OccupancyKey, Fraction] = {}
        for occ, p_occ in law.items():
            partial: Dict[Tuple[Tuple[Site, int], ...], Fraction] = {(): p_occ}
            for x, n in occ:
                site = _site_law(t, x, n, site_law, d, mode)
                merged: Dict[OccupancyKey, Fraction] = {}
                for acc, p_acc in partial.items():
                    for out, p_out in site.items():
                        counts = dict(acc)
                        for y, c in out:
                            counts[y] = counts.get(y, 0) + c
                        key = tuple(sorted(counts.items()))
                        merged[key] = merged.get(key, Fraction(0)) + p_acc * p_out
                partial = merged
                if len(partial) > cap:
                    raise CapError(f"Occupancy enumeration exceeds {cap} outcomes at t={t}")
            for key, p in partial.items():
                nxt[key] = nxt.get(key, Fraction(0)) + p
        law = nxt
        if len(law) > cap:
            raise CapError(f"Occupancy enumeration exceeds {cap} outcomes at t={t + 1}")
    return law


# ═══════════════════════════════════════════════════════════════════════════════
# TRAJECTORIES
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass
class TrajectoryResult:
    """Records of one run plus what the manifest needs."""
    records: List[StatRecord]
    columns: List[str]
    status: str
    approx_sampling: bool
    env_seed: int
    particle_seed: int

    def to_frame(self) -> pd.DataFrame:
        rows = [r.to_row(self.columns) for r in self.records]
        return pd.DataFrame(rows, columns=self.columns)


def build_pipeline(config: RunConfig, model: EnvironmentModel, stats_config: Optional[dict] = None) -> StatPipeline:
    """
    Create and load every statistic plugin for a run.

    Args:
        config: Run configuration; supplies the multi-indices
        model: Environment; supplies m
        stats_config: Plugin enablement/config; defaults to config/stats.json
    """
    if stats_config is None:
        stats_config = load_bundled_config('stats.json')
    m = float(model.m)
    context = StatContext(d=config.dimension, m=m)
    pipeline = StatPipeline(context)

    overrides = {
        'YStatistics': {'indices': config.y_indices, 'cap': config.wn_cap},
        'CltMoments': {'indices': config.moment_indices},
        'CosineSpotCheck': {'frequencies': config.cosine_frequencies},
    }
    loaded = 0
    for plugin_class in get_available_plugins():
        name = plugin_class.__name__.replace('Plugin', '')
        entry = stats_config.get(name, {})
        plugin_config = {**entry.get('config', {}), **overrides.get(name, {})}
        plugin = plugin_class(plugin_config)
        if pipeline.load_plugin(plugin):
            loaded += 1
            if not entry.get('enabled', True):
                plugin.disable()
    logger.debug(f"Statistic plugins loaded: {loaded}")
    return pipeline


def run_trajectory(
    config: RunConfig,
    stats_config: Optional[dict] = None,
    model: Optional[EnvironmentModel] = None,
) -> TrajectoryResult:
    """
    Simulate one trajectory and emit a StatRecord per time step.

    Stops early at extinction; the last record then carries status Extinct.

    Raises:
        ConfigError: For an invalid configuration
        PopulationOverflowError: If a count leaves the 64-bit range; the
            records produced so far are attached as .records
    """
    config.validate()
    model = model or load_environment(config.environment)
    field = EnvironmentField(model, config.env_seed)
    engine = SimulationEngine(
        field,
        config.dimension,
        config.mode,
        rng=np.random.default_rng(config.particle_seed),
        exact_threshold=config.exact_threshold,
        genealogy_cap=config.genealogy_cap,
    )
    pipeline = build_pipeline(config, model, stats_config)
    columns = ['t'] + pipeline.columns() + ['status']

    state = engine.init_state()
    records: List[StatRecord] = []
    status = ALIVE
    for t in range(config.horizon + 1):
        occupancy = state if isinstance(state, OccupancyState) else state.to_occupancy(config.dimension)
        records.append(make_record(occupancy, pipeline))
        if occupancy.is_extinct:
            status = EXTINCT
            logger.info(f"Extinct at t={t}")
            break
        if t == config.horizon:
            break
        try:
            state = engine.step(state)
        except PopulationOverflowError as e:
            e.records = records
            logger.error(f"Run aborted: {e}")
            raise

    return TrajectoryResult(
        records=records,
        columns=columns,
        status=status,
        approx_sampling=engine.approx_sampling,
        env_seed=config.env_seed,
        particle_seed=config.particle_seed,
    )


__all__ = [
    'AGGREGATE', 'GENEALOGY', 'exact_total',
    'OccupancyState', 'GenealogyState', 'StepDraws',
    'ParticleDraws', 'SequentialDraws', 'KeyedDraws', 'ForcedDraws', 'inverse_cdf',
    'approximate_multinomial', 'SimulationEngine', 'init_state', 'step',
    'quenched_law', 'annealed_law', 'occupancy_law',
    'TrajectoryResult', 'build_pipeline', 'run_trajectory',
]

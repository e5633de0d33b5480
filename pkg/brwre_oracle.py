#!/usr/bin/env python3
"""
Exact, simulation-free computations.

- quenched_mean: transfer recursion for E^q[Nbar_{t,x}] under one field
  (the directed polymer partition function)
- two_walk_series: annealed second moments from the difference walk, by a
  dense dynamic program or by the renewal recursion
- brute_force_moments: E[N_t] and E[N_t^2] by full rational enumeration
- verify_zeta_identity: pathwise check of the Feynman-Kac representation
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from brwre_core import CapError, ConfigError, DomainError
from brwre_env import EnvironmentField, EnvironmentModel
from brwre_kernels import simple_return_series, unit_vectors
from brwre_sim import (
    GENEALOGY, KeyedDraws, ParticleDraws, SequentialDraws,
    SimulationEngine, annealed_law, occupancy_law,
)

logger = logging.getLogger(__name__)

Site = Tuple[int, ...]
Label = Tuple[int, ...]

DP = "dp"
RENEWAL = "renewal"
AUTO = "auto"
SERIES_METHODS = (AUTO, DP, RENEWAL)

DP_RADIUS_CAP = 160
DP_CELL_LIMIT = 2_000_000
TRUNCATION_TARGET = 1e-12
DEFAULT_PATH_CAP = 10_000_000


# ═══════════════════════════════════════════════════════════════════════════════
# QUENCHED MEAN
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass
class QuenchedMeanField:
    """E^q[Nbar_{t,x}] on the occupied parity ball at each t, with Zbar_t."""

    d: int
    sites: List[np.ndarray]
    values: List[np.ndarray]
    zbar: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.values) - 1

    def at(self, t: int) -> Dict[Site, float]:
        return {tuple(int(v) for v in s): float(w) for s, w in zip(self.sites[t], self.values[t])}

    def to_frame(self) -> pd.DataFrame:
        """Sitewise rows (t, x1..xd, mean)."""
        coords = [f'x{i + 1}' for i in range(self.d)]
        frames = []
        for t, (sites, values) in enumerate(zip(self.sites, self.values)):
            frame = pd.DataFrame(sites, columns=coords)
            frame.insert(0, 't', t)
            frame['mean'] = values
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)


def _merge_sites(dest: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    sites, inverse = np.unique(dest, axis=0, return_inverse=True)
    return sites, np.bincount(inverse.reshape(-1), weights=weights, minlength=sites.shape[0])


def quenched_mean(field: EnvironmentField, d: int, T: int) -> QuenchedMeanField:
    """
    E^q[N_{t+1,y}] = sum_{|y-x|=1} E^q[N_{t,x}] m_{t,x} / (2d), normalized by m^t.

    Args:
        field: Environment field
        d: Lattice dimension
        T: Horizon
    """
    if d < 1:
        raise DomainError(f"Dimension must be >= 1, got {d}")
    if T < 0:
        raise DomainError(f"Horizon must be >= 0, got {T}")
    m = float(field.model.m)
    if m <= 0:
        raise DomainError("Quenched mean needs m > 0")

    units = np.array(unit_vectors(d), dtype=np.int64)
    sites = np.zeros((1, d), dtype=np.int64)
    values = np.ones(1, dtype=np.float64)
    all_sites, all_values = [sites], [values]
    for t in range(T):
        weight = values * field.mean_offspring(t, sites) / (2 * d * m)
        dest = (sites[:, None, :] + units[None, :, :]).reshape(-1, d)
        sites, values = _merge_sites(dest, np.repeat(weight, 2 * d))
        keep = values > 0
        sites, values = sites[keep], values[keep]
        all_sites.append(sites)
        all_values.append(values)

    zbar = np.array([math.fsum(v) for v in all_values])
    return QuenchedMeanField(d=d, sites=all_sites, values=all_values, zbar=zbar)


def quenched_mean_monte_carlo(
    field: EnvironmentField,
    d: int,
    T: int,
    runs: int,
    seed: int = 0,
) -> pd.DataFrame:
    """
    Average of Nbar_{t,x} over genealogy runs in one fixed field.

    Returns:
        Rows (t, x1..xd, mean, se) for every site reached in some run
    """
    if runs < 2:
        raise ConfigError(f"Need at least 2 runs, got {runs}")
    m = float(field.model.m)
    sums: Dict[Tuple[int, Site], float] = {}
    squares: Dict[Tuple[int, Site], float] = {}
    for child in np.random.SeedSequence(seed).spawn(runs):
        rng = np.random.default_rng(child)
        engine = SimulationEngine(field, d, GENEALOGY, rng=rng, draws=SequentialDraws(rng))
        state = engine.init_state()
        for t in range(T + 1):
            for x, n in state.to_occupancy(d).as_dict().items():
                value = n / m ** t
                sums[(t, x)] = sums.get((t, x), 0.0) + value
                squares[(t, x)] = squares.get((t, x), 0.0) + value * value
            if t == T or state.is_extinct:
                break
            state = engine.step(state)

    rows = []
    for (t, x), total in sorted(sums.items()):
        mean = total / runs
        var = max(squares[(t, x)] / runs - mean * mean, 0.0) * runs / (runs - 1)
        rows.append((t, *x, mean, math.sqrt(var / runs)))
    return pd.DataFrame(rows, columns=['t'] + [f'x{i + 1}' for i in range(d)] + ['mean', 'se'])


# ═══════════════════════════════════════════════════════════════════════════════
# TWO-WALK SERIES
# ═══════════════════════════════════════════════════════════════════════════════

class DifferenceDP:
    """
    Weighted law of the difference walk of two independent simple walks.

    Each step multiplies the origin cell by alpha, then applies two simple
    half steps. The array is a box of half-width radius; mass pushed out of
    the box is added to truncated_mass.
    """

    def __init__(self, d: int, alpha: float, radius: int):
        if d < 1:
            raise DomainError(f"Dimension must be >= 1, got {d}")
        if radius < 1:
            raise ConfigError(f"DP radius must be >= 1, got {radius}")
        self.d = d
        self.alpha = float(alpha)
        self.radius = radius
        self.t = 0
        self.truncated_mass = 0.0
        self.weights = np.zeros((2 * radius + 1,) * d, dtype=np.float64)
        self._origin = (radius,) * d
        self.weights[self._origin] = 1.0

    def origin_weight(self) -> float:
        return float(self.weights[self._origin])

    def total_weight(self) -> float:
        return math.fsum(self.weights.ravel())

    def _half_step(self, w: np.ndarray) -> np.ndarray:
        out = np.zeros_like(w)
        for axis in range(self.d):
            lo = [slice(None)] * self.d
            hi = [slice(None)] * self.d
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            out[tuple(hi)] += w[tuple(lo)]
            out[tuple(lo)] += w[tuple(hi)]
        out /= 2 * self.d
        lost = float(w.sum()) - float(out.sum())
        self.truncated_mass += max(lost, 0.0)
        return out

    def step(self) -> None:
        w = self.weights.copy()
        w[self._origin] *= self.alpha
        self.weights = self._half_step(self._half_step(w))
        self.t += 1

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        """Invariance under every sign flip and coordinate permutation."""
        w = self.weights
        scale = max(float(np.abs(w).max()), 1.0)
        for axis in range(self.d):
            if np.abs(w - np.flip(w, axis=axis)).max() > tol * scale:
                return False
        for perm in itertools.permutations(range(self.d)):
            if np.abs(w - np.transpose(w, perm)).max() > tol * scale:
                return False
        return True


@dataclass
class TwoWalkSeries:
    """u_t, E[Nbar_t^2] and E[sum_x Nbar_{t,x}^2] for t = 0..T."""

    horizon: int
    u: np.ndarray
    second_moment: np.ndarray
    overlap: np.ndarray
    alpha: float
    c: float
    m: float
    method: str
    truncated_mass: float = 0.0
    origin_series: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            't': np.arange(self.horizon + 1),
            'u': self.u,
            'second_moment': self.second_moment,
            'overlap': self.overlap,
        })


def _dp_series(d: int, alpha: float, T: int, radius: int) -> Tuple[np.ndarray, np.ndarray, float]:
    dp = DifferenceDP(d, alpha, radius)
    u = np.zeros(T + 1)
    v = np.zeros(T + 1)
    for s in range(T + 1):
        u[s] = dp.total_weight()
        v[s] = dp.origin_weight()
        if s < T:
            dp.step()
    return u, v, dp.truncated_mass


def _renewal_series(d: int, alpha: float, T: int) -> Tuple[np.ndarray, np.ndarray]:
    p = simple_return_series(d, 2 * T)[::2]
    v = np.zeros(T + 1)
    u = np.zeros(T + 1)
    v[0] = 1.0
    u[0] = 1.0
    running = 0.0
    for s in range(1, T + 1):
        v[s] = p[s] + (alpha - 1.0) * float(np.dot(v[:s], p[s:0:-1]))
        running += v[s - 1]
        u[s] = 1.0 + (alpha - 1.0) * running
    return u, v


def _split_series(base: np.ndarray, m: float, c: float) -> np.ndarray:
    """m^{-t} + c sum_{k=1..t} m^{-(k-1)} base_{t-k}."""
    T = base.size - 1
    with np.errstate(over='ignore'):
        decay = np.power(m, -np.arange(T + 1, dtype=np.float64))
    out = decay.copy()
    out[1:] += c * np.convolve(decay[:T], base[:T])[:T]
    return out


def two_walk_series(
    model: EnvironmentModel,
    d: int,
    T: int,
    method: str = AUTO,
    radius: Optional[int] = None,
) -> TwoWalkSeries:
    """
    Annealed second-moment series of the normalized population.

    Args:
        model: Environment law with m > 0
        d: Lattice dimension
        T: Horizon (>= 1)
        method: "dp", "renewal", or "auto" (dp while the dense box is small)
        radius: DP box half-width; defaults to min(2T, 160)
    """
    if d < 1:
        raise DomainError(f"Dimension must be >= 1, got {d}")
    if T < 1:
        raise DomainError(f"Horizon must be >= 1, got {T}")
    if not model.m > 0:
        raise DomainError("Two-walk series needs m > 0")
    if method not in SERIES_METHODS:
        raise ConfigError(f"Unknown series method {method!r}; choose from {', '.join(SERIES_METHODS)}")

    m, alpha, c = float(model.m), float(model.alpha), float(model.c)
    radius = radius or min(2 * T, DP_RADIUS_CAP)
    if method == AUTO:
        method = DP if (2 * radius + 1) ** d <= DP_CELL_LIMIT else RENEWAL

    truncated = 0.0
    if method == DP:
        u, v, truncated = _dp_series(d, alpha, T, radius)
        if truncated > TRUNCATION_TARGET:
            logger.warning(f"DP radius {radius} truncated mass {truncated:.3e}")
    else:
        u, v = _renewal_series(d, alpha, T)
    logger.debug(f"Two-walk series d={d} T={T} via {method}")

    return TwoWalkSeries(
        horizon=T,
        u=u,
        second_moment=_split_series(u, m, c),
        overlap=_split_series(v, m, c),
        alpha=alpha,
        c=c,
        m=m,
        method=method,
        truncated_mass=truncated,
        origin_series=v,
    )


def u_limit(model: EnvironmentModel, pi_d: float) -> float:
    """
    sum_l alpha^{l+1} pi_d^l (1 - pi_d) = alpha (1 - pi_d) / (1 - alpha pi_d).

    Infinite when alpha * pi_d >= 1.
    """
    alpha = float(model.alpha)
    if alpha * pi_d >= 1:
        return math.inf
    return alpha * (1.0 - pi_d) / (1.0 - alpha * pi_d)


# ═══════════════════════════════════════════════════════════════════════════════
# BRUTE FORCE
# ═══════════════════════════════════════════════════════════════════════════════

def brute_force_moments(
    model: EnvironmentModel,
    d: int,
    T: int,
    cap: int = 1_000_000,
) -> Tuple[Union[Fraction, float], Union[Fraction, float]]:
    """
    (E[N_T], E[N_T^2]) by enumerating atoms, directions and offspring.

    Exact rationals for an exact model. Particles on the same cell share
    one pmf draw.
    """
    if T < 0:
        raise DomainError(f"Horizon must be >= 0, got {T}")
    origin = (0,) * d
    law = occupancy_law({origin: 1}, 0, T, annealed_law(model), d, cap=cap)
    first = sum((p * sum(n for _, n in key) for key, p in law.items()), Fraction(0))
    second = sum((p * sum(n for _, n in key) ** 2 for key, p in law.items()), Fraction(0))
    return first, second


# ═══════════════════════════════════════════════════════════════════════════════
# ZETA IDENTITY
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass
class ZetaCheck:
    """Discrepancy between m^T E[zeta_T; S_T = (y, label)] and N_{T,y}^{label}."""
    max_error: float
    aggregated_error: float
    paths: int
    horizon: int
    particle_seed: int
    labeled: Dict[Tuple[Site, Label], float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "max_error": self.max_error,
            "aggregated_error": self.aggregated_error,
            "paths": self.paths,
            "horizon": self.horizon,
            "particle_seed": self.particle_seed,
        }


def verify_zeta_identity(
    field: EnvironmentField,
    particle_seed: int,
    d: int,
    T: int,
    draws: Optional[ParticleDraws] = None,
    path_cap: int = DEFAULT_PATH_CAP,
) -> ZetaCheck:
    """
    Replay one genealogy run through the auxiliary chain.

    The chain moves (x, label) -> (x + e, label + (k,)) with probability
    (1/2d) P(K >= k) / m under the annealed pmf. Along a path,
    zeta_T = prod A / (m p_step) with A = 1{X = e} 1{K >= k}, both read from
    the same keyed draws and field as the simulation.

    Raises:
        CapError: If the chain has more than path_cap paths
    """
    if T < 0:
        raise DomainError(f"Horizon must be >= 0, got {T}")
    model = field.model
    draws = draws or KeyedDraws(particle_seed)
    m = float(model.m)
    units = unit_vectors(d)
    label_probs = [float(p) for p in model.label_step_probs()]
    moves = [
        (j, k, label_probs[k - 1] / (2 * d))
        for j in range(2 * d) for k in range(1, len(label_probs) + 1)
        if label_probs[k - 1] > 0
    ]
    paths = len(moves) ** T
    if paths > path_cap:
        raise CapError(f"Chain has {paths} paths, above the cap {path_cap}")

    engine = SimulationEngine(field, d, GENEALOGY, draws=draws)
    state = engine.init_state()
    for _ in range(T):
        state = engine.step(state)
    simulated: Dict[Tuple[Site, Label], int] = {(x, label): 1 for label, x in state.particles}

    atom_cache: Dict[Tuple[int, Site], int] = {}
    draw_cache: Dict[Tuple[int, Site, Label], Tuple[int, int]] = {}

    def drawn(t: int, x: Site, label: Label) -> Tuple[int, int]:
        key = (t, x, label)
        if key not in draw_cache:
            if (t, x) not in atom_cache:
                atom_cache[(t, x)] = field.atom_index(t, x)
            pmf = model.atoms[atom_cache[(t, x)]][0]
            draw_cache[key] = (draws.direction(t, x, label, d), draws.children(t, x, label, pmf))
        return draw_cache[key]

    enumerated: Dict[Tuple[Site, Label], float] = {}
    scale = m ** T
    for path in itertools.product(moves, repeat=T):
        x: Site = (0,) * d
        label: Label = (1,)
        prob = 1.0
        zeta = 1.0
        for t, (j, k, p) in enumerate(path):
            direction, children = drawn(t, x, label)
            a = 1.0 if (direction == j and children >= k) else 0.0
            prob *= p
            zeta *= a / (m * p)
            x = tuple(xi + ei for xi, ei in zip(x, units[j]))
            label = label + (k,)
        key = (x, label)
        enumerated[key] = enumerated.get(key, 0.0) + scale * prob * zeta

    max_error = max(
        (abs(enumerated.get(key, 0.0) - simulated.get(key, 0)) for key in set(enumerated) | set(simulated)),
        default=0.0,
    )

    spatial_sim: Dict[Site, float] = {}
    spatial_enum: Dict[Site, float] = {}
    for (x, _), n in simulated.items():
        spatial_sim[x] = spatial_sim.get(x, 0.0) + n
    for (x, _), w in enumerated.items():
        spatial_enum[x] = spatial_enum.get(x, 0.0) + w
    aggregated_error = max(
        (abs(spatial_enum.get(x, 0.0) - spatial_sim.get(x, 0.0)) for x in set(spatial_sim) | set(spatial_enum)),
        default=0.0,
    )

    return ZetaCheck(
        max_error=max_error,
        aggregated_error=aggregated_error,
        paths=paths,
        horizon=T,
        particle_seed=particle_seed,
        labeled=enumerated,
    )


__all__ = [
    'QuenchedMeanField', 'quenched_mean', 'quenched_mean_monte_carlo',
    'DifferenceDP', 'TwoWalkSeries', 'two_walk_series', 'u_limit',
    'brute_force_moments', 'ZetaCheck', 'verify_zeta_identity',
    'DP', 'RENEWAL', 'AUTO', 'SERIES_METHODS',
]

#!/usr/bin/env python3
"""
Observables of occupancy states and their ensemble summaries.

All lattice sums weight integer counts N_{t,x} and apply the single factor
m^{-t} at the end, computed from log m.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression

from brwre_core import DomainError
from brwre_kernels import PolynomialWn

if TYPE_CHECKING:
    from brwre_core import StatPipeline

logger = logging.getLogger(__name__)

ALIVE = "Alive"
EXTINCT = "Extinct"

Index = Tuple[int, ...]


# ═══════════════════════════════════════════════════════════════════════════════
# STAT RECORD
# ═══════════════════════════════════════════════════════════════════════════════

def parse_index(label: str) -> Index:
    """'2_0_0' -> (2, 0, 0)."""
    return tuple(int(v) for v in label.split('_'))


@dataclass
class StatRecord:
    """Every statistic of one state at time t."""

    t: int
    status: str = ALIVE
    N_t: int = 0
    Nbar_t: float = 0.0
    rho_star: float = 0.0
    R_t: float = 0.0
    moments: Dict[Index, float] = field(default_factory=dict)
    y_stats: Dict[Index, float] = field(default_factory=dict)
    extras: Dict[str, float] = field(default_factory=dict)

    SCALARS = ('N_t', 'Nbar_t', 'rho_star', 'R_t')

    def set(self, column: str, value: Any) -> None:
        """Store a value under its CSV column name."""
        if column in self.SCALARS:
            setattr(self, column, value)
        elif column.startswith('M_'):
            self.moments[parse_index(column[2:])] = value
        elif column.startswith('Y_'):
            self.y_stats[parse_index(column[2:])] = value
        else:
            self.extras[column] = value

    def get(self, column: str) -> Any:
        """Value stored under a CSV column name."""
        if column == 't':
            return self.t
        if column == 'status':
            return self.status
        if column in self.SCALARS:
            return getattr(self, column)
        if column.startswith('M_'):
            return self.moments.get(parse_index(column[2:]), float('nan'))
        if column.startswith('Y_'):
            return self.y_stats.get(parse_index(column[2:]), float('nan'))
        return self.extras.get(column, float('nan'))

    def to_row(self, columns: Sequence[str]) -> Dict[str, Any]:
        return {c: self.get(c) for c in columns}


def make_record(state: Any, pipeline: 'StatPipeline') -> StatRecord:
    """Run the pipeline on one occupancy state."""
    record = StatRecord(t=state.t, status=EXTINCT if state.is_extinct else ALIVE)
    return pipeline.process(record, state)


# ═══════════════════════════════════════════════════════════════════════════════
# NORMALIZATION
# ═══════════════════════════════════════════════════════════════════════════════

def _log_m(m: Union[float, Fraction]) -> float:
    m = float(m)
    if m <= 0:
        raise DomainError(f"Mean offspring must be positive, got {m}")
    return math.log(m)


def normalized_population(state: Any, m: Union[float, Fraction]) -> float:
    """N_t / m^t from the exact integer total."""
    total = state.total
    if total == 0:
        return 0.0
    if state.t == 0:
        return float(total)
    return math.exp(math.log(total) - state.t * _log_m(m))


def _weighted_sum(state: Any, values: np.ndarray, m: Union[float, Fraction]) -> float:
    """sum_x values(x) N_{t,x} m^{-t}."""
    raw = float(np.dot(values, state.counts.astype(np.float64)))
    if state.t == 0:
        return raw
    return raw * math.exp(-state.t * _log_m(m))


# ═══════════════════════════════════════════════════════════════════════════════
# DENSITIES
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass
class DensityStats:
    """rho_t with its maximum and self-overlap."""
    rho: Any
    rho_star: Union[float, Fraction]
    R_t: Union[float, Fraction]
    status: str


def density_stats(state: Any, exact: bool = False) -> DensityStats:
    """
    rho_t(x) = N_{t,x} / N_t on {N_t > 0}, zero otherwise.

    Args:
        state: Occupancy state
        exact: Return Fractions keyed by site instead of a float array
    """
    total = state.total
    if total == 0:
        zero = Fraction(0) if exact else 0.0
        return DensityStats(rho={} if exact else np.zeros(0), rho_star=zero, R_t=zero, status=EXTINCT)

    if exact:
        counts = state.as_dict()
        rho = {x: Fraction(n, total) for x, n in counts.items()}
        square_sum = sum(n * n for n in counts.values())
        return DensityStats(
            rho=rho,
            rho_star=Fraction(max(counts.values()), total),
            R_t=Fraction(square_sum, total * total),
            status=ALIVE,
        )

    rho = state.counts.astype(np.float64) / float(total)
    return DensityStats(
        rho=rho,
        rho_star=int(state.counts.max()) / total,
        R_t=float(np.dot(rho, rho)),
        status=ALIVE,
    )


# ═══════════════════════════════════════════════════════════════════════════════
# CLT FUNCTIONALS
# ═══════════════════════════════════════════════════════════════════════════════

def scaled_monomial(state: Any, n: Sequence[int]) -> np.ndarray:
    """(x / sqrt(t))^n at every occupied site; t = 0 is left unscaled."""
    scale = math.sqrt(state.t) if state.t > 0 else 1.0
    values = np.ones(state.counts.size, dtype=np.float64)
    for k, power in enumerate(n):
        if power:
            values *= (state.sites[:, k] / scale) ** power
    return values


def clt_moment(state: Any, n: Sequence[int], m: Union[float, Fraction]) -> float:
    """sum_x (x / sqrt(t))^n Nbar_{t,x}; n = 0 gives Nbar_t."""
    if state.t < 1:
        raise DomainError("CLT moments need t >= 1")
    if sum(n) == 0:
        return normalized_population(state, m)
    if state.is_extinct:
        return 0.0
    return _weighted_sum(state, scaled_monomial(state, n), m)


def cosine_statistic(state: Any, omega: Sequence[float]) -> float:
    """sum_x cos(omega . x / sqrt(t)) rho_t(x)."""
    total = state.total
    if total == 0:
        return 0.0
    scale = math.sqrt(state.t) if state.t > 0 else 1.0
    phase = state.sites.astype(np.float64) @ np.asarray(omega, dtype=np.float64) / scale
    return float(np.dot(np.cos(phase), state.counts.astype(np.float64)) / float(total))


def cosine_limit(omega: Sequence[float], d: int) -> float:
    """Gaussian limit exp(-|omega|^2 / (2d))."""
    return math.exp(-float(np.dot(omega, omega)) / (2.0 * d))


# ═══════════════════════════════════════════════════════════════════════════════
# Y STATISTICS
# ═══════════════════════════════════════════════════════════════════════════════

def y_statistic(state: Any, poly: PolynomialWn, m: Union[float, Fraction]) -> float:
    """Y_n(t) = sum_x W_n(t, x) Nbar_{t,x}."""
    if poly.order == 0:
        return float(poly.coeffs.get(((0,) * poly.d, 0), 0)) * normalized_population(state, m)
    if state.is_extinct:
        return 0.0
    return _weighted_sum(state, poly.evaluate_array(state.t, state.sites), m)


def raw_moment(state: Any, i: Sequence[int]) -> int:
    """sum_x x^i N_{t,x} in exact integers."""
    total = 0
    for x, n in state.as_dict().items():
        term = n
        for xi, ii in zip(x, i):
            term *= xi ** ii
        total += term
    return total


def _exact_scale(t: int, m: Union[float, Fraction]) -> Union[float, Fraction]:
    if isinstance(m, Fraction):
        return m ** (-t)
    return math.exp(-t * _log_m(m))


def exact_y_statistic(state: Any, poly: PolynomialWn, m: Union[float, Fraction]) -> Union[float, Fraction]:
    """Y_n(t) site by site in rational arithmetic (exact when m is a Fraction)."""
    value = sum((poly.evaluate(state.t, x) * n for x, n in state.as_dict().items()), Fraction(0))
    return value * _exact_scale(state.t, m)


@dataclass(frozen=True)
class YDecomposition:
    """Y_n split into top-degree space, lower-degree space and time-carrying parts."""
    leading: Union[float, Fraction]
    lower: Union[float, Fraction]
    temporal: Union[float, Fraction]

    @property
    def total(self):
        return self.leading + self.lower + self.temporal


def y_decomposition(state: Any, poly: PolynomialWn, m: Union[float, Fraction]) -> YDecomposition:
    """
    Y_n(t) = sum_{(i,j)} A_n(i, j) t^j sum_x x^i Nbar_{t,x}, grouped.

    The leading group (|i| = |n|, j = 0) equals t^{|n|/2} clt_moment(n).
    """
    scale = _exact_scale(state.t, m)
    parts = {'leading': Fraction(0), 'lower': Fraction(0), 'temporal': Fraction(0)}
    for (i, j), a in poly.coeffs.items():
        term = a * Fraction(state.t) ** j * raw_moment(state, i)
        if j > 0:
            parts['temporal'] += term
        elif sum(i) == poly.order:
            parts['leading'] += term
        else:
            parts['lower'] += term
    return YDecomposition(**{k: v * scale for k, v in parts.items()})


# ═══════════════════════════════════════════════════════════════════════════════
# FITS
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class PowerLawFit:
    slope: float
    intercept: float
    r2: float


def fit_power_law(ts: Sequence[float], values: Sequence[float]) -> PowerLawFit:
    """Least-squares line through (log t, log value)."""
    x = np.log(np.asarray(ts, dtype=np.float64)).reshape(-1, 1)
    y = np.log(np.asarray(values, dtype=np.float64))
    model = LinearRegression().fit(x, y)
    return PowerLawFit(slope=float(model.coef_[0]), intercept=float(model.intercept_), r2=float(model.score(x, y)))


# ═══════════════════════════════════════════════════════════════════════════════
# ENSEMBLE SUMMARY
# ═══════════════════════════════════════════════════════════════════════════════

MEASURES = ('mean', 'var', 'se', 'median', 'cond_mean', 'cond_se', 'cond_median')


def _describe(frame: pd.DataFrame, columns: List[str], index: pd.Index, prefix: str = '') -> Dict[str, pd.DataFrame]:
    grouped = frame.groupby('t')[columns]
    mean = grouped.mean().reindex(index)
    var = grouped.var(ddof=1).reindex(index)
    count = grouped.count().reindex(index)
    out = {
        f'{prefix}mean': mean,
        f'{prefix}se': np.sqrt(var / count),
        f'{prefix}median': grouped.median().reindex(index),
    }
    if not prefix:
        out['var'] = var
    return out


@dataclass
class EnsembleSummary:
    """Per-time cross-replica statistics."""

    replicas: int
    times: List[int]
    survival: pd.Series
    measures: Dict[str, pd.DataFrame]
    failures: List[Dict[str, Any]] = field(default_factory=list)
    approx_sampling: bool = False

    @property
    def statistics(self) -> List[str]:
        return list(self.measures['mean'].columns)

    def get(self, measure: str, stat: str) -> pd.Series:
        """One measure of one statistic as a Series indexed by t."""
        return self.measures[measure][stat]

    def mean(self, stat: str) -> pd.Series:
        return self.get('mean', stat)

    def se(self, stat: str) -> pd.Series:
        return self.get('se', stat)

    def to_frame(self) -> pd.DataFrame:
        """Wide table: t, survival, then <stat>_<measure> columns."""
        data = {'t': self.times, 'survival': self.survival.to_numpy()}
        for stat in self.statistics:
            for measure in MEASURES:
                data[f'{stat}_{measure}'] = self.measures[measure][stat].to_numpy()
        return pd.DataFrame(data)

    def to_dict(self) -> dict:
        def clean(values):
            return [None if (isinstance(v, float) and math.isnan(v)) else float(v) for v in values]

        return {
            "replicas": self.replicas,
            "t": list(self.times),
            "survival": clean(self.survival.to_numpy()),
            "approx_sampling": self.approx_sampling,
            "failures": self.failures,
            "stats": {
                stat: {measure: clean(self.measures[measure][stat].to_numpy()) for measure in MEASURES}
                for stat in self.statistics
            },
        }


def summarize_ensemble(
    frame: pd.DataFrame,
    replicas: int,
    failures: Optional[List[Dict[str, Any]]] = None,
    approx_sampling: bool = False,
) -> EnsembleSummary:
    """
    Aggregate a long frame of replica records (columns replica, t, stats, status).

    Adds the derived column Nbar_t_sq so E[(Nbar_t)^2] is summarized too.
    """
    frame = frame.copy()
    if 'Nbar_t' in frame.columns:
        frame['Nbar_t_sq'] = frame['Nbar_t'].astype(np.float64) ** 2
    if 'N_t' in frame.columns:
        frame['N_t'] = frame['N_t'].astype(np.float64)
    columns = [c for c in frame.columns if c not in ('replica', 't', 'status')]
    times = sorted(int(t) for t in frame['t'].unique())
    index = pd.Index(times, name='t')

    measures = _describe(frame, columns, index)
    alive = frame[frame['status'] == ALIVE]
    measures.update(_describe(alive, columns, index, prefix='cond_'))
    survival = frame.assign(alive=frame['status'].eq(ALIVE)).groupby('t')['alive'].mean().reindex(index)

    return EnsembleSummary(
        replicas=replicas,
        times=times,
        survival=survival,
        measures=measures,
        failures=failures or [],
        approx_sampling=approx_sampling,
    )


__all__ = [
    'ALIVE', 'EXTINCT', 'StatRecord', 'make_record', 'parse_index',
    'normalized_population', 'DensityStats', 'density_stats',
    'scaled_monomial', 'clt_moment', 'cosine_statistic', 'cosine_limit',
    'y_statistic', 'raw_moment', 'exact_y_statistic', 'YDecomposition', 'y_decomposition',
    'PowerLawFit', 'fit_power_law',
    'MEASURES', 'EnsembleSummary', 'summarize_ensemble',
]

#!/usr/bin/env python3
"""
Random environment laws for the workbench.

An environment is a finite mixture Q of offspring laws. The time-space field
q_{t,x} is never stored: a counter-based hash of (seed, t, x) picks the atom,
so any cell can be replayed at any time.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from brwre_core import (
    ConfigError, DomainError, PmfError, WeightSumError,
    load_bundled_config, read_config_file,
)

logger = logging.getLogger(__name__)

Number = Union[Fraction, float]

FLOAT_TOLERANCE = 1e-12
REGULAR = "Regular"
FAILS = "Fails"


# ═══════════════════════════════════════════════════════════════════════════════
# COUNTER-BASED HASH
# ═══════════════════════════════════════════════════════════════════════════════

MASK64 = (1 << 64) - 1

TAG_ENVIRONMENT = 0x454E56
TAG_DIRECTION = 0x444952
TAG_CHILDREN = 0x4B4944

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def prf_hash(seed: int, tag: int, t: int, sites: Any, label: Sequence[int] = ()) -> np.ndarray:
    """
    Hash (seed, tag, t, site[, label]) to 64-bit words, one per site row.

    Args:
        seed: Stream key
        tag: Separates independent uses of the same key
        t: Time index
        sites: Integer array of shape (n, d) or a single site
        label: Optional genealogy label appended to the key

    Returns:
        uint64 array of length n
    """
    rows = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    with np.errstate(over='ignore'):
        h = np.full(rows.shape[0], np.uint64(int(seed) & MASK64), dtype=np.uint64)
        h = _mix(h ^ np.uint64(int(tag) & MASK64))
        h = _mix(h ^ np.uint64(int(t) & MASK64))
        for column in rows.T:
            h = _mix(h ^ column.astype(np.uint64))
        if len(label):
            h = _mix(h ^ np.uint64(len(label)))
            for word in label:
                h = _mix(h ^ np.uint64(int(word) & MASK64))
    return h


def prf_uniform(seed: int, tag: int, t: int, sites: Any, label: Sequence[int] = ()) -> np.ndarray:
    """Uniform doubles in [0, 1) from the top 53 bits of prf_hash."""
    h = prf_hash(seed, tag, t, sites, label)
    return (h >> _S11).astype(np.float64) * (2.0 ** -53)


# ═══════════════════════════════════════════════════════════════════════════════
# OFFSPRING LAWS
# ═══════════════════════════════════════════════════════════════════════════════

def coerce_number(value: Any) -> Number:
    """Strings and integers become exact fractions; floats stay floats."""
    if isinstance(value, bool):
        raise PmfError(f"Not a probability: {value!r}")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except ValueError as e:
            raise PmfError(f"Not a probability: {value!r}") from e
    if isinstance(value, (float, np.floating)):
        return float(value)
    raise PmfError(f"Not a probability: {value!r}")


def _all_exact(values: Sequence[Number]) -> bool:
    return all(isinstance(v, Fraction) for v in values)


def _total(values: Sequence[Number]) -> Number:
    if _all_exact(values):
        return sum(values, Fraction(0))
    return math.fsum(float(v) for v in values)


def _is_one(total: Number) -> bool:
    if isinstance(total, Fraction):
        return total == 1
    return abs(total - 1.0) <= FLOAT_TOLERANCE


@dataclass(frozen=True)
class OffspringPmf:
    """Probability mass function on child counts 0..k_max."""

    probs: Tuple[Number, ...]

    def __post_init__(self):
        probs = tuple(self.probs)
        if not probs:
            raise PmfError("Offspring pmf needs at least one entry")
        for k, p in enumerate(probs):
            if not 0 <= p <= 1:
                raise PmfError(f"q({k}) = {p} outside [0, 1]")
        if not _is_one(_total(probs)):
            raise PmfError(f"Offspring pmf sums to {float(_total(probs))!r}, not 1")
        if probs[-1] == 0:
            raise PmfError("Offspring pmf must end at its largest supported count")
        object.__setattr__(self, 'probs', probs)

    @classmethod
    def from_probs(cls, probs: Sequence[Any]) -> 'OffspringPmf':
        """Coerce raw entries, drop trailing zeros and validate."""
        values = [coerce_number(p) for p in probs]
        if not _all_exact(values):
            values = [float(v) for v in values]
        while values and values[-1] == 0:
            values.pop()
        if not values:
            raise PmfError("Offspring pmf has no mass")
        return cls(tuple(values))

    @classmethod
    def delta(cls, k: int) -> 'OffspringPmf':
        """Point mass at k children."""
        if k < 0:
            raise PmfError(f"Child count must be >= 0, got {k}")
        return cls(tuple([Fraction(0)] * k + [Fraction(1)]))

    @property
    def k_max(self) -> int:
        return len(self.probs) - 1

    @property
    def is_exact(self) -> bool:
        return _all_exact(self.probs)

    @property
    def mean(self) -> Number:
        return _total([k * p for k, p in enumerate(self.probs)])

    @property
    def second_moment(self) -> Number:
        return _total([k * k * p for k, p in enumerate(self.probs)])

    def tail_mass(self, k: int) -> Number:
        """P(K >= k)."""
        return _total(list(self.probs[k:])) if k <= self.k_max else type(self.probs[0])(0)

    def as_array(self, length: Optional[int] = None) -> np.ndarray:
        """Float probabilities, zero-padded to the given length."""
        out = np.zeros(length or len(self.probs), dtype=np.float64)
        out[:len(self.probs)] = [float(p) for p in self.probs]
        return out

    def to_floats(self) -> 'OffspringPmf':
        return OffspringPmf(tuple(float(p) for p in self.probs))

    def to_dict(self) -> dict:
        return {"probs": [str(p) for p in self.probs]}


# ═══════════════════════════════════════════════════════════════════════════════
# ENVIRONMENT MODEL
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True, eq=False)
class EnvironmentModel:
    """
    Finite mixture Q of offspring laws with its annealed moments.

    Exact (Fraction) arithmetic is used when every probability and weight
    is rational; otherwise everything is carried in floats.
    """

    atoms: Tuple[Tuple[OffspringPmf, Number], ...]
    m: Number = field(init=False)
    m2: Number = field(init=False)
    alpha: Number = field(init=False)
    c: Number = field(init=False)
    annealed_pmf: Tuple[Number, ...] = field(init=False)
    mean_square: Number = field(init=False)

    def __post_init__(self):
        atoms = tuple(self.atoms)
        exact = all(pmf.is_exact and isinstance(w, Fraction) for pmf, w in atoms)
        if not exact:
            atoms = tuple((pmf.to_floats(), float(w)) for pmf, w in atoms)
        object.__setattr__(self, 'atoms', atoms)

        k_max = max(pmf.k_max for pmf, _ in atoms)
        annealed = []
        for k in range(k_max + 1):
            annealed.append(_total([w * (pmf.probs[k] if k <= pmf.k_max else 0) for pmf, w in atoms]))
        m = _total([k * q for k, q in enumerate(annealed)])
        m2 = _total([k * k * q for k, q in enumerate(annealed)])
        mean_square = _total([w * pmf.mean * pmf.mean for pmf, w in atoms])
        if m > 0:
            alpha = mean_square / (m * m)
            c = (m2 - m) / (m * m)
        else:
            logger.warning("Environment has zero mean offspring; alpha and c are undefined")
            alpha = float('nan')
            c = float('nan')

        object.__setattr__(self, 'annealed_pmf', tuple(annealed))
        object.__setattr__(self, 'm', m)
        object.__setattr__(self, 'm2', m2)
        object.__setattr__(self, 'mean_square', mean_square)
        object.__setattr__(self, 'alpha', alpha)
        object.__setattr__(self, 'c', c)

    @property
    def is_exact(self) -> bool:
        return isinstance(self.m, Fraction)

    @property
    def k_max(self) -> int:
        return len(self.annealed_pmf) - 1

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def weights(self) -> Tuple[Number, ...]:
        return tuple(w for _, w in self.atoms)

    @property
    def cumulative_weights(self) -> np.ndarray:
        cum = np.cumsum([float(w) for w in self.weights])
        cum[-1] = 1.0
        return cum

    @property
    def atom_means(self) -> np.ndarray:
        """m_{t,x} for each atom, as floats."""
        return np.array([float(pmf.mean) for pmf, _ in self.atoms], dtype=np.float64)

    def prob_matrix(self) -> np.ndarray:
        """Atom pmfs as a float matrix of shape (n_atoms, k_max + 1)."""
        return np.vstack([pmf.as_array(self.k_max + 1) for pmf, _ in self.atoms])

    def label_step_probs(self) -> List[Number]:
        """P(label step = k) = sum_{j >= k} q(j) / m for k = 1..k_max."""
        return [_total(list(self.annealed_pmf[k:])) / self.m for k in range(1, self.k_max + 1)]

    def mean_offspring_law(self) -> Dict[Number, Number]:
        """Law of m_{t,x} under Q, atoms with equal means merged."""
        law: Dict[Number, Number] = {}
        for pmf, w in self.atoms:
            law[pmf.mean] = law.get(pmf.mean, 0) + w
        return law

    def to_dict(self) -> dict:
        return {"atoms": [{"probs": [str(p) for p in pmf.probs], "weight": str(w)}
                          for pmf, w in self.atoms]}


def _parse_atom(entry: Any) -> Tuple[Sequence[Any], Any]:
    if isinstance(entry, dict):
        if 'probs' not in entry or 'weight' not in entry:
            raise ConfigError(f"Atom needs 'probs' and 'weight': {entry!r}")
        return entry['probs'], entry['weight']
    if isinstance(entry, (list, tuple)) and len(entry) == 2:
        probs, weight = entry
        if isinstance(probs, OffspringPmf):
            probs = probs.probs
        return probs, weight
    raise ConfigError(f"Cannot read atom {entry!r}")


def build_environment(spec: Any) -> EnvironmentModel:
    """
    Build a validated mixture from (probabilities, weight) pairs.

    Args:
        spec: List of atoms, or a mapping with an 'atoms' list. Each atom is a
            (probs, weight) pair or {"probs": [...], "weight": w}

    Returns:
        EnvironmentModel with every derived moment populated
    """
    if isinstance(spec, dict):
        spec = spec.get('atoms')
    if not spec:
        raise ConfigError("Environment needs at least one atom")

    pmfs = []
    weights = []
    for entry in spec:
        probs, weight = _parse_atom(entry)
        pmfs.append(OffspringPmf.from_probs(probs))
        try:
            weights.append(coerce_number(weight))
        except PmfError as e:
            raise WeightSumError(str(e)) from e

    for w in weights:
        if not 0 <= w <= 1:
            raise WeightSumError(f"Atom weight {w} outside [0, 1]")
    total = _total(weights)
    if not _is_one(total):
        raise WeightSumError(f"Atom weights sum to {float(total)!r}, not 1")
    if all(w == 0 for w in weights):
        raise WeightSumError("All atom weights are zero")

    atoms = tuple((pmf, w) for pmf, w in zip(pmfs, weights) if w > 0)
    model = EnvironmentModel(atoms)
    logger.debug(f"Environment built: m={float(model.m)}, alpha={float(model.alpha)}")
    return model


def environment_moments(model: EnvironmentModel) -> Tuple[Number, Number, Number, Number]:
    """(m, m2, alpha, c) of a model; exact when the model is rational."""
    return model.m, model.m2, model.alpha, model.c


def environment_presets() -> Dict[str, Any]:
    """Named environments shipped in config/environments.json."""
    return load_bundled_config('environments.json')


def load_environment(ref: Any) -> EnvironmentModel:
    """
    Resolve a preset name, a spec file path, a spec mapping or a model.

    Raises:
        ConfigError: If the reference cannot be resolved
    """
    if isinstance(ref, EnvironmentModel):
        return ref
    if isinstance(ref, (dict, list, tuple)):
        return build_environment(ref)
    if isinstance(ref, (str, Path)):
        presets = environment_presets()
        if str(ref) in presets:
            return build_environment(presets[str(ref)])
        path = Path(ref)
        if path.suffix.lower() in ('.json', '.toml') or path.exists():
            return build_environment(read_config_file(path))
        raise ConfigError(f"Unknown environment {ref!r}; presets: {', '.join(sorted(presets))}")
    raise ConfigError(f"Cannot resolve environment {ref!r}")


# ═══════════════════════════════════════════════════════════════════════════════
# ENVIRONMENT FIELD
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True, eq=False)
class EnvironmentField:
    """The i.i.d. field (t, x) -> atom of Q, realized lazily from a seed."""

    model: EnvironmentModel
    seed: int

    def atom_indices(self, t: int, sites: Any) -> np.ndarray:
        """Atom index for every row of sites at time t."""
        if t < 0:
            raise DomainError(f"Environment time must be >= 0, got {t}")
        u = prf_uniform(self.seed, TAG_ENVIRONMENT, t, sites)
        idx = np.searchsorted(self.model.cumulative_weights, u, side='right')
        return np.minimum(idx, self.model.n_atoms - 1)

    def atom_index(self, t: int, x: Sequence[int]) -> int:
        return int(self.atom_indices(t, [tuple(x)])[0])

    def sample_pmf(self, t: int, x: Sequence[int]) -> OffspringPmf:
        """The offspring law shared by every particle at (t, x)."""
        return self.model.atoms[self.atom_index(t, x)][0]

    def mean_offspring(self, t: int, sites: Any) -> np.ndarray:
        """m_{t,x} for every row of sites."""
        return self.model.atom_means[self.atom_indices(t, sites)]


# ═══════════════════════════════════════════════════════════════════════════════
# REGULAR GROWTH CONDITION
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class ConditionReport:
    """Verdict on m > 1 and alpha * pi_d < 1."""
    m: float
    m2: float
    alpha: float
    pi_d: float
    product: float
    verdict: str
    reasons: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "m2": self.m2,
            "alpha": self.alpha,
            "pi_d": self.pi_d,
            "product": self.product,
            "verdict": self.verdict,
            "reasons": list(self.reasons),
        }


def check_regular_growth(model: EnvironmentModel, d: int, pi_d: float) -> ConditionReport:
    """
    Check the regular growth condition for a model in dimension d.

    Args:
        model: Environment law
        d: Lattice dimension
        pi_d: Return probability of the simple walk in dimension d
    """
    if d < 1:
        raise DomainError(f"Dimension must be >= 1, got {d}")
    if not 0 <= pi_d <= 1:
        raise DomainError(f"Return probability must lie in [0, 1], got {pi_d}")

    reasons = []
    if d <= 2:
        pi_d = 1.0
    alpha = float(model.alpha)
    product = alpha * pi_d
    if not model.m > 1:
        reasons.append("m ≤ 1")
    if d <= 2:
        reasons.append("recurrent dimension")
    elif not product < 1:
        reasons.append("alpha·pi_d ≥ 1")

    return ConditionReport(
        m=float(model.m),
        m2=float(model.m2),
        alpha=alpha,
        pi_d=float(pi_d),
        product=product,
        verdict=FAILS if reasons else REGULAR,
        reasons=tuple(reasons),
    )


__all__ = [
    'Number', 'REGULAR', 'FAILS',
    'TAG_ENVIRONMENT', 'TAG_DIRECTION', 'TAG_CHILDREN',
    'prf_hash', 'prf_uniform', 'coerce_number',
    'OffspringPmf', 'EnvironmentModel', 'EnvironmentField', 'ConditionReport',
    'build_environment', 'environment_moments', 'environment_presets',
    'load_environment', 'check_regular_growth',
]

#!/usr/bin/env python3
"""
Random-walk kernels and their exact companions.

- StepKernel: simple and difference-walk step laws, exact rational weights
- return_probability: pi_d from the truncated Green function plus an
  analytic tail, a Monte Carlo estimate, or a Bessel-integral reference
- wn_coefficients: space-time harmonic polynomials W_n of the simple walk
- gaussian_moment: moments of the limiting Gaussian N(0, I/d)
"""

import functools
import itertools
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import sympy
from scipy import integrate, special

from brwre_core import (
    BudgetError, CapError, ConfigError, DomainError, NumericAbortError, pad_index,
)

logger = logging.getLogger(__name__)

Site = Tuple[int, ...]

EXACT_RECURRENT = "exact-recurrent"
TRUNCATED_GREEN = "truncated-green"
MONTE_CARLO = "monte-carlo"
BESSEL_INTEGRAL = "bessel-integral"
METHODS = (TRUNCATED_GREEN, MONTE_CARLO, BESSEL_INTEGRAL)

MASS_TOLERANCE = 1e-8
DENSE_CHECK_CELLS = 200_000
DENSE_CHECK_STEPS = 64
DEFAULT_BUDGET = 10_000
DEFAULT_WN_CAP = 8


# ═══════════════════════════════════════════════════════════════════════════════
# STEP KERNELS
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True, eq=False)
class StepKernel:
    """Step law on Z^d with exact rational probabilities."""

    d: int
    entries: Dict[Site, Fraction]

    def __post_init__(self):
        if self.d < 1:
            raise DomainError(f"Dimension must be >= 1, got {self.d}")
        for e in self.entries:
            if len(e) != self.d:
                raise ConfigError(f"Displacement {e} does not live in dimension {self.d}")
        total = sum(self.entries.values(), Fraction(0))
        if total != 1:
            raise ConfigError(f"Kernel mass is {total}, not 1")

    @property
    def reach(self) -> int:
        """Largest L1 length of a step."""
        return max(sum(abs(v) for v in e) for e in self.entries)

    def items(self) -> List[Tuple[Site, Fraction]]:
        return sorted(self.entries.items())


def unit_vectors(d: int) -> List[Site]:
    """The 2d nearest-neighbor steps, ordered +e_1, -e_1, +e_2, ..."""
    steps = []
    for i in range(d):
        for sign in (1, -1):
            e = [0] * d
            e[i] = sign
            steps.append(tuple(e))
    return steps


def simple_kernel(d: int) -> StepKernel:
    """Uniform nearest-neighbor step."""
    p = Fraction(1, 2 * d)
    return StepKernel(d, {e: p for e in unit_vectors(d)})


def convolve_kernels(a: StepKernel, b: StepKernel, reflect_b: bool = False) -> StepKernel:
    """Law of X + Y (or X - Y) for independent X ~ a and Y ~ b."""
    if a.d != b.d:
        raise ConfigError("Kernels live in different dimensions")
    sign = -1 if reflect_b else 1
    out: Dict[Site, Fraction] = {}
    for ea, pa in a.entries.items():
        for eb, pb in b.entries.items():
            e = tuple(x + sign * y for x, y in zip(ea, eb))
            out[e] = out.get(e, Fraction(0)) + pa * pb
    return StepKernel(a.d, out)


def difference_kernel(d: int) -> StepKernel:
    """Step law of S - S' for two independent simple walks."""
    simple = simple_kernel(d)
    return convolve_kernels(simple, simple, reflect_b=True)


def _shift_add(out: np.ndarray, src: np.ndarray, offset: Sequence[int], weight: float) -> None:
    """out += weight * src shifted by offset, dropping what leaves the box."""
    dst, org = [], []
    for o, n in zip(offset, src.shape):
        if abs(o) >= n:
            return
        if o >= 0:
            dst.append(slice(o, n))
            org.append(slice(0, n - o))
        else:
            dst.append(slice(0, n + o))
            org.append(slice(-o, n))
    out[tuple(dst)] += weight * src[tuple(org)]


def kernel_return_series(kernel: StepKernel, horizon: int) -> np.ndarray:
    """
    P(X_t = 0) for t = 0..horizon by dense iterated convolution.

    The box is large enough that no mass can leave it, so total mass is
    checked against 1 after every step.
    """
    radius = kernel.reach * horizon
    shape = (2 * radius + 1,) * kernel.d
    center = (radius,) * kernel.d
    dist = np.zeros(shape, dtype=np.float64)
    dist[center] = 1.0
    series = np.zeros(horizon + 1, dtype=np.float64)
    series[0] = 1.0
    steps = [(e, float(p)) for e, p in kernel.items()]
    for t in range(1, horizon + 1):
        nxt = np.zeros_like(dist)
        for e, p in steps:
            _shift_add(nxt, dist, e, p)
        mass = nxt.sum()
        if abs(mass - 1.0) > MASS_TOLERANCE:
            raise NumericAbortError(f"Kernel convolution lost mass at step {t}: {mass!r}")
        dist = nxt
        series[t] = dist[center]
    return series


def _dense_check_horizon(d: int, n_max: int) -> int:
    """Longest prefix the dense convolution covers within DENSE_CHECK_CELLS cells."""
    head = min(n_max, DENSE_CHECK_STEPS)
    while head > 0 and (2 * head + 1) ** d > DENSE_CHECK_CELLS:
        head -= 1
    return head


@functools.lru_cache(maxsize=16)
def _simple_return_series(d: int, n_max: int) -> np.ndarray:
    log_fact = special.gammaln(np.arange(n_max + 1, dtype=np.float64) + 1.0)
    one_dim = np.zeros(n_max + 1, dtype=np.float64)
    even = np.arange(0, n_max + 1, 2)
    one_dim[even] = np.exp(log_fact[even] - 2.0 * log_fact[even // 2] - even * math.log(2.0))
    for n in even:
        i = np.arange(n + 1)
        mass = np.exp(log_fact[n] - log_fact[i] - log_fact[n - i] - n * math.log(2.0)).sum()
        if abs(mass - 1.0) > MASS_TOLERANCE:
            raise NumericAbortError(f"Coordinate walk lost mass at step {n}: {mass!r}")

    series = one_dim.copy()
    for j in range(2, d + 1):
        log_p = math.log(1.0 / j)
        log_q = math.log(1.0 - 1.0 / j)
        nxt = np.zeros_like(series)
        for n in range(0, n_max + 1, 2):
            k = np.arange(n + 1)
            weights = np.exp(log_fact[n] - log_fact[k] - log_fact[n - k] + k * log_p + (n - k) * log_q)
            mass = weights.sum()
            if abs(mass - 1.0) > MASS_TOLERANCE:
                raise NumericAbortError(f"Coordinate split lost mass at n={n}, j={j}: {mass!r}")
            ke = k[::2]
            nxt[n] = np.dot(weights[ke] * one_dim[ke], series[n - ke])
        series = nxt

    head = _dense_check_horizon(d, n_max)
    dense = kernel_return_series(simple_kernel(d), head)
    gap = float(np.max(np.abs(dense - series[:head + 1])))
    if gap > MASS_TOLERANCE:
        raise NumericAbortError(f"Coordinate split disagrees with convolution by {gap!r} up to step {head}")
    series.setflags(write=False)
    return series


def simple_return_series(d: int, n_max: int) -> np.ndarray:
    """
    P(S_n = 0) for the simple walk, n = 0..n_max.

    The d-dimensional walk splits into coordinate walks: given how many of
    the n steps hit coordinate j, the coordinates move independently. Every
    coordinate walk step and every binomial split is checked to carry unit
    mass, and the first steps are compared with dense convolution.
    """
    if d < 1:
        raise DomainError(f"Dimension must be >= 1, got {d}")
    if n_max < 0:
        raise DomainError(f"Horizon must be >= 0, got {n_max}")
    return _simple_return_series(d, n_max)


# ═══════════════════════════════════════════════════════════════════════════════
# RETURN PROBABILITY
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class ReturnProbEstimate:
    """Estimate of pi_d with a numerical error bound."""
    d: int
    value: float
    half_width: float
    method: str
    budget: Optional[int] = None
    green: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "value": self.value,
            "half_width": self.half_width,
            "method": self.method,
            "budget": self.budget,
            "green": self.green,
        }


def green_tail(d: int, budget: int) -> float:
    """
    Local-limit estimate of sum_{t > budget} P(S_t = 0).

    Even times carry 2 (d / (2 pi t))^{d/2}; odd times carry nothing.
    """
    if d < 3:
        return math.inf
    first = budget // 2 + 1
    amplitude = 2.0 * (d / (2.0 * math.pi)) ** (d / 2.0) * 2.0 ** (-d / 2.0)
    return amplitude * float(special.zeta(d / 2.0, first))


def green_function(d: int, budget: int = DEFAULT_BUDGET) -> Tuple[float, float]:
    """
    G = sum_t P(S_t = 0) and an error bound for the tail estimate.

    Returns:
        (G, half_width)
    """
    series = simple_return_series(d, budget)
    tail = green_tail(d, budget)
    head = math.fsum(series)
    half_width = tail * d / budget + budget * np.finfo(np.float64).eps
    return head + tail, half_width


def _green_bessel(d: int) -> Tuple[float, float]:
    """G = d * int_0^inf (e^{-v} I_0(v))^d dv."""
    def integrand(v):
        return special.ive(0, v) ** d

    split = 50.0
    head, head_err = integrate.quad(integrand, 0.0, split, limit=400, epsabs=1e-13, epsrel=1e-12)
    tail, tail_err = integrate.quad(integrand, split, np.inf, limit=400, epsabs=1e-13, epsrel=1e-12)
    return d * (head + tail), d * (head_err + tail_err)


def _monte_carlo_return(d: int, budget: int, walks: int, seed: int) -> Tuple[float, float]:
    """Fraction of walks back at the origin by time budget, tail-corrected."""
    rng = np.random.default_rng(seed)
    pos = np.zeros((walks, d), dtype=np.int32)
    returned = 0
    for step in range(1, budget + 1):
        n = pos.shape[0]
        if n == 0:
            break
        moves = rng.integers(0, 2 * d, size=n)
        pos[np.arange(n), moves // 2] += (1 - 2 * (moves % 2)).astype(np.int32)
        if step % 2 == 0:
            home = ~pos.any(axis=1)
            hits = int(home.sum())
            if hits:
                returned += hits
                pos = pos[~home]
    freq = returned / walks
    tail = green_tail(d, budget)
    value = freq + (1.0 - freq) ** 2 * tail
    half_width = 3.0 * math.sqrt(max(freq * (1.0 - freq), 1e-300) / walks) + (1.0 - freq) ** 2 * tail * tail
    return value, half_width


def return_probability(
    d: int,
    budget: int = DEFAULT_BUDGET,
    method: str = TRUNCATED_GREEN,
    walks: int = 100_000,
    seed: int = 0,
) -> ReturnProbEstimate:
    """
    Probability that the simple walk on Z^d ever returns to the origin.

    Args:
        d: Dimension
        budget: Truncation horizon (also the walk length for Monte Carlo)
        method: 'truncated-green', 'monte-carlo' or 'bessel-integral'
        walks: Number of walks for the Monte Carlo method
        seed: Seed for the Monte Carlo method

    Returns:
        ReturnProbEstimate; exactly 1 in dimensions 1 and 2
    """
    if d < 1:
        raise DomainError(f"Dimension must be >= 1, got {d}")
    if budget < 2:
        raise BudgetError(f"Budget must be >= 2, got {budget}")
    if d <= 2:
        return ReturnProbEstimate(d=d, value=1.0, half_width=0.0, method=EXACT_RECURRENT)
    if method not in METHODS:
        raise ConfigError(f"Unknown method {method!r}; choose from {', '.join(METHODS)}")

    if method == MONTE_CARLO:
        value, half_width = _monte_carlo_return(d, budget, walks, seed)
        logger.info(f"pi_{d} Monte Carlo over {walks} walks: {value:.6f} ± {half_width:.2g}")
        return ReturnProbEstimate(d=d, value=value, half_width=half_width, method=method, budget=budget)

    if method == BESSEL_INTEGRAL:
        green, green_err = _green_bessel(d)
        budget = None
    else:
        green, green_err = green_function(d, budget)
    value = 1.0 - 1.0 / green
    half_width = green_err / (green * green)
    logger.info(f"pi_{d} by {method}: {value:.9f} ± {half_width:.2g}")
    return ReturnProbEstimate(
        d=d, value=value, half_width=half_width, method=method, budget=budget, green=green
    )


def cumulant(theta: Sequence[float]) -> float:
    """rho(theta) = ln((1/d) sum_i cosh theta_i) for the simple walk."""
    theta = np.asarray(theta, dtype=np.float64)
    return float(np.log(np.mean(np.cosh(theta))))


# ═══════════════════════════════════════════════════════════════════════════════
# HARMONIC POLYNOMIALS
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True, eq=False)
class PolynomialWn:
    """W_n(t, x) = sum A_n(i, j) x^i t^j with exact coefficients."""

    n: Site
    coeffs: Dict[Tuple[Site, int], Fraction]

    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def order(self) -> int:
        return sum(self.n)

    def evaluate(self, t: int, x: Sequence[int]) -> Fraction:
        """Exact value at one point."""
        total = Fraction(0)
        for (i, j), a in self.coeffs.items():
            term = a * Fraction(t) ** j
            for xi, ii in zip(x, i):
                term *= Fraction(xi) ** ii
            total += term
        return total

    def evaluate_array(self, t: float, sites: np.ndarray) -> np.ndarray:
        """Float values at every row of sites."""
        sites = np.atleast_2d(np.asarray(sites, dtype=np.float64))
        out = np.zeros(sites.shape[0], dtype=np.float64)
        for (i, j), a in self.coeffs.items():
            term = np.full(sites.shape[0], float(a) * float(t) ** j)
            for k, ii in enumerate(i):
                if ii:
                    term *= sites[:, k] ** ii
            out += term
        return out

    def satisfies_degree_bound(self) -> bool:
        """A_n(i, j) = 0 whenever |i| + 2j > |n|."""
        return all(sum(i) + 2 * j <= self.order for (i, j), a in self.coeffs.items() if a != 0)

    def has_monomial_top(self) -> bool:
        """A_n(i, 0) is the Kronecker delta on |i| = |n|."""
        for (i, j), a in self.coeffs.items():
            if j == 0 and sum(i) == self.order and a != (1 if i == self.n else 0):
                return False
        return self.coeffs.get((self.n, 0), Fraction(0)) == 1

    def to_json(self) -> List[dict]:
        return [
            {"i": list(i), "j": j, "num": a.numerator, "den": a.denominator}
            for (i, j), a in sorted(self.coeffs.items())
        ]

    @classmethod
    def from_json(cls, n: Sequence[int], data: Iterable[dict]) -> 'PolynomialWn':
        coeffs = {(tuple(e["i"]), int(e["j"])): Fraction(e["num"], e["den"]) for e in data}
        return cls(tuple(n), coeffs)


def _truncate(expr: sympy.Expr, theta: Sequence[sympy.Symbol], bound: Site) -> sympy.Expr:
    """Drop every theta-monomial whose exponents exceed bound somewhere."""
    expr = sympy.expand(expr)
    if expr == 0:
        return sympy.Integer(0)
    poly = sympy.Poly(expr, *theta)
    kept = []
    for mon, coeff in poly.terms():
        if all(a <= b for a, b in zip(mon, bound)):
            kept.append(coeff * sympy.Mul(*[th ** e for th, e in zip(theta, mon)]))
    return sympy.Add(*kept)


@functools.lru_cache(maxsize=None)
def _wn_symbolic(n: Site) -> PolynomialWn:
    d = len(n)
    order = sum(n)
    theta = sympy.symbols(f'theta0:{d}')
    xs = sympy.symbols(f'x0:{d}')
    t = sympy.Symbol('t')

    # u = (1/d) sum_i cosh(theta_i) - 1
    u = sympy.Add(*[
        theta[i] ** (2 * k) / (sympy.factorial(2 * k) * d)
        for i in range(d) for k in range(1, n[i] // 2 + 1)
    ])
    log_term = sympy.Integer(0)
    power = sympy.Integer(1)
    for r in range(1, order // 2 + 1):
        power = _truncate(power * u, theta, n)
        log_term += sympy.Rational((-1) ** (r + 1), r) * power
    g = _truncate(sympy.Add(*[theta[i] * xs[i] for i in range(d)]) - t * log_term, theta, n)

    exp_g = sympy.Integer(1)
    power = sympy.Integer(1)
    for k in range(1, order + 1):
        power = _truncate(power * g, theta, n)
        exp_g += power / sympy.factorial(k)

    coeff = sympy.Poly(sympy.expand(exp_g), *theta).coeff_monomial(n) if order else sympy.Integer(1)
    w = sympy.expand(coeff * sympy.Mul(*[sympy.factorial(v) for v in n]))

    coeffs: Dict[Tuple[Site, int], Fraction] = {}
    for mon, c in sympy.Poly(w, *xs, t).terms():
        c = sympy.Rational(c)
        if c != 0:
            coeffs[(tuple(int(v) for v in mon[:d]), int(mon[d]))] = Fraction(int(c.p), int(c.q))
    logger.debug(f"W_{n} has {len(coeffs)} terms")
    return PolynomialWn(n, coeffs)


def wn_coefficients(n: Sequence[int], d: Optional[int] = None, cap: int = DEFAULT_WN_CAP) -> PolynomialWn:
    """
    Exact coefficients of W_n for the simple walk.

    W_n is the n-th theta-derivative at 0 of exp(theta.x - t rho(theta)),
    obtained by truncated series composition.

    Args:
        n: Multi-index (padded with zeros up to d)
        d: Dimension; defaults to len(n)
        cap: Largest allowed |n|

    Raises:
        CapError: If |n| exceeds cap
    """
    d = d or len(n)
    n = tuple(int(v) for v in pad_index(n, d))
    if any(v < 0 for v in n):
        raise DomainError(f"Multi-index entries must be >= 0: {n}")
    if sum(n) > cap:
        raise CapError(f"|n| = {sum(n)} exceeds the cap {cap}")
    return _wn_symbolic(n)


def check_harmonicity(
    poly: PolynomialWn,
    kernel: StepKernel,
    t_range: Iterable[int],
    x_range: Iterable[int],
) -> bool:
    """True iff sum_e p(e) W(t+1, x+e) = W(t, x) on the whole grid, exactly."""
    if kernel.d != poly.d:
        raise ConfigError("Kernel and polynomial dimensions differ")
    steps = kernel.items()
    xs = list(x_range)
    for t in t_range:
        for x in itertools.product(xs, repeat=poly.d):
            ahead = sum(
                (p * poly.evaluate(t + 1, tuple(a + b for a, b in zip(x, e))) for e, p in steps),
                Fraction(0),
            )
            if ahead != poly.evaluate(t, x):
                return False
    return True


# ═══════════════════════════════════════════════════════════════════════════════
# GAUSSIAN LIMIT
# ═══════════════════════════════════════════════════════════════════════════════

def _double_factorial(k: int) -> int:
    return math.prod(range(k, 0, -2)) if k > 0 else 1


def gaussian_moment(n: Sequence[int], d: int) -> Fraction:
    """E[Z^n] for Z ~ N(0, I/d)."""
    n = pad_index(n, d)
    value = Fraction(1)
    for v in n:
        if v % 2:
            return Fraction(0)
        value *= Fraction(_double_factorial(v - 1), d ** (v // 2))
    return value


def isserlis_moment(n: Sequence[int], d: int) -> Fraction:
    """E[Z^n] by summing over all perfect pairings of the factors."""
    labels = [i for i, v in enumerate(pad_index(n, d)) for _ in range(v)]

    def pairings(items: List[int]) -> Fraction:
        if not items:
            return Fraction(1)
        first, rest = items[0], items[1:]
        total = Fraction(0)
        for k, other in enumerate(rest):
            if other == first:
                total += Fraction(1, d) * pairings(rest[:k] + rest[k + 1:])
        return total

    if len(labels) % 2:
        return Fraction(0)
    return pairings(labels)


__all__ = [
    'EXACT_RECURRENT', 'TRUNCATED_GREEN', 'MONTE_CARLO', 'BESSEL_INTEGRAL', 'METHODS',
    'StepKernel', 'unit_vectors', 'simple_kernel', 'difference_kernel', 'convolve_kernels',
    'kernel_return_series', 'simple_return_series',
    'ReturnProbEstimate', 'green_tail', 'green_function', 'return_probability', 'cumulant',
    'PolynomialWn', 'wn_coefficients', 'check_harmonicity',
    'gaussian_moment', 'isserlis_moment',
]

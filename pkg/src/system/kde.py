"""Gaussian kernel density estimation and plug-in bandwidth selection.

The selector solves

    eps = (2 n sqrt(pi) * ||u''||^2_{gamma(eps)})^(-1/5)

where the curvature functional is estimated with a pilot bandwidth
gamma(eps) built from normal-reference estimates of the third and fourth
derivative norms.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import fftconvolve

from utils import log_debug, log_warning
from .errors import DegenerateSampleError, DomainError, NonPositiveFunctionalError

SQRT_PI = np.sqrt(np.pi)
SQRT_2PI = np.sqrt(2.0 * np.pi)

MAX_KERNEL_ORDER = 8
EXACT_PAIR_LIMIT = 20000
BIN_COUNT = 4096
KERNEL_TRUNCATION = 8.0

# normal-reference ||u'''||^2 and ||u''''||^2 per sigma^-7, sigma^-9
NORMAL_REF_NORM3 = 15.0 / (16.0 * SQRT_PI)
NORMAL_REF_NORM4 = 105.0 / (32.0 * SQRT_PI)
# ||u''||^2 of a unit normal
NORMAL_REF_NORM2 = 3.0 / (8.0 * SQRT_PI)

_PAIR_BLOCK = 2_000_000
_WINDOW_BLOCK = 128


class BandwidthMethod(str, Enum):
    SILVERMAN = "silverman"
    SOLVE_THE_EQUATION = "solve_the_equation"


class Sample:
    """Particle positions with the bookkeeping every selector needs."""

    def __init__(self, positions: Union[Sequence[float], np.ndarray]):
        self.positions = np.ascontiguousarray(positions, dtype=float).ravel()
        if not np.all(np.isfinite(self.positions)):
            raise DomainError("sample positions must be finite")

    @property
    def n(self) -> int:
        return self.positions.size

    def __len__(self) -> int:
        return self.n


def _as_sample(sample) -> Sample:
    return sample if isinstance(sample, Sample) else Sample(sample)


@dataclass(frozen=True)
class BandwidthReport:
    epsilon: float
    h1: float
    h2: float
    curvature_norm: float
    iterations: int
    method: BandwidthMethod
    fallback: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            'epsilon': self.epsilon,
            'h1': self.h1,
            'h2': self.h2,
            'curvature_norm': self.curvature_norm,
            'iterations': self.iterations,
            'method': self.method.value,
            'fallback': self.fallback,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BandwidthReport':
        return cls(
            epsilon=float(data['epsilon']),
            h1=float(data['h1']),
            h2=float(data['h2']),
            curvature_norm=float(data['curvature_norm']),
            iterations=int(data['iterations']),
            method=BandwidthMethod(data['method']),
            fallback=bool(data.get('fallback', False)),
        )


# Kernel ----------------------------------------------------------------------

def _hermite(r: int, x: np.ndarray) -> np.ndarray:
    """Probabilists' Hermite polynomial He_r by the three-term recurrence."""
    previous = np.ones_like(x)
    if r == 0:
        return previous
    current = x.copy()
    for k in range(1, r):
        previous, current = current, x * current - k * previous
    return current


def gaussian_kernel_deriv(r: int, x):
    """r-th derivative of the standard normal density, K^(r) = (-1)^r He_r K."""
    if r < 0 or r > MAX_KERNEL_ORDER:
        raise DomainError(f"kernel derivative order must be in [0, {MAX_KERNEL_ORDER}], got {r}")
    xx = np.asarray(x, dtype=float)
    out = (-1.0) ** r * _hermite(r, xx) * np.exp(-0.5 * xx ** 2) / SQRT_2PI
    if np.ndim(x) == 0:
        return float(out)
    return out


def kernel_at_zero(r: int) -> float:
    return gaussian_kernel_deriv(r, 0.0)


# Density estimate --------------------------------------------------------------

def kde_eval(sample, epsilon: float, x):
    """(1/n) sum_j K_eps(x - X_j), evaluated exactly over all particles."""
    if not epsilon > 0:
        raise DomainError(f"bandwidth must be positive, got {epsilon}")
    s = _as_sample(sample)
    xx = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty(xx.size)
    rows = max(1, _PAIR_BLOCK // max(s.n, 1))
    for start in range(0, xx.size, rows):
        d = (xx[start:start + rows, None] - s.positions[None, :]) / epsilon
        out[start:start + rows] = np.exp(-0.5 * d * d).sum(axis=1)
    out /= s.n * epsilon * SQRT_2PI
    if np.ndim(x) == 0:
        return float(out[0])
    return out


def _windowed_gaussian_sum(targets: np.ndarray, sources_sorted: np.ndarray,
                           epsilon: float, truncation: float) -> np.ndarray:
    """sum_j exp(-((t - X_j)/eps)^2 / 2) over |t - X_j| <= truncation*eps.

    ``targets`` must be sorted ascending so that each block of targets shares
    one contiguous window of sources.
    """
    reach = truncation * epsilon
    lo = np.searchsorted(sources_sorted, targets - reach, side='left')
    hi = np.searchsorted(sources_sorted, targets + reach, side='right')
    out = np.zeros(targets.size)
    for start in range(0, targets.size, _WINDOW_BLOCK):
        stop = min(start + _WINDOW_BLOCK, targets.size)
        w0, w1 = lo[start], hi[stop - 1]
        if w1 <= w0:
            continue
        d = (targets[start:stop, None] - sources_sorted[None, w0:w1]) / epsilon
        values = np.where(np.abs(d) <= truncation, np.exp(-0.5 * d * d), 0.0)
        out[start:stop] = values.sum(axis=1)
    return out


def kde_on_grid(sample, epsilon: float, x: np.ndarray,
                truncation: Optional[float] = KERNEL_TRUNCATION) -> np.ndarray:
    """Vectorized estimate on an array of points, kernel cut at truncation*eps."""
    if truncation is None:
        return np.asarray(kde_eval(sample, epsilon, np.asarray(x, dtype=float)))
    s = _as_sample(sample)
    xx = np.asarray(x, dtype=float)
    order = np.argsort(xx, kind='stable')
    sums = np.empty(xx.size)
    sums[order] = _windowed_gaussian_sum(xx[order], np.sort(s.positions, kind='stable'),
                                         epsilon, truncation)
    return sums / (s.n * epsilon * SQRT_2PI)


def kde_at_sites(sample, epsilon: float,
                 truncation: Optional[float] = KERNEL_TRUNCATION) -> np.ndarray:
    """Estimate evaluated at every particle, self term included."""
    s = _as_sample(sample)
    return kde_on_grid(s, epsilon, s.positions, truncation)


# Density functionals -------------------------------------------------------------

def _exact_pair_sum(positions: np.ndarray, r: int, h: float) -> float:
    n = positions.size
    rows = max(1, _PAIR_BLOCK // n)
    partial = []
    for start in range(0, n, rows):
        d = (positions[start:start + rows, None] - positions[None, :]) / h
        partial.append(np.sum(gaussian_kernel_deriv(r, d)))
    return float(np.sum(partial))


def bin_counts(positions: np.ndarray, bins: int = BIN_COUNT) -> Tuple[np.ndarray, float, float]:
    """Linear binning onto ``bins`` equispaced nodes; returns (counts, lo, delta)."""
    lo, hi = float(positions.min()), float(positions.max())
    if hi == lo:
        counts = np.zeros(bins)
        counts[0] = positions.size
        return counts, lo, 1.0
    delta = (hi - lo) / (bins - 1)
    position = (positions - lo) / delta
    left = np.minimum(np.floor(position).astype(np.int64), bins - 2)
    frac = position - left
    counts = (np.bincount(left, weights=1.0 - frac, minlength=bins)
              + np.bincount(left + 1, weights=frac, minlength=bins))
    return counts, lo, delta


def _binned_pair_sum(positions: np.ndarray, r: int, h: float, bins: int = BIN_COUNT) -> float:
    counts, _, delta = bin_counts(positions, bins)
    lags = np.arange(-(bins - 1), bins) * (delta / h)
    kernel = gaussian_kernel_deriv(r, lags)
    smoothed = fftconvolve(counts, kernel, mode='valid')
    return float(np.dot(counts, smoothed))


def pair_sum(sample, r: int, h: float, exact_limit: int = EXACT_PAIR_LIMIT) -> float:
    """sum_i sum_j K^(r)((X_i - X_j)/h), diagonal included."""
    s = _as_sample(sample)
    if s.n <= exact_limit:
        return _exact_pair_sum(s.positions, r, h)
    return _binned_pair_sum(s.positions, r, h)


def functional_norm_estimate(sample, s: int, h: float, exact_limit: int = EXACT_PAIR_LIMIT) -> float:
    """Estimate of ||d^s u||^2 from the double sum of K^(2s)."""
    if s not in (2, 3):
        raise DomainError(f"functional order must be 2 or 3, got {s}")
    if not h > 0:
        raise DomainError(f"pilot bandwidth must be positive, got {h}")
    smp = _as_sample(sample)
    total = pair_sum(smp, 2 * s, h, exact_limit)
    return (-1.0) ** s * total / (smp.n ** 2 * h ** (2 * s + 1))


# Bandwidths ------------------------------------------------------------------------

def empirical_std(sample, robust: bool = False) -> float:
    s = _as_sample(sample)
    if s.n < 2:
        raise DegenerateSampleError(f"bandwidth selection needs n >= 2, got n={s.n}")
    sigma = float(np.std(s.positions, ddof=1))
    if robust:
        q75, q25 = np.percentile(s.positions, [75, 25])
        iqr_sigma = (q75 - q25) / 1.349
        if iqr_sigma > 0:
            sigma = min(sigma, float(iqr_sigma))
    if not (np.isfinite(sigma) and sigma > 0):
        raise DegenerateSampleError("empirical standard deviation is zero")
    return sigma


def silverman_bandwidth(sample, robust: bool = False) -> float:
    s = _as_sample(sample)
    return (4.0 / (3.0 * s.n)) ** 0.2 * empirical_std(s, robust)


def pilot_bandwidths(sample, robust: bool = False) -> Tuple[float, float]:
    s = _as_sample(sample)
    sigma = empirical_std(s, robust)
    norm3 = NORMAL_REF_NORM3 * sigma ** -7
    norm4 = NORMAL_REF_NORM4 * sigma ** -9
    h1 = (2.0 * kernel_at_zero(4) / (s.n * norm3)) ** (1.0 / 7.0)
    h2 = (-2.0 * kernel_at_zero(6) / (s.n * norm4)) ** (1.0 / 9.0)
    return h1, h2


def _gamma_factor(sample: Sample, h1: float, h2: float, exact_limit: int) -> float:
    psi2 = functional_norm_estimate(sample, 2, h1, exact_limit)
    psi3 = functional_norm_estimate(sample, 3, h2, exact_limit)
    if not (np.isfinite(psi2) and np.isfinite(psi3) and psi2 > 0 and psi3 > 0):
        raise NonPositiveFunctionalError(
            f"pilot functional estimates must be positive (||u''||^2={psi2:.4g}, ||u'''||^2={psi3:.4g})")
    return (4.0 * SQRT_PI * kernel_at_zero(4) * psi2 / psi3) ** (1.0 / 7.0)


def gamma_of_epsilon(sample, epsilon: float, robust: bool = False,
                     exact_limit: int = EXACT_PAIR_LIMIT) -> float:
    """Pilot bandwidth used inside the fixed-point equation, ~ eps^(5/7)."""
    if epsilon < 0:
        raise DomainError(f"bandwidth must be >= 0, got {epsilon}")
    s = _as_sample(sample)
    h1, h2 = pilot_bandwidths(s, robust)
    return _gamma_factor(s, h1, h2, exact_limit) * epsilon ** (5.0 / 7.0)


def amise(epsilon: float, n: int, curvature_norm: float) -> float:
    return 0.25 * epsilon ** 4 * curvature_norm + 1.0 / (2.0 * epsilon * n * SQRT_PI)


def amise_optimal_epsilon(n: int, curvature_norm: float) -> float:
    return (2.0 * n * SQRT_PI * curvature_norm) ** -0.2


def _silverman_report(sample: Sample, robust: bool, fallback: bool, iterations: int = 0) -> BandwidthReport:
    sigma = empirical_std(sample, robust)
    h1, h2 = pilot_bandwidths(sample, robust)
    return BandwidthReport(
        epsilon=silverman_bandwidth(sample, robust),
        h1=h1,
        h2=h2,
        curvature_norm=NORMAL_REF_NORM2 * sigma ** -5,
        iterations=iterations,
        method=BandwidthMethod.SILVERMAN,
        fallback=fallback,
    )


def solve_the_equation_bandwidth(sample, tol: float = 1e-3, max_iter: int = 100,
                                 robust: bool = False,
                                 exact_limit: int = EXACT_PAIR_LIMIT) -> BandwidthReport:
    """Geometric bisection on g(eps) = eps*(2n sqrt(pi) psi2(gamma(eps)))^(1/5) - 1.

    Bracket [silverman/100, silverman*100], widened once by another factor
    100; any failure (no sign change, non-positive functional) returns the
    Silverman bandwidth flagged as a fallback.
    """
    s = _as_sample(sample)
    silverman = silverman_bandwidth(s, robust)
    h1, h2 = pilot_bandwidths(s, robust)
    try:
        factor = _gamma_factor(s, h1, h2, exact_limit)
    except NonPositiveFunctionalError as e:
        log_warning(f"{e}; using the Silverman bandwidth")
        return _silverman_report(s, robust, fallback=True)

    def curvature(eps: float) -> float:
        psi2 = functional_norm_estimate(s, 2, factor * eps ** (5.0 / 7.0), exact_limit)
        if not (np.isfinite(psi2) and psi2 > 0):
            raise NonPositiveFunctionalError(f"curvature estimate {psi2:.4g} at eps={eps:.4g}")
        return psi2

    def g(eps: float) -> float:
        return eps * (2.0 * s.n * SQRT_PI * curvature(eps)) ** 0.2 - 1.0

    iterations = 0
    try:
        lo, hi = silverman / 100.0, silverman * 100.0
        g_lo, g_hi = g(lo), g(hi)
        if g_lo * g_hi > 0:
            lo, hi = lo / 100.0, hi * 100.0
            g_lo, g_hi = g(lo), g(hi)
        if g_lo * g_hi > 0:
            log_warning("no sign change in the bandwidth bracket; using the Silverman bandwidth")
            return _silverman_report(s, robust, fallback=True)

        while iterations < max_iter:
            iterations += 1
            mid = np.sqrt(lo * hi)
            psi2 = curvature(mid)
            target = amise_optimal_epsilon(s.n, psi2)
            if abs(mid - target) <= tol * mid:
                log_debug(f"bandwidth {mid:.6g} after {iterations} bisections")
                return BandwidthReport(mid, h1, h2, psi2, iterations, BandwidthMethod.SOLVE_THE_EQUATION)
            g_mid = mid / target - 1.0
            if g_mid * g_lo > 0:
                lo, g_lo = mid, g_mid
            else:
                hi = mid
    except NonPositiveFunctionalError as e:
        log_warning(f"{e}; using the Silverman bandwidth")
        return _silverman_report(s, robust, fallback=True, iterations=iterations)

    log_warning(f"bandwidth bisection did not converge in {max_iter} iterations; using the Silverman bandwidth")
    return _silverman_report(s, robust, fallback=True, iterations=iterations)


def select_bandwidth(sample, method: BandwidthMethod, tol: float = 1e-3, max_iter: int = 100,
                     robust: bool = False, exact_limit: int = EXACT_PAIR_LIMIT) -> BandwidthReport:
    s = _as_sample(sample)
    if BandwidthMethod(method) == BandwidthMethod.SILVERMAN:
        return _silverman_report(s, robust, fallback=False)
    return solve_the_equation_bandwidth(s, tol, max_iter, robust, exact_limit)

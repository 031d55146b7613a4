"""Nonlinearities beta, diffusion coefficients Phi and the initial densities.

Every evaluation function accepts a scalar or a numpy array and returns the
same shape (a plain float for scalar input).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, special

from .errors import ConfigurationError, DomainError
from .grid import Grid1D, GridField

ArrayLike = Union[float, np.ndarray]


def _scalar_or_array(values: np.ndarray, like) -> ArrayLike:
    if np.ndim(like) == 0:
        return float(values)
    return values


# Nonlinearity --------------------------------------------------------------

class BetaKind(str, Enum):
    POWER_LAW = "power_law"
    HEAVISIDE = "heaviside"
    TABULATED = "tabulated"


class Classification(str, Enum):
    DEGENERATE = "degenerate"
    NON_DEGENERATE = "non_degenerate"
    NEITHER = "neither"


@dataclass(frozen=True)
class BetaSpec:
    kind: BetaKind
    m: float = 3.0
    u_c: float = 0.15
    u_nodes: Tuple[float, ...] = ()
    beta_nodes: Tuple[float, ...] = ()
    phi_at_zero: float = 0.0
    phi_at_jump: float = 1.0

    def __post_init__(self):
        if self.kind == BetaKind.POWER_LAW and not self.m > 1:
            raise ConfigurationError(f"power-law exponent must exceed 1, got m={self.m}")
        if self.kind == BetaKind.HEAVISIDE and not self.u_c > 0:
            raise ConfigurationError(f"critical threshold must be positive, got u_c={self.u_c}")
        if self.kind == BetaKind.TABULATED:
            nodes = np.asarray(self.u_nodes, dtype=float)
            values = np.asarray(self.beta_nodes, dtype=float)
            if nodes.size < 2 or nodes.shape != values.shape:
                raise ConfigurationError("tabulated beta needs matching u/beta node lists of length >= 2")
            if nodes[0] != 0.0 or values[0] != 0.0:
                raise ConfigurationError("tabulated beta must start at the node (0, 0)")
            if np.any(np.diff(nodes) <= 0) or np.any(np.diff(values) < 0):
                raise ConfigurationError("tabulated beta must be nondecreasing on increasing nodes")

    @classmethod
    def power_law(cls, m: float) -> 'BetaSpec':
        return cls(BetaKind.POWER_LAW, m=m, phi_at_zero=0.0)

    @classmethod
    def heaviside(cls, u_c: float, phi_at_jump: float = 1.0) -> 'BetaSpec':
        return cls(BetaKind.HEAVISIDE, u_c=u_c, phi_at_zero=0.0, phi_at_jump=phi_at_jump)

    @classmethod
    def tabulated(cls, u_nodes: Sequence[float], beta_nodes: Sequence[float],
                  phi_at_zero: float = None) -> 'BetaSpec':
        u_nodes = tuple(float(u) for u in u_nodes)
        beta_nodes = tuple(float(b) for b in beta_nodes)
        if phi_at_zero is None and len(u_nodes) >= 2 and u_nodes[1] > 0:
            # right limit of Phi at 0+ along the first linear segment
            phi_at_zero = float(np.sqrt(max(beta_nodes[1], 0.0) / u_nodes[1]))
        return cls(BetaKind.TABULATED, u_nodes=u_nodes, beta_nodes=beta_nodes,
                   phi_at_zero=phi_at_zero or 0.0)

    @property
    def beta_at_jump(self) -> float:
        # beta(u_c) follows the Phi selection at the jump: beta = Phi^2 * u
        return self.phi_at_jump ** 2 * self.u_c

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'm': self.m,
            'u_c': self.u_c,
            'u_nodes': list(self.u_nodes),
            'beta_nodes': list(self.beta_nodes),
            'phi_at_zero': self.phi_at_zero,
            'phi_at_jump': self.phi_at_jump,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BetaSpec':
        kind = BetaKind(data['kind'])
        if kind == BetaKind.POWER_LAW:
            return cls.power_law(float(data.get('m', 3.0)))
        if kind == BetaKind.HEAVISIDE:
            return cls.heaviside(float(data['u_c']), float(data.get('phi_at_jump', 1.0)))
        return cls.tabulated(data['u_nodes'], data['beta_nodes'], data.get('phi_at_zero'))


def _tabulated_beta(spec: BetaSpec, u: np.ndarray) -> np.ndarray:
    nodes = np.asarray(spec.u_nodes)
    values = np.asarray(spec.beta_nodes)
    a = np.abs(u)
    out = np.interp(a, nodes, values)
    # linear extrapolation past the last node
    slope = (values[-1] - values[-2]) / (nodes[-1] - nodes[-2])
    beyond = a > nodes[-1]
    out = np.where(beyond, values[-1] + slope * (a - nodes[-1]), out)
    return np.sign(u) * out


def beta_eval(spec: BetaSpec, u: ArrayLike) -> ArrayLike:
    """beta(u); odd extension for the power law and tabulated kinds."""
    x = np.asarray(u, dtype=float)
    if spec.kind == BetaKind.POWER_LAW:
        out = x * np.abs(x) ** (spec.m - 1.0)
    elif spec.kind == BetaKind.HEAVISIDE:
        out = np.where(x > spec.u_c, x, 0.0)
        out = np.where(x == spec.u_c, spec.beta_at_jump, out)
    else:
        out = _tabulated_beta(spec, x)
    return _scalar_or_array(out, u)


def phi_eval(spec: BetaSpec, u: ArrayLike) -> ArrayLike:
    """Diffusion coefficient Phi(u) = sqrt(beta(u)/u), u >= 0."""
    x = np.asarray(u, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError("phi_eval is defined for u >= 0 only")
    if spec.kind == BetaKind.POWER_LAW:
        out = x ** ((spec.m - 1.0) / 2.0)
    elif spec.kind == BetaKind.HEAVISIDE:
        out = np.where(x > spec.u_c, 1.0, 0.0)
        out = np.where(x == spec.u_c, spec.phi_at_jump, out)
    else:
        with np.errstate(divide='ignore', invalid='ignore'):
            out = np.sqrt(np.maximum(_tabulated_beta(spec, x), 0.0) / x)
    out = np.where(x == 0.0, spec.phi_at_zero, out)
    return _scalar_or_array(out, u)


def classify(spec: BetaSpec) -> Classification:
    if spec.kind in (BetaKind.POWER_LAW, BetaKind.HEAVISIDE):
        return Classification.DEGENERATE
    # beta is linear on [0, u_1], so Phi is the constant sqrt(beta_1 / u_1) on (0, u_1]
    limit = np.sqrt(max(spec.beta_nodes[1], 0.0) / spec.u_nodes[1])
    return Classification.DEGENERATE if limit == 0.0 else Classification.NON_DEGENERATE


def beta_slope_bound(spec: BetaSpec, u_max: float) -> float:
    """Lipschitz constant of beta on [0, u_max] (above the jump for Heaviside)."""
    if spec.kind == BetaKind.POWER_LAW:
        return spec.m * u_max ** (spec.m - 1.0)
    if spec.kind == BetaKind.HEAVISIDE:
        return 1.0
    nodes = np.asarray(spec.u_nodes)
    values = np.asarray(spec.beta_nodes)
    slopes = np.diff(values) / np.diff(nodes)
    active = nodes[:-1] <= u_max
    return float(slopes[active].max()) if np.any(active) else float(slopes[-1])


# Barenblatt-Pattle -----------------------------------------------------------

@lru_cache(maxsize=None)
def barenblatt_gamma(m: float) -> float:
    """Integral of cos^((m+1)/(m-1)) over [-pi/2, pi/2]."""
    power = (m + 1.0) / (m - 1.0)
    value, _ = integrate.quad(lambda s: np.cos(s) ** power, -np.pi / 2, np.pi / 2,
                              epsabs=1e-13, epsrel=1e-13, limit=200)
    return value


@lru_cache(maxsize=None)
def barenblatt_constants(m: float) -> Tuple[float, float, float]:
    """(beta, kappa, C) of the self-similar profile."""
    if not m > 1:
        raise DomainError(f"Barenblatt profile needs m > 1, got {m}")
    b = 1.0 / (m + 1.0)
    kappa = (m - 1.0) / (2.0 * (m + 1.0) * m)
    c = (np.sqrt(kappa) / barenblatt_gamma(m)) ** (2.0 * (m - 1.0) / (m + 1.0))
    return b, kappa, c


def barenblatt_support(m: float, t: float) -> float:
    """Radius of the free boundary at time t."""
    b, kappa, c = barenblatt_constants(m)
    return float(t ** b * np.sqrt(c / kappa))


def barenblatt(m: float, t: float, x: ArrayLike) -> ArrayLike:
    if not t > 0:
        raise DomainError(f"Barenblatt profile is defined for t > 0, got t={t}")
    b, kappa, c = barenblatt_constants(m)
    xx = np.asarray(x, dtype=float)
    inner = np.maximum(c - kappa * xx ** 2 * t ** (-2.0 * b), 0.0)
    out = t ** (-b) * inner ** (1.0 / (m - 1.0))
    return _scalar_or_array(out, x)


def barenblatt_translated(t: float, x: ArrayLike) -> ArrayLike:
    """Exact m=3 solution started from U(1, .), closed form."""
    if t < 0:
        raise DomainError(f"translated Barenblatt solution needs t >= 0, got t={t}")
    xx = np.asarray(x, dtype=float)
    s = np.sqrt(t + 1.0)
    inner = np.maximum(1.0 / (np.pi * np.sqrt(3.0)) - xx ** 2 / (12.0 * s), 0.0)
    out = (t + 1.0) ** -0.25 * np.sqrt(inner)
    return _scalar_or_array(out, x)


# Initial densities -----------------------------------------------------------

class DensityKind(str, Enum):
    GAUSSIAN_MIXTURE = "gaussian_mixture"
    UNIFORM_MIXTURE = "uniform_mixture"
    NORMAL_UNIFORM_MIXTURE = "normal_uniform_mixture"
    SQRT_DENSITY = "sqrt_density"
    BARENBLATT_TRANSLATED = "barenblatt_translated"


@dataclass(frozen=True)
class DensitySpec:
    """An initial probability density.

    Mixture kinds store their components in ``weights`` plus either
    ``means``/``stds`` (Gaussian), ``intervals`` (uniform) or both for the
    normal/uniform mixture, whose first weight belongs to the Gaussian.
    """
    kind: DensityKind
    weights: Tuple[float, ...] = ()
    means: Tuple[float, ...] = ()
    stds: Tuple[float, ...] = ()
    intervals: Tuple[Tuple[float, float], ...] = ()
    m: float = 3.0

    def __post_init__(self):
        if self.kind in (DensityKind.GAUSSIAN_MIXTURE, DensityKind.UNIFORM_MIXTURE,
                         DensityKind.NORMAL_UNIFORM_MIXTURE):
            w = np.asarray(self.weights, dtype=float)
            if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ConfigurationError(f"mixture weights must be >= 0 and sum to 1, got {self.weights}")
        if self.kind == DensityKind.GAUSSIAN_MIXTURE:
            if not len(self.means) == len(self.stds) == len(self.weights):
                raise ConfigurationError("gaussian mixture needs one mean and std per weight")
        if self.kind == DensityKind.UNIFORM_MIXTURE and len(self.intervals) != len(self.weights):
            raise ConfigurationError("uniform mixture needs one interval per weight")
        if self.kind == DensityKind.NORMAL_UNIFORM_MIXTURE:
            if len(self.weights) != 2 or len(self.means) != 1 or len(self.intervals) != 1:
                raise ConfigurationError("normal/uniform mixture needs weights (w_normal, w_uniform), one mean/std and one interval")
        if any(s <= 0 for s in self.stds):
            raise ConfigurationError("standard deviations must be positive")
        if any(b <= a for a, b in self.intervals):
            raise ConfigurationError("uniform intervals must have b > a")
        if self.kind == DensityKind.BARENBLATT_TRANSLATED and not self.m > 1:
            raise ConfigurationError("Barenblatt initial density needs m > 1")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'weights': list(self.weights),
            'means': list(self.means),
            'stds': list(self.stds),
            'intervals': [list(iv) for iv in self.intervals],
            'm': self.m,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DensitySpec':
        return cls(
            kind=DensityKind(data['kind']),
            weights=tuple(float(w) for w in data.get('weights', ())),
            means=tuple(float(v) for v in data.get('means', ())),
            stds=tuple(float(v) for v in data.get('stds', ())),
            intervals=tuple((float(a), float(b)) for a, b in data.get('intervals', ())),
            m=float(data.get('m', 3.0)),
        )


def gaussian_mixture(weights, means, stds) -> DensitySpec:
    return DensitySpec(DensityKind.GAUSSIAN_MIXTURE, weights=tuple(weights),
                       means=tuple(means), stds=tuple(stds))


def trimodal(mu: float = 4.0, stds=(0.1, 0.2, 0.3)) -> DensitySpec:
    return gaussian_mixture((1 / 3, 1 / 3, 1 / 3), (-mu, 0.0, mu), stds)


def normal_uniform(mean: float = -1.0, std: float = 0.2, interval=(0.0, 1.0),
                   normal_weight: float = 0.5) -> DensitySpec:
    return DensitySpec(DensityKind.NORMAL_UNIFORM_MIXTURE,
                       weights=(normal_weight, 1.0 - normal_weight),
                       means=(mean,), stds=(std,), intervals=(tuple(interval),))


def uniform_mixture(weights=None, intervals=None) -> DensitySpec:
    if weights is None:
        # 1/5 on [0,1], 3/4 on [-1/5,1/5], 5/8 on [6/5,2] as mixture weights
        weights = (0.2, 0.3, 0.5)
        intervals = ((0.0, 1.0), (-0.2, 0.2), (1.2, 2.0))
    return DensitySpec(DensityKind.UNIFORM_MIXTURE, weights=tuple(weights),
                       intervals=tuple(tuple(iv) for iv in intervals))


def sqrt_density() -> DensitySpec:
    return DensitySpec(DensityKind.SQRT_DENSITY)


def barenblatt_translated_density(m: float = 3.0) -> DensitySpec:
    return DensitySpec(DensityKind.BARENBLATT_TRANSLATED, m=m)


def _components(spec: DensitySpec) -> List[Tuple[float, str, float, float]]:
    """Mixture components as (weight, 'normal'|'uniform', p1, p2)."""
    if spec.kind == DensityKind.GAUSSIAN_MIXTURE:
        return [(w, 'normal', mu, s) for w, mu, s in zip(spec.weights, spec.means, spec.stds)]
    if spec.kind == DensityKind.UNIFORM_MIXTURE:
        return [(w, 'uniform', a, b) for w, (a, b) in zip(spec.weights, spec.intervals)]
    if spec.kind == DensityKind.NORMAL_UNIFORM_MIXTURE:
        (a, b), = spec.intervals
        return [(spec.weights[0], 'normal', spec.means[0], spec.stds[0]),
                (spec.weights[1], 'uniform', a, b)]
    return []


def _normal_pdf(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (np.sqrt(2.0 * np.pi) * sigma)


def density_eval(spec: DensitySpec, x: ArrayLike) -> ArrayLike:
    xx = np.asarray(x, dtype=float)
    if spec.kind == DensityKind.SQRT_DENSITY:
        out = np.where(np.abs(xx) <= 1.0, 0.75 * np.sqrt(np.abs(xx)), 0.0)
    elif spec.kind == DensityKind.BARENBLATT_TRANSLATED:
        out = np.asarray(barenblatt(spec.m, 1.0, xx))
    else:
        out = np.zeros_like(xx)
        for w, kind, p1, p2 in _components(spec):
            if kind == 'normal':
                out = out + w * _normal_pdf(xx, p1, p2)
            else:
                out = out + w * np.where((xx >= p1) & (xx <= p2), 1.0 / (p2 - p1), 0.0)
    return _scalar_or_array(out, x)


def density_cdf(spec: DensitySpec, x: ArrayLike) -> ArrayLike:
    xx = np.asarray(x, dtype=float)
    if spec.kind == DensityKind.SQRT_DENSITY:
        y = np.clip(xx, -1.0, 1.0)
        out = 0.5 + 0.5 * np.sign(y) * np.abs(y) ** 1.5
    elif spec.kind == DensityKind.BARENBLATT_TRANSLATED:
        radius = barenblatt_support(spec.m, 1.0)
        q = 1.0 / (spec.m - 1.0)
        s = np.clip((xx / radius + 1.0) / 2.0, 0.0, 1.0)
        out = special.betainc(q + 1.0, q + 1.0, s)
    else:
        out = np.zeros_like(xx)
        for w, kind, p1, p2 in _components(spec):
            if kind == 'normal':
                out = out + w * special.ndtr((xx - p1) / p2)
            else:
                out = out + w * np.clip((xx - p1) / (p2 - p1), 0.0, 1.0)
    return _scalar_or_array(out, x)


def density_support(spec: DensitySpec) -> Tuple[float, float]:
    """An interval holding all of the mass (Gaussians: 12 standard deviations)."""
    if spec.kind == DensityKind.SQRT_DENSITY:
        return -1.0, 1.0
    if spec.kind == DensityKind.BARENBLATT_TRANSLATED:
        r = barenblatt_support(spec.m, 1.0)
        return -r, r
    lows, highs = [], []
    for _, kind, p1, p2 in _components(spec):
        if kind == 'normal':
            lows.append(p1 - 12.0 * p2)
            highs.append(p1 + 12.0 * p2)
        else:
            lows.append(p1)
            highs.append(p2)
    return min(lows), max(highs)


def density_sample(spec: DensitySpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. draws by inverse CDF (after a categorical draw for mixtures)."""
    if n < 1:
        raise DomainError(f"sample size must be >= 1, got {n}")
    if spec.kind == DensityKind.SQRT_DENSITY:
        y = 2.0 * rng.random(n) - 1.0
        return np.sign(y) * np.abs(y) ** (2.0 / 3.0)
    if spec.kind == DensityKind.BARENBLATT_TRANSLATED:
        radius = barenblatt_support(spec.m, 1.0)
        q = 1.0 / (spec.m - 1.0)
        b = special.betaincinv(q + 1.0, q + 1.0, rng.random(n))
        return radius * (2.0 * b - 1.0)

    components = _components(spec)
    weights = np.array([c[0] for c in components])
    labels = rng.choice(len(components), size=n, p=weights / weights.sum())
    uniforms = rng.random(n)
    out = np.empty(n)
    for index, (_, kind, p1, p2) in enumerate(components):
        mask = labels == index
        if kind == 'normal':
            out[mask] = p1 + p2 * special.ndtri(np.maximum(uniforms[mask], np.finfo(float).tiny))
        else:
            out[mask] = p1 + (p2 - p1) * uniforms[mask]
    return out


def project(spec: DensitySpec, grid: Grid1D) -> GridField:
    """Point values of the density at the cell centres, t = 0."""
    return GridField(grid, np.asarray(density_eval(spec, grid.centers)), 0.0)

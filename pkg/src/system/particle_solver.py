"""Interacting-particle solver: explicit Euler for

    X^i_{k+1} = X^i_k + Phi(u^eps(t_k, X^i_k)) (W^i_{k+1} - W^i_k)

with u^eps the Gaussian kernel estimate of the particle cloud (self term
included) and eps re-selected every ``bandwidth_stride`` steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from utils import log_error, log_info
from .errors import BlowUpError, ConfigurationError
from .grid import Grid1D, GridField
from .kde import (EXACT_PAIR_LIMIT, KERNEL_TRUNCATION, BandwidthMethod, BandwidthReport,
                  Sample, kde_at_sites, kde_on_grid, select_bandwidth)
from .models import BetaSpec, DensitySpec, density_sample, phi_eval

INIT_STREAM = 0
INCREMENT_STREAM = 1
EXACT_INTERACTION_LIMIT = 5000
DISPLACEMENT_RTOL = 1e-12


@dataclass
class ParticleConfig:
    n: int
    dt: float
    T: float
    beta: BetaSpec
    init: DensitySpec
    seed: int = 0
    bandwidth_method: BandwidthMethod = BandwidthMethod.SOLVE_THE_EQUATION
    bandwidth_stride: int = 1
    snapshot_times: Sequence[float] = ()
    bandwidth_tol: float = 1e-3
    robust_spread: bool = False
    exact_pair_limit: int = EXACT_PAIR_LIMIT
    exact_interaction: bool = False
    track_particles: Sequence[int] = ()
    log_every: int = 0

    def __post_init__(self):
        self.bandwidth_method = BandwidthMethod(self.bandwidth_method)
        if self.n < 1:
            raise ConfigurationError(f"need at least one particle, got n={self.n}")
        if not self.dt > 0:
            raise ConfigurationError(f"time step must be positive, got dt={self.dt}")
        if self.T < 0:
            raise ConfigurationError(f"horizon must be >= 0, got T={self.T}")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigurationError(f"T={self.T} is not a whole number of steps dt={self.dt}")
        if self.bandwidth_stride < 1:
            raise ConfigurationError("bandwidth_stride must be >= 1")
        if not self.bandwidth_tol > 0:
            raise ConfigurationError(f"bandwidth_tol must be positive, got {self.bandwidth_tol}")
        if any(t < 0 or t > self.T * (1 + 1e-12) for t in self.snapshot_times):
            raise ConfigurationError(f"snapshot times must lie in [0, {self.T}]")
        if self.exact_interaction and self.n > EXACT_INTERACTION_LIMIT:
            raise ConfigurationError(
                f"untruncated interaction sums are limited to n <= {EXACT_INTERACTION_LIMIT}")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if any(i < 0 or i >= self.n for i in self.track_particles):
            raise ConfigurationError("tracked particle index out of range")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass(eq=False)
class ParticleEnsemble:
    positions: np.ndarray
    time: float
    epsilon: float
    step: int
    seed: int
    bandwidth: BandwidthReport
    site_density_max: float = float('nan')
    max_displacement: float = 0.0
    max_increment: float = 0.0
    phi_max: float = float('nan')

    @property
    def rng_state(self):
        # increments are keyed on (seed, step): this pair is the whole state
        return self.seed, self.step


@dataclass
class ParticleSnapshot:
    time: float
    ensemble: ParticleEnsemble
    bandwidth: BandwidthReport

    def __iter__(self):
        return iter((self.time, self.ensemble, self.bandwidth))


@dataclass
class ParticleRun:
    snapshots: List[ParticleSnapshot] = field(default_factory=list)
    times: List[float] = field(default_factory=list)
    site_density_max: List[float] = field(default_factory=list)
    max_displacement: List[float] = field(default_factory=list)
    max_increment: List[float] = field(default_factory=list)
    phi_max: List[float] = field(default_factory=list)
    bandwidths: List[BandwidthReport] = field(default_factory=list)
    trajectories: Dict[int, List[float]] = field(default_factory=dict)

    def frozen_from(self) -> Optional[int]:
        """First step index after which no particle ever moves again."""
        moves = np.asarray(self.max_displacement[1:])
        if moves.size == 0 or moves[-1] != 0.0:
            return None
        moving = np.nonzero(moves != 0.0)[0]
        return int(moving[-1] + 1) if moving.size else 0


def _generator(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed, spawn_key=(stream, step))
    return np.random.Generator(np.random.Philox(sequence))


def brownian_increments(seed: int, step: int, n: int, dt: float) -> np.ndarray:
    """N(0, dt) increments of step ``step``, one per particle in index order."""
    return np.sqrt(dt) * _generator(seed, INCREMENT_STREAM, step).standard_normal(n)


def displacement_bound_holds(max_displacement: float, phi_max: float, max_increment: float,
                             position_scale: float = 0.0) -> bool:
    """max_i |X_{k+1} - X_k| <= max_i Phi(u^eps(X_k)) * max_i |dW|, up to the
    rounding of adding a displacement to positions of size ``position_scale``."""
    if not (np.isfinite(phi_max) and np.isfinite(max_increment)):
        return False
    slack = float(np.spacing(abs(position_scale))) + np.finfo(float).tiny
    return bool(max_displacement <= phi_max * max_increment * (1.0 + DISPLACEMENT_RTOL) + slack)


def _select(config: ParticleConfig, positions: np.ndarray) -> BandwidthReport:
    return select_bandwidth(Sample(positions), config.bandwidth_method, tol=config.bandwidth_tol,
                            robust=config.robust_spread, exact_limit=config.exact_pair_limit)


def init_ensemble(config: ParticleConfig) -> ParticleEnsemble:
    positions = density_sample(config.init, config.n, _generator(config.seed, INIT_STREAM))
    report = _select(config, positions)
    return ParticleEnsemble(positions, 0.0, report.epsilon, 0, config.seed, report)


def euler_step(ens: ParticleEnsemble, config: ParticleConfig) -> ParticleEnsemble:
    if ens.time + config.dt > config.T + 0.5 * config.dt:
        raise ConfigurationError(f"step from t={ens.time} would pass the horizon T={config.T}")
    truncation = None if config.exact_interaction else KERNEL_TRUNCATION
    site_density = kde_at_sites(Sample(ens.positions), ens.epsilon, truncation)
    phi = np.asarray(phi_eval(config.beta, site_density))
    increments = brownian_increments(ens.seed, ens.step, ens.positions.size, config.dt)
    displacement = phi * increments
    positions = ens.positions + displacement
    time = (ens.step + 1) * config.dt
    if not np.all(np.isfinite(positions)):
        raise BlowUpError("non-finite particle position", time, last_good=ens)
    max_displacement = float(np.max(np.abs(positions - ens.positions)))
    max_increment = float(np.max(np.abs(increments)))
    phi_max = float(phi.max())
    scale = float(max(np.max(np.abs(ens.positions)), np.max(np.abs(positions))))
    if not displacement_bound_holds(max_displacement, phi_max, max_increment, scale):
        raise BlowUpError(f"particle moved {max_displacement:.6g}, more than Phi_max={phi_max:.6g} "
                          f"times max|dW|={max_increment:.6g}", time, last_good=ens)

    step = ens.step + 1
    report = ens.bandwidth
    if step % config.bandwidth_stride == 0:
        report = _select(config, positions)
    return ParticleEnsemble(
        positions=positions,
        time=time,
        epsilon=report.epsilon,
        step=step,
        seed=ens.seed,
        bandwidth=report,
        site_density_max=float(site_density.max()),
        max_displacement=max_displacement,
        max_increment=max_increment,
        phi_max=phi_max,
    )


def estimate_density(ens: ParticleEnsemble, grid: Grid1D) -> GridField:
    values = kde_on_grid(Sample(ens.positions), ens.epsilon, grid.centers)
    return GridField(grid, values, ens.time)


class ParticleSolver:
    def __init__(self, config: ParticleConfig):
        self.config = config
        self._step_callbacks: List[Callable[[ParticleEnsemble], None]] = []

    def add_step_callback(self, callback: Callable[[ParticleEnsemble], None]):
        """Called with the ensemble at t=0 and after every step."""
        self._step_callbacks.append(callback)

    def _notify(self, ens: ParticleEnsemble):
        for callback in self._step_callbacks:
            callback(ens)

    def run(self) -> ParticleRun:
        config = self.config
        n_steps = config.n_steps
        times = config.snapshot_times or (0.0, config.T)
        wanted = sorted({int(round(t / config.dt)) for t in times})
        result = ParticleRun()
        result.trajectories = {i: [] for i in config.track_particles}

        ens = init_ensemble(config)
        self._record(result, ens, wanted)
        for _ in range(n_steps):
            try:
                ens = euler_step(ens, config)
            except BlowUpError as e:
                e.partial = result
                log_error(f"particles: {e}; last good ensemble at t={ens.time:.6g}")
                raise
            self._record(result, ens, wanted)
            if config.log_every and ens.step % config.log_every == 0:
                log_info(f"[dim]particles: step {ens.step}/{n_steps}, eps={ens.epsilon:.4g}, "
                         f"max site density={ens.site_density_max:.4g}[/dim]")
        return result

    def _record(self, result: ParticleRun, ens: ParticleEnsemble, wanted: List[int]):
        result.times.append(ens.time)
        result.site_density_max.append(ens.site_density_max)
        result.max_displacement.append(ens.max_displacement)
        result.max_increment.append(ens.max_increment)
        result.phi_max.append(ens.phi_max)
        result.bandwidths.append(ens.bandwidth)
        for index, path in result.trajectories.items():
            path.append(float(ens.positions[index]))
        if ens.step in wanted:
            result.snapshots.append(ParticleSnapshot(ens.time, ens, ens.bandwidth))
        self._notify(ens)


def run_particles(config: ParticleConfig,
                  callbacks: Sequence[Callable[[ParticleEnsemble], None]] = ()) -> ParticleRun:
    solver = ParticleSolver(config)
    for callback in callbacks:
        solver.add_step_callback(callback)
    return solver.run()

"""Deterministic solver: relaxation system in the zero-relaxation limit,
ENO reconstruction at cell interfaces, Godunov fluxes on the characteristic
variables and explicit Runge-Kutta time stepping.

With w = beta(u) and v = -1/2 dw/dx the conservative update reads

    du_i/dt = -(F_{i+1/2} - F_{i-1/2}) / dx,
    F = 1/2 (v^- + v^+) + phi/2 (w^- - w^+),

where ^- is the trace from the cell on the left of an interface and ^+ the
trace from the cell on its right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils import log_debug, log_error, log_info, log_warning
from .errors import BlowUpError, ConfigurationError, DomainError
from .grid import Grid1D, GridField
from .models import (BetaKind, BetaSpec, DensitySpec, beta_eval, beta_slope_bound,
                     project)

MAX_ORDER = 6
PLATEAU_TOL = 0.02
PLATEAU_MIN_CELLS = 5
MAX_PRINCIPLE_TOL = 1e-3

Boundary = Tuple[Union[float, Sequence[float]], Union[float, Sequence[float]]]


# ENO tables ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EnoTables:
    """Lagrange weights on a k-point stencil shifted left by r cells.

    C[r]    : value at the left edge of the cell (row r) or its right edge (row r+1)
    D[r]    : derivative at the cell centre
    Dbar[r] : derivative at the left edge (row r) or right edge (row r+1)

    D and Dbar include the 1/dx factor.
    """
    k: int
    dx: float
    C: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray


def _lagrange_weights(k: int, s: float) -> List[float]:
    row = []
    for j in range(k):
        value = 1.0
        for l in range(k):
            if l != j:
                value *= (s - l) / (j - l)
        row.append(value)
    return row


def _lagrange_slopes(k: int, s: float) -> List[float]:
    row = []
    for j in range(k):
        denom = 1.0
        for l in range(k):
            if l != j:
                denom *= j - l
        total = 0.0
        for m in range(k):
            if m == j:
                continue
            term = 1.0
            for l in range(k):
                if l != j and l != m:
                    term *= s - l
            total += term
        row.append(total / denom)
    return row


def eno_tables(k: int, dx: float) -> EnoTables:
    if not 1 <= k <= MAX_ORDER:
        raise DomainError(f"ENO order must be in [1, {MAX_ORDER}], got k={k}")
    if not dx > 0:
        raise DomainError(f"grid spacing must be positive, got {dx}")
    c = np.array([_lagrange_weights(k, r - 0.5) for r in range(k + 1)])
    d = np.array([_lagrange_slopes(k, float(r)) for r in range(k)]) / dx
    dbar = np.array([_lagrange_slopes(k, r - 0.5) for r in range(k + 1)]) / dx
    return EnoTables(k, float(dx), c, d, dbar)


# Reconstruction --------------------------------------------------------------

def with_ghosts(values, k: int, left: Union[float, Sequence[float]] = 0.0,
                right: Union[float, Sequence[float]] = 0.0) -> np.ndarray:
    """Pad with k ghost cells per side (scalars broadcast, sequences ordered by x)."""
    lo = np.broadcast_to(np.asarray(left, dtype=float), (k,))
    hi = np.broadcast_to(np.asarray(right, dtype=float), (k,))
    return np.concatenate([lo, np.asarray(values, dtype=float), hi])


def _eno_shift(padded: np.ndarray, cells: np.ndarray, k: int) -> np.ndarray:
    # greedy Newton divided differences, growing from the one-cell stencil
    left = cells.copy()
    for level in range(1, k):
        diff = np.abs(np.diff(padded, n=level))
        grow_left = diff[left - 1] <= diff[left]
        left = np.where(grow_left, left - 1, left)
    return cells - left


def eno_stencil(values, i: int, k: int) -> int:
    """Left shift r of the ENO stencil {i-r, ..., i+k-1-r} for cell i of ``values``."""
    padded = np.asarray(values, dtype=float)
    if i - (k - 1) < 0 or i + k - 1 >= padded.size:
        raise DomainError(f"cell {i} needs {k - 1} neighbours on each side")
    return int(_eno_shift(padded, np.array([i]), k)[0])


def _stencil_values(padded: np.ndarray, nx: int, k: int, shifts: Optional[np.ndarray]):
    # cells -1 .. nx (one ghost per side) so every interface gets both traces
    cells = np.arange(k - 1, k + nx + 1)
    if shifts is None:
        shifts = _eno_shift(padded, cells, k)
    index = (cells - shifts)[:, None] + np.arange(k)[None, :]
    return padded[index], shifts


def _traces(stencil: np.ndarray, shifts: np.ndarray, table: np.ndarray):
    left_edge = np.einsum('ij,ij->i', stencil, table[shifts])
    right_edge = np.einsum('ij,ij->i', stencil, table[shifts + 1])
    # minus trace of interface j is the right edge of cell j-1
    return right_edge[:-1], left_edge[1:]


def reconstruct(values, tables: EnoTables, boundary: Boundary = (0.0, 0.0)):
    """(u^-, u^+) at the nx+1 interfaces of the interior cells ``values``."""
    k = tables.k
    nx = np.asarray(values).size
    padded = with_ghosts(values, k, *boundary)
    stencil, shifts = _stencil_values(padded, nx, k, None)
    return _traces(stencil, shifts, tables.C)


def reconstruct_derivative(values, tables: EnoTables, centered: bool = False,
                           boundary: Boundary = (0.0, 0.0)):
    """(dv^-, dv^+) at the interfaces and dv at the cell centres."""
    k = tables.k
    nx = np.asarray(values).size
    padded = with_ghosts(values, k, *boundary)
    shifts = None
    if centered:
        shifts = np.full(nx + 2, (k - 1) // 2)
    stencil, shifts = _stencil_values(padded, nx, k, shifts)
    dv_minus, dv_plus = _traces(stencil, shifts, tables.Dbar)
    centers = np.einsum('ij,ij->i', stencil[1:-1], tables.D[shifts[1:-1]])
    return dv_minus, dv_plus, centers


# Fluxes ----------------------------------------------------------------------

def godunov_flux(alpha, gamma, phi: float):
    """Upwind flux of f(q) = phi q for phi > 0: the left state is transported."""
    if not phi > 0:
        raise DomainError(f"relaxation speed must be positive, got {phi}")
    return phi * alpha


def characteristic_variables(u, v, w, phi: float):
    """(U, V, W): U moves right at speed phi, V moves left, W = u - w is static."""
    u, v, w = (np.asarray(a, dtype=float) for a in (u, v, w))
    return (v + phi * w) / (2.0 * phi), (-v + phi * w) / (2.0 * phi), u - w


def conservative_from_characteristic(U, V, W, phi: float):
    """Inverse of characteristic_variables: (u, v, w)."""
    U, V, W = (np.asarray(a, dtype=float) for a in (U, V, W))
    w = U + V
    return w + W, phi * (U - V), w


def interface_flux(v_minus, v_plus, w_minus, w_plus, phi: float) -> np.ndarray:
    # W does not enter the flux; pass u = w
    right_minus, left_minus, _ = characteristic_variables(w_minus, v_minus, w_minus, phi)
    right_plus, left_plus, _ = characteristic_variables(w_plus, v_plus, w_plus, phi)
    # U is upwinded from the left trace, V (speed -phi) from the right trace
    return godunov_flux(right_minus, right_plus, phi) - godunov_flux(left_plus, left_minus, phi)


def flux_balance(field: GridField, beta: BetaSpec, tables: EnoTables, phi: float,
                 boundary: Boundary = (0.0, 0.0)) -> np.ndarray:
    """Per-cell bracket F_i with du_i/dt = -F_i / (2 dx)."""
    u_minus, u_plus = reconstruct(field.values, tables, boundary)
    w_minus = np.asarray(beta_eval(beta, u_minus))
    w_plus = np.asarray(beta_eval(beta, u_plus))
    w_cells = np.asarray(beta_eval(beta, field.values))
    w_bounds = tuple(np.asarray(beta_eval(beta, np.asarray(b, dtype=float))) for b in boundary)
    dw_minus, dw_plus, _ = reconstruct_derivative(w_cells, tables, centered=True, boundary=w_bounds)
    flux = interface_flux(-0.5 * dw_minus, -0.5 * dw_plus, w_minus, w_plus, phi)
    balance = 2.0 * (flux[1:] - flux[:-1])
    if not np.all(np.isfinite(balance)):
        raise BlowUpError("non-finite flux", field.time, last_good=field)
    return balance


def spatial_rhs(field: GridField, beta: BetaSpec, tables: EnoTables, phi: float,
                boundary: Boundary = (0.0, 0.0)) -> np.ndarray:
    return -flux_balance(field, beta, tables, phi, boundary) / (2.0 * field.grid.dx)


# Runge-Kutta -----------------------------------------------------------------

@dataclass(frozen=True)
class RkTableau:
    name: str
    a_matrix: Tuple[Tuple[float, ...], ...]
    b_weights: Tuple[float, ...]

    def __post_init__(self):
        nu = len(self.b_weights)
        if len(self.a_matrix) != nu or any(len(row) != nu for row in self.a_matrix):
            raise ConfigurationError(f"tableau {self.name}: a must be {nu}x{nu}")
        for k, row in enumerate(self.a_matrix):
            if any(row[l] != 0.0 for l in range(k, nu)):
                raise ConfigurationError(f"tableau {self.name} is not explicit")
        if abs(sum(self.b_weights) - 1.0) > 1e-12:
            raise ConfigurationError(f"tableau {self.name}: weights must sum to 1")

    @property
    def stages(self) -> int:
        return len(self.b_weights)


TABLEAUX: Dict[str, RkTableau] = {
    'forward_euler': RkTableau('forward_euler', ((0.0,),), (1.0,)),
    'heun': RkTableau('heun', ((0.0, 0.0), (1.0, 0.0)), (0.5, 0.5)),
    'ssp_rk3': RkTableau('ssp_rk3',
                         ((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.25, 0.25, 0.0)),
                         (1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0)),
    'rk4': RkTableau('rk4',
                     ((0.0, 0.0, 0.0, 0.0), (0.5, 0.0, 0.0, 0.0),
                      (0.0, 0.5, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0)),
                     (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)),
}
DEFAULT_TABLEAU = 'ssp_rk3'


def get_tableau(tableau: Union[str, RkTableau]) -> RkTableau:
    if isinstance(tableau, RkTableau):
        return tableau
    try:
        return TABLEAUX[str(tableau).lower()]
    except KeyError:
        raise ConfigurationError(
            f"unknown tableau '{tableau}', expected one of {', '.join(TABLEAUX)}") from None


def advance_stages(u0: np.ndarray, tableau: RkTableau,
                   stage_operator: Callable[[np.ndarray], np.ndarray], scale: float) -> np.ndarray:
    """u^(k) = u0 - scale sum_l a_kl F^(l), result u0 - scale sum_k b_k F^(k)."""
    fluxes: List[np.ndarray] = []
    for k in range(tableau.stages):
        stage = u0.copy()
        for l, coefficient in enumerate(tableau.a_matrix[k][:k]):
            if coefficient != 0.0:
                stage -= scale * coefficient * fluxes[l]
        fluxes.append(stage_operator(stage))
    out = u0.copy()
    for weight, flux in zip(tableau.b_weights, fluxes):
        out -= scale * weight * flux
    return out


def rk_ode_step(y, dt: float, tableau: Union[str, RkTableau],
                rate: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """One explicit step of y' = rate(y)."""
    return advance_stages(np.asarray(y, dtype=float), get_tableau(tableau),
                          lambda s: -np.asarray(rate(s)), dt)


def rk_step(field: GridField, dt: float, tableau: Union[str, RkTableau], beta: BetaSpec,
            tables: EnoTables, phi: float, boundary: Boundary = (0.0, 0.0)) -> GridField:
    lam = dt / field.grid.dx
    time = field.time + dt

    def stage_flux(stage: np.ndarray) -> np.ndarray:
        return flux_balance(field.with_values(stage, field.time), beta, tables, phi, boundary)

    try:
        values = advance_stages(field.values, get_tableau(tableau), stage_flux, 0.5 * lam)
    except BlowUpError as e:
        raise BlowUpError("non-finite flux in a Runge-Kutta stage", time, last_good=field) from e
    if not np.all(np.isfinite(values)):
        raise BlowUpError("non-finite field after Runge-Kutta step", time, last_good=field)
    return field.with_values(values, time)


def cfl_dt(dx: float, c_stab: float) -> float:
    if not dx > 0 or not c_stab > 0:
        raise DomainError(f"cfl_dt needs dx > 0 and c_stab > 0, got {dx}, {c_stab}")
    return c_stab * dx * dx


# Diagnostics -----------------------------------------------------------------

def subcharacteristic_ok(beta: BetaSpec, u_max: float, phi: float) -> bool:
    return phi * phi >= beta_slope_bound(beta, u_max)


def plateau_interval(field: GridField, u_c: float,
                     tol: float = PLATEAU_TOL) -> Optional[Tuple[float, float, int]]:
    """Longest run of cells with |u - u_c| <= tol as (x_start, x_end, cells)."""
    near = np.abs(field.values - u_c) <= tol
    if not near.any():
        return None
    edges = np.diff(np.concatenate([[0], near.astype(np.int8), [0]]))
    starts = np.nonzero(edges == 1)[0]
    stops = np.nonzero(edges == -1)[0]
    longest = int(np.argmax(stops - starts))
    centers = field.grid.centers
    start, stop = starts[longest], stops[longest]
    return float(centers[start]), float(centers[stop - 1]), int(stop - start)


@dataclass
class FieldDiagnostics:
    time: float
    mass: float
    max: float
    plateau: Optional[Tuple[float, float, int]] = None

    @property
    def has_plateau(self) -> bool:
        return self.plateau is not None and self.plateau[2] >= PLATEAU_MIN_CELLS


def field_diagnostics(field: GridField, beta: BetaSpec) -> FieldDiagnostics:
    plateau = None
    if beta.kind == BetaKind.HEAVISIDE:
        plateau = plateau_interval(field, beta.u_c)
    return FieldDiagnostics(field.time, field.mass(), field.max(), plateau)


# Driver ----------------------------------------------------------------------

@dataclass
class RelaxationConfig:
    grid: Grid1D
    beta: BetaSpec
    init: DensitySpec
    T: float
    k: int = 3
    tableau: Union[str, RkTableau] = DEFAULT_TABLEAU
    phi: float = 1.0
    c_stab: float = 0.01
    dt: Optional[float] = None
    boundary: Boundary = (0.0, 0.0)
    snapshot_times: Sequence[float] = ()
    log_every: int = 0

    def __post_init__(self):
        self.tableau = get_tableau(self.tableau)
        if not 1 <= self.k <= MAX_ORDER:
            raise ConfigurationError(f"ENO order must be in [1, {MAX_ORDER}], got k={self.k}")
        if not self.phi > 0:
            raise ConfigurationError(f"relaxation speed phi must be positive, got {self.phi}")
        if self.T < 0:
            raise ConfigurationError(f"horizon must be >= 0, got T={self.T}")
        if not self.c_stab > 0:
            raise ConfigurationError(f"c_stab must be positive, got {self.c_stab}")
        bound = cfl_dt(self.grid.dx, self.c_stab)
        if self.dt is not None and not 0 < self.dt <= bound * (1 + 1e-9):
            raise ConfigurationError(
                f"dt={self.dt} violates the CFL bound {bound:.6g} (dx={self.grid.dx}, c_stab={self.c_stab})")
        if any(t < 0 or t > self.T * (1 + 1e-12) for t in self.snapshot_times):
            raise ConfigurationError(f"snapshot times must lie in [0, {self.T}]")

    @property
    def step_bound(self) -> float:
        return self.dt if self.dt is not None else cfl_dt(self.grid.dx, self.c_stab)


@dataclass
class RelaxationRun:
    snapshots: List[GridField] = field(default_factory=list)
    diagnostics: List[FieldDiagnostics] = field(default_factory=list)
    steps: int = 0

    @property
    def times(self) -> List[float]:
        return [f.time for f in self.snapshots]


def _output_times(config: RelaxationConfig) -> List[float]:
    times = sorted(set(float(t) for t in config.snapshot_times))
    return times or sorted({0.0, float(config.T)})


def run_relaxation(config: RelaxationConfig) -> RelaxationRun:
    tables = eno_tables(config.k, config.grid.dx)
    current = project(config.init, config.grid)
    dt_max = config.step_bound
    u_max = current.max()
    if not subcharacteristic_ok(config.beta, u_max, config.phi):
        log_warning(f"phi={config.phi} below sqrt(Lip beta)={np.sqrt(beta_slope_bound(config.beta, u_max)):.4g}, "
                    f"the relaxation scheme may be unstable")

    result = RelaxationRun()
    peak = current.max()

    def record(snapshot: GridField):
        nonlocal peak
        diag = field_diagnostics(snapshot, config.beta)
        if diag.max > peak + MAX_PRINCIPLE_TOL:
            log_warning(f"relaxation: max u rose from {peak:.6g} to {diag.max:.6g} at t={snapshot.time:.6g}")
        peak = max(peak, diag.max)
        result.snapshots.append(snapshot)
        result.diagnostics.append(diag)
        log_debug(f"relaxation: t={snapshot.time:.6g} mass={diag.mass:.12g} max={diag.max:.6g}")

    for target in _output_times(config):
        span = target - current.time
        if span > 0:
            n_sub = max(1, math.ceil(span / dt_max - 1e-9))
            h = span / n_sub
            for _ in range(n_sub):
                try:
                    current = rk_step(current, h, config.tableau, config.beta, tables,
                                      config.phi, config.boundary)
                except BlowUpError as e:
                    if not result.snapshots or result.snapshots[-1].time != e.last_good.time:
                        record(e.last_good)
                    e.partial = result
                    log_error(f"relaxation: {e}; last good snapshot at t={e.last_good.time:.6g}")
                    raise
                result.steps += 1
                if config.log_every and result.steps % config.log_every == 0:
                    log_info(f"[dim]relaxation: step {result.steps}, t={current.time:.6g}[/dim]")
            # land exactly on the output time
            current = current.with_values(current.values, target)
        record(current)

    final = result.diagnostics[-1] if result.diagnostics else None
    if final is not None and config.beta.kind == BetaKind.HEAVISIDE:
        if final.has_plateau:
            x0, x1, cells = final.plateau
            log_info(f"relaxation: plateau at u_c on [{x0:.4g}, {x1:.4g}] ({cells} cells) at t={final.time:.6g}")
        else:
            log_debug(f"relaxation: no plateau of {PLATEAU_MIN_CELLS}+ cells at u_c at t={final.time:.6g}")
    return result

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

from .errors import ConfigurationError, DomainError, GridMismatchError


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centred grid on [a, b] with nx cells."""
    a: float
    b: float
    nx: int

    def __post_init__(self):
        if not self.b > self.a:
            raise ConfigurationError(f"grid needs b > a, got [{self.a}, {self.b}]")
        if self.nx < 1:
            raise ConfigurationError(f"grid needs at least one cell, got nx={self.nx}")

    @classmethod
    def from_spacing(cls, a: float, b: float, dx: float) -> 'Grid1D':
        if not dx > 0:
            raise ConfigurationError(f"grid spacing must be positive, got {dx}")
        cells = (b - a) / dx
        nx = int(round(cells))
        if abs(cells - nx) > 1e-6 * max(1.0, cells):
            raise ConfigurationError(f"dx={dx} does not divide [{a}, {b}]")
        return cls(float(a), float(b), nx)

    @property
    def dx(self) -> float:
        return (self.b - self.a) / self.nx

    @property
    def centers(self) -> np.ndarray:
        # x_i = a - dx/2 + i dx, i = 1..nx
        return self.a + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def interfaces(self) -> np.ndarray:
        return self.a + np.arange(self.nx + 1) * self.dx

    def to_dict(self) -> Dict[str, Any]:
        return {'a': self.a, 'b': self.b, 'nx': self.nx}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Grid1D':
        return cls(float(data['a']), float(data['b']), int(data['nx']))


@dataclass(frozen=True, eq=False)
class GridField:
    grid: Grid1D
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.nx,):
            raise DomainError(f"field has {values.size} values for {self.grid.nx} cells")
        object.__setattr__(self, 'values', values)

    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.dx)

    def max(self) -> float:
        return float(np.max(self.values))

    def with_values(self, values: np.ndarray, time: float) -> 'GridField':
        return GridField(self.grid, values, time)

    def to_dict(self, with_grid: bool = True) -> Dict[str, Any]:
        data: Dict[str, Any] = {'time': self.time, 'values': self.values.tolist()}
        if with_grid:
            data['grid'] = self.grid.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any], grid: Optional[Grid1D] = None) -> 'GridField':
        """``grid`` stands in for a dict written with ``with_grid=False``."""
        if grid is None:
            grid = Grid1D.from_dict(data['grid'])
        return cls(grid, np.array(data['values'], dtype=float), float(data['time']))


def require_same_grid(fa: GridField, fb: GridField):
    if fa.grid != fb.grid:
        raise GridMismatchError(f"grids differ: {fa.grid} vs {fb.grid}")

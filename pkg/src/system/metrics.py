from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Union

import numpy as np

from .errors import DomainError
from .grid import GridField, require_same_grid


class Norm(str, Enum):
    L1 = "L1"
    L2 = "L2"


def lp_error(fa: GridField, fb: GridField, p: Union[str, Norm] = Norm.L2) -> float:
    """Discrete (sum |fa - fb|^p dx)^(1/p) on a shared grid."""
    require_same_grid(fa, fb)
    diff = np.abs(fa.values - fb.values)
    if Norm(p) == Norm.L1:
        return float(np.sum(diff) * fa.grid.dx)
    return float(np.sqrt(np.sum(diff * diff) * fa.grid.dx))


@dataclass(frozen=True)
class AttractingSetCheck:
    in_set: bool
    mass: float
    excess: float

    def to_dict(self) -> Dict[str, Any]:
        return {'in_set': self.in_set, 'mass': self.mass, 'excess': self.excess}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AttractingSetCheck':
        return cls(bool(data['in_set']), float(data['mass']), float(data['excess']))


def attracting_set_check(field: GridField, u_c: float, tol: float) -> AttractingSetCheck:
    """Membership in {f : integral f = 1, |f| <= u_c} up to tol."""
    if not u_c > 0:
        raise DomainError(f"threshold must be positive, got u_c={u_c}")
    mass = field.mass()
    peak = float(np.max(np.abs(field.values)))
    in_set = abs(mass - 1.0) <= tol and peak <= u_c + tol
    return AttractingSetCheck(bool(in_set), mass, max(0.0, peak - u_c))

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from .errors import ConfigurationError
from .grid import Grid1D
from .kde import EXACT_PAIR_LIMIT, BandwidthMethod
from .models import BetaKind, BetaSpec, DensityKind, DensitySpec
from .particle_solver import ParticleConfig
from .relaxation_solver import DEFAULT_TABLEAU, RelaxationConfig, cfl_dt

DEFAULT_CASES_PATH = Path(__file__).resolve().parents[2] / "cases"


class Scale(str, Enum):
    PAPER = "paper"
    DESK = "desk"


class Method(str, Enum):
    PARTICLE = "particle"
    RELAXATION = "relaxation"
    EXACT = "exact"


@dataclass
class TestCase:
    __test__ = False

    id: str
    beta: BetaSpec
    init: DensitySpec
    grid: Grid1D
    T: float
    dt_prob: float
    dt_det: float
    n_particles: int
    scale: Scale
    snapshot_times: Tuple[float, ...]
    seed: int = 0
    k: int = 3
    phi: float = 1.0
    c_stab: float = 0.01
    tableau: str = DEFAULT_TABLEAU
    bandwidth_method: BandwidthMethod = BandwidthMethod.SOLVE_THE_EQUATION
    bandwidth_stride: int = 1
    bandwidth_tol: float = 1e-3
    robust_spread: bool = False
    exact_pair_limit: int = EXACT_PAIR_LIMIT
    track_particles: Tuple[int, ...] = ()
    attracting_tol: float = 0.03
    log_every: int = 0
    description: str = ""

    @property
    def has_exact_solution(self) -> bool:
        return (self.init.kind == DensityKind.BARENBLATT_TRANSLATED
                and self.beta.kind == BetaKind.POWER_LAW and self.beta.m == 3.0)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt_prob))

    def particle_config(self) -> ParticleConfig:
        return ParticleConfig(
            n=self.n_particles, dt=self.dt_prob, T=self.T, beta=self.beta, init=self.init,
            seed=self.seed, bandwidth_method=self.bandwidth_method,
            bandwidth_stride=self.bandwidth_stride, snapshot_times=self.snapshot_times,
            bandwidth_tol=self.bandwidth_tol, robust_spread=self.robust_spread,
            exact_pair_limit=self.exact_pair_limit, track_particles=self.track_particles,
            log_every=self.log_every,
        )

    def relaxation_config(self, output_times=None) -> RelaxationConfig:
        return RelaxationConfig(
            grid=self.grid, beta=self.beta, init=self.init, T=self.T, k=self.k,
            tableau=self.tableau, phi=self.phi, c_stab=self.c_stab, dt=self.dt_det,
            snapshot_times=tuple(self.snapshot_times if output_times is None else output_times),
            log_every=self.log_every * max(1, math.ceil(self.dt_prob / self.dt_det - 1e-9)),
        )

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data['beta'] = self.beta.to_dict()
        data['init'] = self.init.to_dict()
        data['grid'] = self.grid.to_dict()
        data['scale'] = self.scale.value
        data['bandwidth_method'] = self.bandwidth_method.value
        data['snapshot_times'] = list(self.snapshot_times)
        data['track_particles'] = list(self.track_particles)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TestCase':
        data = dict(data)
        data['beta'] = BetaSpec.from_dict(data['beta'])
        data['init'] = DensitySpec.from_dict(data['init'])
        data['grid'] = Grid1D.from_dict(data['grid'])
        data['scale'] = Scale(data['scale'])
        data['bandwidth_method'] = BandwidthMethod(data['bandwidth_method'])
        data['snapshot_times'] = tuple(float(t) for t in data['snapshot_times'])
        data['track_particles'] = tuple(int(i) for i in data.get('track_particles', ()))
        return cls(**data)


# keys a config file or --set flag may touch
OVERRIDE_KEYS = (
    'u_c', 'm', 'phi_at_jump', 'a', 'b', 'dx', 'T', 'dt_prob', 'dt_det', 'n_particles', 'c_stab',
    'k', 'phi', 'tableau', 'bandwidth_method', 'bandwidth_stride', 'bandwidth_tol',
    'robust_spread', 'exact_pair_limit', 'snapshot_times', 'seed', 'track_particles',
    'attracting_tol', 'log_every',
)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """``key = value`` lines; values go through yaml.safe_load."""
    values: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(f"{source}:{number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ConfigurationError(f"{source}:{number}: missing key")
        try:
            values[key] = yaml.safe_load(value) if value else None
        except yaml.YAMLError as e:
            raise ConfigurationError(f"{source}:{number}: cannot parse value for '{key}': {e}") from None
    return values


def parse_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e.strerror}") from None
    return parse_config_text(text, str(path))


class CaseLoader:
    def __init__(self, cases_path: Optional[Path] = None):
        self.cases_path = Path(cases_path) if cases_path is not None else DEFAULT_CASES_PATH

    def available(self) -> List[str]:
        if not self.cases_path.exists():
            return []
        return sorted(p.stem for p in self.cases_path.glob("*.yaml"))

    def load_deck(self, case_id: str) -> Dict[str, Any]:
        deck_file = self.cases_path / f"{case_id.lower()}.yaml"
        if not deck_file.exists():
            known = ', '.join(self.available()) or 'none'
            raise ConfigurationError(f"unknown case '{case_id}' (known: {known})")
        with open(deck_file, 'r', encoding='utf-8') as f:
            deck = yaml.safe_load(f)
        if not isinstance(deck, dict):
            raise ConfigurationError(f"{deck_file}: deck must be a mapping")
        return deck

    def load(self, case_id: str, scale: Union[str, Scale] = Scale.DESK,
             overrides: Optional[Dict[str, Any]] = None) -> TestCase:
        scale = Scale(scale)
        deck = self.load_deck(case_id)
        if scale.value not in deck:
            raise ConfigurationError(f"case '{case_id}' has no {scale.value} section")
        return build_test_case(deck, scale, overrides or {})


def _flatten(deck: Dict[str, Any], scale: Scale) -> Dict[str, Any]:
    params = {key: value for key, value in deck.items() if key not in ('paper', 'desk')}
    params.update(deck.get(scale.value) or {})
    missing = [key for key in ('domain', 'beta', 'init', 'T') if key not in params]
    if missing:
        raise ConfigurationError(f"case deck is missing {', '.join(missing)}")
    a, b = params.pop('domain')
    params['a'], params['b'] = a, b
    beta = params.pop('beta')
    params['u_c'] = beta.get('u_c')
    params['m'] = beta.get('m')
    params['phi_at_jump'] = beta.get('phi_at_jump')
    params['_beta'] = beta
    return params


def _param(params: Dict[str, Any], key: str, default: Any) -> Any:
    """Deck value for key; the default only fills in keys that are absent or null."""
    value = params.get(key)
    return default if value is None else value


def build_test_case(deck: Dict[str, Any], scale: Scale, overrides: Dict[str, Any]) -> TestCase:
    params = _flatten(deck, scale)
    unknown = sorted(set(overrides) - set(OVERRIDE_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown configuration key(s): {', '.join(unknown)}")
    params.update(overrides)

    try:
        beta_data = dict(params.pop('_beta'))
        for key in ('u_c', 'm', 'phi_at_jump'):
            if params.get(key) is not None:
                beta_data[key] = params[key]
        beta = BetaSpec.from_dict(beta_data)
        init = DensitySpec.from_dict(params['init'])
        grid = Grid1D.from_spacing(float(params['a']), float(params['b']), float(params['dx']))
        c_stab = float(_param(params, 'c_stab', 0.01))
        dt_det = params.get('dt_det')
        dt_det = float(dt_det) if dt_det is not None else cfl_dt(grid.dx, c_stab)
        snapshot_times = tuple(float(t) for t in _param(params, 'snapshot_times', (0.0, params['T'])))
        if not snapshot_times:
            raise ConfigurationError("snapshot_times must name at least one time")
        attracting_tol = float(_param(params, 'attracting_tol', 0.03))
        if attracting_tol < 0:
            raise ConfigurationError(f"attracting_tol must be >= 0, got {attracting_tol}")
        case = TestCase(
            id=str(deck.get('id', params.get('id'))),
            beta=beta,
            init=init,
            grid=grid,
            T=float(params['T']),
            dt_prob=float(params['dt_prob']),
            dt_det=dt_det,
            n_particles=int(params['n_particles']),
            scale=scale,
            snapshot_times=snapshot_times,
            seed=int(_param(params, 'seed', 0)),
            k=int(_param(params, 'k', 3)),
            phi=float(_param(params, 'phi', 1.0)),
            c_stab=c_stab,
            tableau=str(_param(params, 'tableau', DEFAULT_TABLEAU)),
            bandwidth_method=BandwidthMethod(_param(params, 'bandwidth_method',
                                                    BandwidthMethod.SOLVE_THE_EQUATION)),
            bandwidth_stride=int(_param(params, 'bandwidth_stride', 1)),
            bandwidth_tol=float(_param(params, 'bandwidth_tol', 1e-3)),
            robust_spread=bool(_param(params, 'robust_spread', False)),
            exact_pair_limit=int(_param(params, 'exact_pair_limit', EXACT_PAIR_LIMIT)),
            track_particles=tuple(int(i) for i in _param(params, 'track_particles', ())),
            attracting_tol=attracting_tol,
            log_every=int(_param(params, 'log_every', 0)),
            description=str(_param(params, 'description', "")),
        )
    except KeyError as e:
        raise ConfigurationError(f"case deck is missing '{e.args[0]}'") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigurationError):
            raise
        raise ConfigurationError(f"bad value in case configuration: {e}") from None

    # the solver configs carry the remaining consistency checks
    case.particle_config()
    case.relaxation_config()
    return case

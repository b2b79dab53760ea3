# heralded_diqkd/utils/config.py
"""
Run configuration: a JSON file, environment overrides (prefix DIQKD_) and
command-line overrides, validated before any computation starts.

Precedence: flags > environment > file > defaults.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Mapping, Optional, Tuple

from heralded_diqkd.core.conic import SolverTolerances
from heralded_diqkd.core.schemes import SchemeConfig
from heralded_diqkd.utils.checks import CheckError

logger = logging.getLogger(__name__)

ENV_PREFIX = 'DIQKD_'
COMMANDS = ('simulate', 'certify', 'reproduce')
LEVELS = ('1', '1+AB', '2')
TARGETS = ('appendixC', 'fig1', 'fig3', 'table1', 'amplifier')
EPSILON_BOXES = ('per_source', 'truncation')

# environment variable -> (RunConfig field, tolerance field or None)
ENV_FIELDS = {
    'WORKERS': ('workers', None),
    'SEED': ('seed', None),
    'LEVEL': ('level', None),
    'OUT': ('out_dir', None),
    'TOL_GAP': ('tolerances', 'gap'),
    'TOL_FEAS': ('tolerances', 'feasibility'),
}


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration values."""
    def __init__(self, message: str, field: str = None, source: str = None):
        super().__init__(message)
        self.field = field
        self.source = source


@dataclass(frozen=True)
class Budget:
    starts: int = 20
    max_evals: int = 2000


@dataclass(frozen=True)
class RunConfig:
    command: str = 'simulate'
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    level: str = '1+AB'
    tolerances: SolverTolerances = field(default_factory=SolverTolerances)
    workers: int = 1
    seed: int = 0
    out_dir: str = 'out'
    budget: Budget = field(default_factory=Budget)
    targets: Tuple[str, ...] = ('appendixC', 'fig1', 'amplifier')
    eta_l: float = 0.95
    distances_km: Tuple[float, ...] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
    nu_rep: float = 100e6
    l_att_km: float = 22.0
    epsilon_box: str = 'per_source'

    def to_dict(self) -> dict:
        data = asdict(self)
        data['scheme'] = self.scheme.to_dict()
        data['targets'] = list(self.targets)
        data['distances_km'] = list(self.distances_km)
        return data


def _coerce_int(name: str, value: Any, source: str) -> int:
    try:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {value!r}", name, source)


def _coerce_float(name: str, value: Any, source: str) -> float:
    try:
        if isinstance(value, bool):
            raise ValueError
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}", name, source)


def _coerce_str(name: str, value: Any, source: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}", name, source)
    return value


def _coerce_list(name: str, value: Any, source: str, item) -> tuple:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{name} must be a list, got {value!r}", name, source)
    return tuple(item(name, v, source) for v in value)


def _coerce_mapping(name: str, value: Any, source: str) -> dict:
    if not isinstance(value, Mapping):
        raise ConfigError(f"{name} must be an object, got {value!r}", name, source)
    return dict(value)


def _tolerances(data: Mapping[str, Any], base: SolverTolerances, source: str) -> SolverTolerances:
    known = {f.name: f.type for f in fields(SolverTolerances)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown tolerance fields: {', '.join(unknown)}", 'tolerances', source)
    changes = {}
    for name, value in data.items():
        if name == 'solver':
            changes[name] = _coerce_str(f'tolerances.{name}', value, source)
        elif name == 'max_iter':
            changes[name] = _coerce_int(f'tolerances.{name}', value, source)
        else:
            changes[name] = _coerce_float(f'tolerances.{name}', value, source)
    return replace(base, **changes)


def _apply(config: RunConfig, data: Mapping[str, Any], source: str) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown configuration fields: {', '.join(unknown)}", unknown[0], source)
    changes: Dict[str, Any] = {}
    for name, value in data.items():
        if name == 'scheme':
            if not isinstance(value, SchemeConfig):
                mapping = _coerce_mapping(name, value, source)
                try:
                    value = SchemeConfig.from_dict(mapping)
                except (CheckError, TypeError) as e:
                    raise ConfigError(f"Invalid scheme configuration: {e}", 'scheme', source) from e
            changes[name] = value
        elif name == 'tolerances':
            changes[name] = _tolerances(_coerce_mapping(name, value, source), config.tolerances, source)
        elif name == 'budget':
            value = _coerce_mapping(name, value, source)
            extra = sorted(set(value) - {'starts', 'max_evals'})
            if extra:
                raise ConfigError(f"Unknown budget fields: {', '.join(extra)}", 'budget', source)
            changes[name] = replace(config.budget, **{k: _coerce_int(f'budget.{k}', v, source)
                                                      for k, v in value.items()})
        elif name in ('workers', 'seed'):
            changes[name] = _coerce_int(name, value, source)
        elif name in ('eta_l', 'nu_rep', 'l_att_km'):
            changes[name] = _coerce_float(name, value, source)
        elif name == 'targets':
            changes[name] = _coerce_list(name, value, source, _coerce_str)
        elif name == 'distances_km':
            changes[name] = _coerce_list(name, value, source, _coerce_float)
        elif name in ('command', 'level', 'out_dir', 'epsilon_box'):
            changes[name] = _coerce_str(name, value, source)
        else:
            raise ConfigError(f"Configuration field {name} cannot be set here", name, source)
    return replace(config, **changes)


def validate_run_config(config: RunConfig) -> RunConfig:
    """
    Raises:
        ConfigError: On the first invalid field.
    """
    if config.command not in COMMANDS:
        raise ConfigError(f"Unknown command {config.command!r}", 'command')
    if config.level not in LEVELS:
        raise ConfigError(f"level must be one of {', '.join(LEVELS)}, got {config.level!r}", 'level')
    if config.workers < 1:
        raise ConfigError(f"workers must be at least 1, got {config.workers}", 'workers')
    if config.seed < 0:
        raise ConfigError(f"seed must be non-negative, got {config.seed}", 'seed')
    if config.budget.starts < 1 or config.budget.max_evals < 1:
        raise ConfigError("budget values must be positive", 'budget')
    bad = [t for t in config.targets if t not in TARGETS]
    if bad:
        raise ConfigError(f"Unknown reproduction targets: {', '.join(bad)}", 'targets')
    if not 0.0 < config.eta_l <= 1.0:
        raise ConfigError(f"eta_l must lie in (0, 1], got {config.eta_l}", 'eta_l')
    if any(d < 0 for d in config.distances_km):
        raise ConfigError("distances must be non-negative", 'distances_km')
    if config.nu_rep <= 0 or config.l_att_km <= 0:
        raise ConfigError("nu_rep and l_att_km must be positive", 'nu_rep')
    if config.epsilon_box not in EPSILON_BOXES:
        raise ConfigError(f"epsilon_box must be one of {', '.join(EPSILON_BOXES)}", 'epsilon_box')
    tol = config.tolerances
    if tol.feasibility <= 0 or tol.gap <= 0 or tol.rank <= 0 or tol.max_iter < 1:
        raise ConfigError("solver tolerances must be positive", 'tolerances')
    if not config.out_dir:
        raise ConfigError("out_dir must not be empty", 'out_dir')
    return config


def env_overrides(env: Mapping[str, str]) -> Dict[str, Any]:
    """Collects DIQKD_* variables into a partial configuration dictionary."""
    data: Dict[str, Any] = {}
    for suffix, (name, sub) in ENV_FIELDS.items():
        raw = env.get(ENV_PREFIX + suffix)
        if raw is None or raw == '':
            continue
        if sub is None:
            data[name] = raw
        else:
            data.setdefault(name, {})[sub] = raw
    return data


def parse_tol_overrides(pairs) -> Dict[str, str]:
    """Parses '--tol KEY=VALUE' arguments."""
    result = {}
    for pair in pairs or ():
        key, sep, value = pair.partition('=')
        if not sep or not key:
            raise ConfigError(f"--tol expects KEY=VALUE, got {pair!r}", 'tolerances', 'flags')
        result[key.strip()] = value.strip()
    return result


def load_run_config(path: Optional[str] = None, env: Mapping[str, str] = None,
                    overrides: Mapping[str, Any] = None) -> RunConfig:
    """
    Builds the run configuration from defaults, an optional JSON file, the environment
    and explicit overrides (already parsed command-line flags), then validates it.

    Raises:
        ConfigError: If the file cannot be read or parsed, or a value is invalid.
    """
    config = RunConfig()
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                data = json.load(handle)
        except OSError as e:
            raise ConfigError(f"Cannot read configuration file '{path}': {e}", 'config', path) from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Malformed JSON in '{path}': {e}", 'config', path) from e
        if not isinstance(data, dict):
            raise ConfigError(f"Configuration file '{path}' must hold a JSON object", 'config', path)
        config = _apply(config, data, path)
    environment = os.environ if env is None else env
    from_env = env_overrides(environment)
    if from_env:
        logger.debug("Environment overrides: %s", sorted(from_env))
        config = _apply(config, from_env, 'environment')
    if overrides:
        config = _apply(config, {k: v for k, v in overrides.items() if v is not None}, 'flags')
    return validate_run_config(config)

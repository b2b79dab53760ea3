# heralded_diqkd/core/keyrate.py
"""
Key rates of the heralded schemes: the min-entropy bound per heralded round, the
CHSH chain, key per second, and the searches built on them (parameter optimization,
critical local efficiencies, white-noise robustness and distance sweeps).

All optimizations follow one convention for the local efficiency eta_l: the herald
and measurement detectors both have efficiency eta_l, and CH station arms see
eta_l * eta_t.
"""
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, special

from heralded_diqkd.core.behavior import Behavior, chi, conditional_entropy
from heralded_diqkd.core.certify import (
    LEVELS, epsilon_upper, guessing_probability_robust, noise_robustness,
)
from heralded_diqkd.core.conic import SolverError, SolverTolerances
from heralded_diqkd.core.photonics import PhotonicsError
from heralded_diqkd.core.schemes import (
    ChConfig, MeasurementSetting, SchemeConfig, ShConfig, default_settings, simulate,
)
from heralded_diqkd.utils.checks import CheckError, validate_positive_int, validate_unit_interval
from heralded_diqkd.utils.executor import run_jobs

logger = logging.getLogger(__name__)

DEFAULT_L_ATT_KM = 22.0
DEFAULT_NU_REP = 100e6
DEFAULT_SOURCE_P = 1e-4
OBJECTIVES = ('key_rate', 'r_down', 'nonlocality')
SWEEP_COLUMNS = ('L_km', 'eta_t', 'p_herald', 'G', 'H', 'r_down', 'K_bits_per_s')

# Objective value given to points where the pipeline fails
FAILED_POINT = -1e3
# Noise robustness below this counts as local
NONLOCAL_THRESHOLD = 1e-7


class BracketError(RuntimeError):
    """Raised when a bisection interval does not straddle the threshold."""

    def __init__(self, message: str, lower: float, upper: float, values: Tuple[float, float]):
        super().__init__(message)
        self.lower = lower
        self.upper = upper
        self.values = values


# --- Closed forms ---

def transmission(distance_km: float, l_att_km: float = DEFAULT_L_ATT_KM) -> float:
    """eta_t = exp(-L / L_att)."""
    if distance_km < 0:
        raise CheckError(f"distance must be non-negative, got {distance_km}", 'distance_km', distance_km)
    if l_att_km <= 0:
        raise CheckError(f"attenuation length must be positive, got {l_att_km}", 'l_att_km', l_att_km)
    return math.exp(-distance_km / l_att_km)


def chsh_rate_chain(s: float) -> float:
    """Key per round from the CHSH value alone: 1 - chi(S), S clamped into [2, 2 sqrt(2)]."""
    return 1.0 - chi(s)


def key_per_second(nu_rep: float, p_herald: float, r: float) -> float:
    """nu_rep * p_herald * r, zero when r <= 0."""
    if nu_rep < 0:
        raise CheckError(f"nu_rep must be non-negative, got {nu_rep}", 'nu_rep', nu_rep)
    p_herald = validate_unit_interval('p_herald', p_herald)
    return nu_rep * p_herald * max(float(r), 0.0)


def r_down(behavior: Behavior, x_star: int, y_star: int, level: str = '1+AB', epsilon: float = 0.0,
           tolerances: SolverTolerances = SolverTolerances()) -> Tuple[float, float, float]:
    """
    Min-entropy bound on the secret key per heralded round.

    Returns:
        (r, G, H) with r = -log2 G - H(A|B) for the key settings (x_star, y_star).
    """
    if level not in LEVELS:
        raise CheckError(f"Unknown hierarchy level {level!r}", 'level', level)
    if not 0 <= y_star < behavior.scenario.mb:
        raise CheckError(f"y_star {y_star} is not a setting of Bob", 'y_star', y_star)
    g = guessing_probability_robust(behavior, x_star, epsilon, level, tolerances).value
    h = conditional_entropy(behavior, x_star, y_star)
    r = -math.log2(g) - h if g > 0 else math.inf
    return r, g, h


# --- Reports ---

@dataclass(frozen=True)
class OptimizerTrace:
    seed: int
    starts: int
    parameter_names: Tuple[str, ...]
    evaluations: Tuple[Tuple[int, Tuple[float, ...], float], ...] = field(repr=False)
    best_point: Tuple[float, ...]
    best_value: float
    budget_exhausted: bool

    def to_dict(self) -> dict:
        return {
            'seed': self.seed,
            'starts': self.starts,
            'parameter_names': list(self.parameter_names),
            'evaluation_count': len(self.evaluations),
            'evaluations': [[start, list(point), value] for start, point, value in self.evaluations],
            'best_point': dict(zip(self.parameter_names, self.best_point)),
            'best_value': self.best_value,
            'budget_exhausted': self.budget_exhausted,
        }


@dataclass(frozen=True)
class KeyRateReport:
    config: SchemeConfig
    p_herald: float
    g: float
    h: float
    r_down: float
    nu_rep: float
    key_rate: float
    epsilon: float
    level: str
    w_star: Optional[float] = None
    trace: Optional[OptimizerTrace] = None

    def to_dict(self) -> dict:
        data = {
            'G': self.g,
            'H': self.h,
            'r_down': self.r_down,
            'p_herald': self.p_herald,
            'nu_rep': self.nu_rep,
            'K': self.key_rate,
            'epsilon': self.epsilon,
            'level': self.level,
            'config': self.config.to_dict(),
        }
        if self.w_star is not None:
            data['w_star'] = self.w_star
        if self.trace is not None:
            data['optimizer'] = self.trace.to_dict()
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_key_rate(config: SchemeConfig, level: str = '1+AB', nu_rep: float = DEFAULT_NU_REP,
                      epsilon_box: str = 'per_source', robust: bool = True,
                      tolerances: SolverTolerances = SolverTolerances()) -> KeyRateReport:
    """Runs simulate -> epsilon_upper -> r_down -> key_per_second for one configuration."""
    result = simulate(config)
    epsilon = epsilon_upper(config, box=epsilon_box) if robust else 0.0
    x_star, y_star = config.key_pair
    r, g, h = r_down(result.behavior, x_star, y_star, level, epsilon, tolerances)
    return KeyRateReport(
        config=config, p_herald=result.p_herald, g=g, h=h, r_down=r, nu_rep=nu_rep,
        key_rate=key_per_second(nu_rep, result.p_herald, r), epsilon=epsilon, level=level,
    )


def config_at_efficiency(kind: str, eta_l: float, eta_t: float = 1.0, p: float = DEFAULT_SOURCE_P,
                         pbar: float = DEFAULT_SOURCE_P, n_b: int = 3) -> SchemeConfig:
    """
    Starting configuration for the searches. With n_b = 3 Bob's third setting is
    aligned with Alice's first and the pair (0, 2) generates the key.
    """
    settings_a, settings_b = default_settings(n_b)
    key_pair = (0, 2) if n_b >= 3 else (0, 0)
    common = dict(p=p, t=0.0, eta_d=eta_l, eta_h=eta_l, eta_t=eta_t,
                  settings_a=settings_a, settings_b=settings_b, key_pair=key_pair)
    if kind == 'SH':
        return ShConfig(pbar=pbar, **common)
    if kind == 'CH':
        return ChConfig(rescale_eta_t=True, **common)
    raise CheckError(f"Unknown scheme {kind!r}; expected 'SH' or 'CH'", 'scheme', kind)


# --- Parameter space ---

@dataclass(frozen=True)
class _Bound:
    name: str
    lower: float
    upper: float
    log: bool = False


@dataclass(frozen=True)
class ParameterSpace:
    """
    Unconstrained coordinates for a scheme configuration. Bounded parameters go
    through a logistic map (pbar on a log scale); analyzer angles are used as they
    are since settings are periodic in pi.
    """
    base: SchemeConfig
    free_phi: bool = False

    @property
    def bounds(self) -> Tuple[_Bound, ...]:
        if self.base.scheme == 'SH':
            bounds = [_Bound('T', 0.5, 1.0 - 1e-6), _Bound('t', 0.0, 1.0),
                      _Bound('pbar', 1e-6, 0.05, log=True)]
        else:
            bounds = [_Bound('T', 1e-6, 0.5), _Bound('t', 0.0, 1.0)]
        return tuple(bounds)

    @property
    def names(self) -> Tuple[str, ...]:
        names = [b.name for b in self.bounds]
        for party, settings in (('a', self.base.settings_a), ('b', self.base.settings_b)):
            names.extend(f'theta_{party}{i}' for i in range(len(settings)))
            if self.free_phi:
                names.extend(f'phi_{party}{i}' for i in range(len(settings)))
        return tuple(names)

    @staticmethod
    def _to_unit(bound: _Bound, value: float) -> float:
        if bound.log:
            lower, upper, value = math.log(bound.lower), math.log(bound.upper), math.log(max(value, bound.lower))
        else:
            lower, upper = bound.lower, bound.upper
        u = (value - lower) / (upper - lower)
        return min(max(u, 1e-9), 1.0 - 1e-9)

    @staticmethod
    def _from_unit(bound: _Bound, u: float) -> float:
        if bound.log:
            return math.exp(math.log(bound.lower) + u * (math.log(bound.upper) - math.log(bound.lower)))
        return bound.lower + u * (bound.upper - bound.lower)

    def encode(self, config: SchemeConfig) -> np.ndarray:
        z = [float(special.logit(self._to_unit(b, getattr(config, b.name)))) for b in self.bounds]
        for settings in (config.settings_a, config.settings_b):
            z.extend(s.theta for s in settings)
            if self.free_phi:
                z.extend(s.phi for s in settings)
        return np.array(z)

    def decode(self, z: Sequence[float]) -> SchemeConfig:
        z = list(z)
        changes = {}
        for bound in self.bounds:
            changes[bound.name] = self._from_unit(bound, float(special.expit(z.pop(0))))
        for name, settings in (('settings_a', self.base.settings_a), ('settings_b', self.base.settings_b)):
            thetas = [z.pop(0) for _ in settings]
            phis = [z.pop(0) for _ in settings] if self.free_phi else [s.phi for s in settings]
            changes[name] = tuple(MeasurementSetting(phi, theta) for phi, theta in zip(phis, thetas))
        return self.base.replace(**changes)

    def random_start(self, rng: np.random.Generator) -> np.ndarray:
        z = [float(special.logit(rng.uniform(0.05, 0.95))) for _ in self.bounds]
        count = len(self.names) - len(z)
        z.extend(rng.uniform(0.0, math.pi, size=count).tolist())
        return np.array(z)


# --- Optimization ---

def _objective_value(config: SchemeConfig, objective: str, level: str, nu_rep: float,
                     epsilon_box: str, robust: bool, tolerances: SolverTolerances) -> float:
    if objective == 'nonlocality':
        return noise_robustness(simulate(config).behavior, tolerances).w_star
    report = evaluate_key_rate(config, level, nu_rep, epsilon_box, robust, tolerances)
    if objective == 'r_down':
        return report.r_down
    # raw K where positive, r_down otherwise, so that the order is kept across r = 0
    return report.key_rate if report.r_down > 0 else report.r_down


@dataclass(frozen=True)
class _StartOutcome:
    index: int
    point: Tuple[float, ...]
    value: float
    evaluations: Tuple[Tuple[int, Tuple[float, ...], float], ...]
    exhausted: bool


def _run_start(space: ParameterSpace, evaluate: Callable[[SchemeConfig], float],
               index: int, z0: np.ndarray, max_evals: int, tol: float) -> _StartOutcome:
    evaluations = []

    def negated(z: np.ndarray) -> float:
        try:
            value = float(evaluate(space.decode(z)))
        except (SolverError, PhotonicsError) as e:
            logger.debug("start %d: point failed (%s)", index, e)
            value = FAILED_POINT
        if not math.isfinite(value):
            value = FAILED_POINT
        evaluations.append((index, tuple(float(v) for v in z), value))
        return -value

    result = optimize.minimize(negated, z0, method='Nelder-Mead',
                               options={'maxfev': max_evals, 'xatol': tol, 'fatol': tol})
    exhausted = result.nfev >= max_evals and not result.success
    best = max(evaluations, key=lambda item: item[2])
    logger.debug("start %d finished after %d evaluations: %.6e", index, result.nfev, best[2])
    return _StartOutcome(index, best[1], best[2], tuple(evaluations), exhausted)


def maximize_key(config: SchemeConfig, objective: str = 'key_rate', level: str = '1+AB',
                 starts: int = 20, max_evals: int = 2000, seed: int = 0, tol: float = 1e-6,
                 workers: int = 1, nu_rep: float = DEFAULT_NU_REP, epsilon_box: str = 'per_source',
                 robust: bool = True, tolerances: SolverTolerances = SolverTolerances(),
                 free_phi: bool = False, initial_points: Sequence[SchemeConfig] = ()) -> KeyRateReport:
    """
    Multi-start Nelder-Mead over T, t, the analyzer angles and, for SH, pbar; the
    source parameter p, the efficiencies and eta_t stay as in `config`.

    Start 0 is `config` itself, followed by `initial_points` and seeded random starts.

    Returns:
        The report of the best point found, with the full optimizer trace. When a
        start runs out of evaluations the trace is flagged and a warning is logged.
    """
    if objective not in OBJECTIVES:
        raise CheckError(f"Unknown objective {objective!r}", 'objective', objective)
    validate_positive_int('starts', starts)
    validate_positive_int('max_evals', max_evals)
    space = ParameterSpace(config, free_phi)
    rng = np.random.default_rng(seed)
    points = [space.encode(config)] + [space.encode(c) for c in initial_points]
    while len(points) < starts:
        points.append(space.random_start(rng))
    points = points[:max(starts, 1 + len(initial_points))]

    def evaluate(candidate: SchemeConfig) -> float:
        return _objective_value(candidate, objective, level, nu_rep, epsilon_box, robust, tolerances)

    outcomes: List[_StartOutcome] = run_jobs(
        lambda job: _run_start(space, evaluate, job[0], job[1], max_evals, tol),
        list(enumerate(points)), workers, label=f'{config.scheme} {objective} start')
    best = max(outcomes, key=lambda o: (o.value, -o.index))
    exhausted = any(o.exhausted for o in outcomes)
    if exhausted:
        logger.warning("Evaluation budget of %d exhausted in at least one start; reporting best so far",
                       max_evals)
    trace = OptimizerTrace(
        seed=seed, starts=len(points), parameter_names=space.names,
        evaluations=tuple(e for o in outcomes for e in o.evaluations),
        best_point=best.point, best_value=best.value, budget_exhausted=exhausted,
    )
    best_config = space.decode(best.point)
    if objective == 'nonlocality':
        result = simulate(best_config)
        w_star = noise_robustness(result.behavior, tolerances).w_star
        return KeyRateReport(best_config, result.p_herald, math.nan, math.nan, math.nan, nu_rep,
                             0.0, 0.0, level, w_star=w_star, trace=trace)
    report = evaluate_key_rate(best_config, level, nu_rep, epsilon_box, robust, tolerances)
    logger.info("%s best %s: r_down=%.4f, K=%.4g bit/s", config.scheme, objective, report.r_down,
                report.key_rate)
    return dataclasses.replace(report, trace=trace)


# --- Critical efficiencies ---

def critical_local_efficiency(kind: str, criterion: str = 'diqkd', lower: float = None, upper: float = 1.0,
                              xtol: float = 1e-3, p: float = DEFAULT_SOURCE_P, pbar: float = DEFAULT_SOURCE_P,
                              level: str = '1+AB', starts: int = 4, max_evals: int = 300, seed: int = 0,
                              workers: int = 1, epsilon_box: str = 'per_source',
                              tolerances: SolverTolerances = SolverTolerances()) -> float:
    """
    Smallest local efficiency at which the optimized scheme yields a positive key
    (criterion 'diqkd') or a nonlocal behavior (criterion 'nonlocality'), by bisection
    on eta_l at eta_t = 1. Each bisection point is re-optimized, warm-started from the
    previous optimum; epsilon is recomputed at every evaluated configuration.

    Raises:
        BracketError: If [lower, upper] does not straddle the threshold.
    """
    if criterion not in ('diqkd', 'nonlocality'):
        raise CheckError(f"Unknown criterion {criterion!r}", 'criterion', criterion)
    if lower is None:
        lower = 0.8 if criterion == 'diqkd' else 0.5
    objective = 'r_down' if criterion == 'diqkd' else 'nonlocality'
    threshold = 0.0 if criterion == 'diqkd' else NONLOCAL_THRESHOLD
    n_b = 3 if criterion == 'diqkd' else 2
    warm: List[SchemeConfig] = []

    def margin(eta_l: float) -> float:
        base = config_at_efficiency(kind, eta_l, 1.0, p, pbar, n_b)
        seeds = [base.replace(**{k: getattr(c, k) for k in ('T', 't', 'pbar', 'settings_a', 'settings_b')})
                 for c in warm[-1:]]
        report = maximize_key(base, objective, level, starts, max_evals, seed, 1e-6, workers,
                              epsilon_box=epsilon_box, tolerances=tolerances, initial_points=seeds)
        warm.append(report.config)
        value = report.w_star if criterion == 'nonlocality' else report.r_down
        logger.info("%s %s at eta_l=%.4f: %.6e", kind, criterion, eta_l, value)
        return value - threshold

    high = margin(upper)
    low = margin(lower)
    if high <= 0 or low > 0:
        raise BracketError(f"No threshold crossing in [{lower}, {upper}] for {kind} {criterion}",
                           lower, upper, (low, high))
    while upper - lower > xtol:
        middle = 0.5 * (lower + upper)
        if margin(middle) > 0:
            upper = middle
        else:
            lower = middle
    root = 0.5 * (lower + upper)
    logger.info("critical eta_l for %s (%s) = %.4f", kind, criterion, root)
    return float(root)


def max_noise_robustness(kind: str, eta_l: float = 1.0, p: float = DEFAULT_SOURCE_P,
                         pbar: float = DEFAULT_SOURCE_P, starts: int = 4, max_evals: int = 300,
                         seed: int = 0, workers: int = 1,
                         tolerances: SolverTolerances = SolverTolerances()) -> KeyRateReport:
    """White-noise robustness w* of the nonlocality-optimized behavior; w_star holds the value."""
    base = config_at_efficiency(kind, eta_l, 1.0, p, pbar, n_b=2)
    return maximize_key(base, 'nonlocality', starts=starts, max_evals=max_evals, seed=seed,
                        workers=workers, tolerances=tolerances)


# --- Distance sweeps ---

@dataclass(frozen=True)
class SweepRow:
    L_km: float
    eta_t: float
    p_herald: float
    G: float
    H: float
    r_down: float
    K_bits_per_s: float
    report: KeyRateReport = field(repr=False, compare=False)

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, column) for column in SWEEP_COLUMNS)


def _sweep_row(distance: float, eta_t: float, report: KeyRateReport) -> SweepRow:
    return SweepRow(distance, eta_t, report.p_herald, report.g, report.h, report.r_down,
                    report.key_rate, report)


def distance_sweep(kind: str, eta_l: float, distances_km: Sequence[float], p: float = DEFAULT_SOURCE_P,
                   pbar: float = DEFAULT_SOURCE_P, l_att_km: float = DEFAULT_L_ATT_KM,
                   nu_rep: float = DEFAULT_NU_REP, level: str = '1+AB', starts: int = 4,
                   max_evals: int = 300, seed: int = 0, workers: int = 1,
                   epsilon_box: str = 'per_source',
                   tolerances: SolverTolerances = SolverTolerances()) -> List[SweepRow]:
    """
    Optimized key rate at every distance, in increasing distance order. Each distance
    is warm-started from the previous optimum, and each optimum is re-evaluated at the
    next shorter distance so that shorter distances never report less key.
    """
    distances = sorted(float(d) for d in distances_km)
    rows: List[SweepRow] = []
    previous: Optional[SchemeConfig] = None
    for distance in distances:
        eta_t = transmission(distance, l_att_km)
        base = config_at_efficiency(kind, eta_l, eta_t, p, pbar)
        seeds = [base.replace(T=previous.T, t=previous.t, pbar=previous.pbar,
                              settings_a=previous.settings_a, settings_b=previous.settings_b)] \
            if previous is not None else []
        report = maximize_key(base, 'key_rate', level, starts, max_evals, seed, 1e-6, workers, nu_rep,
                              epsilon_box, tolerances=tolerances, initial_points=seeds)
        previous = report.config
        rows.append(_sweep_row(distance, eta_t, report))

    for i in range(len(rows) - 2, -1, -1):
        if rows[i].K_bits_per_s >= rows[i + 1].K_bits_per_s:
            continue
        moved = rows[i + 1].report.config.replace(eta_t=rows[i].eta_t)
        report = evaluate_key_rate(moved, level, nu_rep, epsilon_box, True, tolerances)
        if report.key_rate > rows[i].K_bits_per_s:
            rows[i] = _sweep_row(rows[i].L_km, rows[i].eta_t,
                                 dataclasses.replace(report, trace=rows[i].report.trace))
        if rows[i].K_bits_per_s < rows[i + 1].K_bits_per_s:
            logger.warning("Key rate increases between %.1f and %.1f km", rows[i].L_km, rows[i + 1].L_km)
    return rows

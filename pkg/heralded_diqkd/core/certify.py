# heralded_diqkd/core/certify.py
"""
Certification of Bell behaviors: locality by linear programming over deterministic
strategies, Eve's guessing probability by a moment-matrix (NPA) relaxation, and the
bound on the weight of source events beyond the simulated truncation.

Moment matrices use the Collins-Gisin parametrization: the last outcome of every
setting is dropped, words are products of the remaining projectors, and all moments
are taken real.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from heralded_diqkd.core import photonics
from heralded_diqkd.core.behavior import Behavior, Scenario, uniform_behavior
from heralded_diqkd.core.conic import (
    INFEASIBLE, OPTIMAL, ConicSolution, LinearConstraint, LpProblem, SdpProblem,
    SolverError, SolverTolerances, solve_lp, solve_sdp,
)
from heralded_diqkd.core.schemes import (
    A_H, A_V, AP_H, AP_V, B_H, B_V, SchemeConfig, herald_probability,
)
from heralded_diqkd.utils.checks import CheckError

logger = logging.getLogger(__name__)

MAX_STRATEGIES = 10_000_000
LEVELS = ('1', '1+AB', '2')

Operator = Tuple[str, int, int]          # ('A', x, a) or ('B', y, b)
Word = Tuple[Operator, ...]
MomentKey = Tuple[Word, Word]            # (Alice part, Bob part)


# --- Local polytope ---

@dataclass(frozen=True)
class DeterministicStrategy:
    alice: Tuple[int, ...]
    bob: Tuple[int, ...]

    def behavior(self, scenario: Scenario) -> Behavior:
        probs = np.zeros(scenario.shape)
        for x, a in enumerate(self.alice):
            for y, b in enumerate(self.bob):
                probs[x, y, a, b] = 1.0
        return Behavior(scenario, probs)


@dataclass(frozen=True, eq=False)
class LocalMembership:
    is_local: bool
    weights: Optional[np.ndarray]
    distance: float
    status: str


@dataclass(frozen=True, eq=False)
class NoiseRobustness:
    w_star: float
    weights: np.ndarray
    solution: ConicSolution = field(repr=False)


def _strategy_count(scenario: Scenario) -> int:
    return scenario.oa ** scenario.ma * scenario.ob ** scenario.mb


def deterministic_strategies(scenario: Scenario) -> List[DeterministicStrategy]:
    """
    All deterministic local strategies, Alice's assignment varying slowest.

    Raises:
        CheckError: If there are more than MAX_STRATEGIES of them.
    """
    count = _strategy_count(scenario)
    if count > MAX_STRATEGIES:
        raise CheckError(f"{count} deterministic strategies exceed the limit of {MAX_STRATEGIES}",
                         'scenario', scenario)
    return [DeterministicStrategy(a, b)
            for a in itertools.product(range(scenario.oa), repeat=scenario.ma)
            for b in itertools.product(range(scenario.ob), repeat=scenario.mb)]


def strategy_matrix(scenario: Scenario) -> np.ndarray:
    """Columns are the flattened behaviors of deterministic_strategies(scenario)."""
    count = _strategy_count(scenario)
    if count > MAX_STRATEGIES:
        raise CheckError(f"{count} deterministic strategies exceed the limit of {MAX_STRATEGIES}",
                         'scenario', scenario)
    alice = np.array(list(itertools.product(range(scenario.oa), repeat=scenario.ma)), dtype=int)
    bob = np.array(list(itertools.product(range(scenario.ob), repeat=scenario.mb)), dtype=int)
    matrix = np.zeros((int(np.prod(scenario.shape)), count))
    columns = np.arange(count).reshape(len(alice), len(bob))
    for x in range(scenario.ma):
        for y in range(scenario.mb):
            rows = np.ravel_multi_index(
                (x, y, alice[:, x][:, None], bob[:, y][None, :]), scenario.shape)
            matrix[rows.ravel(), columns.ravel()] = 1.0
    return matrix


def _membership_lp(behavior: Behavior) -> LpProblem:
    D = strategy_matrix(behavior.scenario)
    A = np.vstack([D, np.ones((1, D.shape[1]))])
    b = np.append(behavior.probs.ravel(), 1.0)
    return LpProblem(np.zeros(D.shape[1]), A, b)


def noise_robustness(behavior: Behavior, tolerances: SolverTolerances = SolverTolerances()) -> NoiseRobustness:
    """
    Smallest w such that (1 - w) p + w u is local, u uniform.

    Raises:
        SolverError: If the LP does not end Optimal.
    """
    D = strategy_matrix(behavior.scenario)
    p = behavior.probs.ravel()
    u = uniform_behavior(behavior.scenario).probs.ravel()
    A = np.vstack([
        np.column_stack([D, p - u]),
        np.append(np.ones(D.shape[1]), 0.0)[None, :],
    ])
    b = np.append(p, 1.0)
    c = np.zeros(D.shape[1] + 1)
    c[-1] = 1.0
    solution = solve_lp(LpProblem(c, A, b), tolerances).require_optimal('white-noise LP')
    x = solution.primal[0]
    return NoiseRobustness(max(0.0, float(x[-1])), x[:-1], solution)


def local_membership(behavior: Behavior, tolerances: SolverTolerances = SolverTolerances()) -> LocalMembership:
    """Decides membership in the local polytope; `distance` is the white-noise robustness."""
    solution = solve_lp(_membership_lp(behavior), tolerances)
    if solution.status not in (OPTIMAL, INFEASIBLE):
        raise SolverError(f"Membership LP ended with status {solution.status}", solution.status, solution)
    is_local = solution.status == OPTIMAL
    distance = 0.0 if is_local else noise_robustness(behavior, tolerances).w_star
    return LocalMembership(is_local, solution.primal[0] if is_local else None, distance, solution.status)


def local_decomposition(behavior: Behavior, tolerances: SolverTolerances = SolverTolerances(),
                        threshold: float = 1e-12) -> List[Tuple[float, DeterministicStrategy]]:
    """Nonzero weights on deterministic strategies reproducing a local behavior."""
    membership = local_membership(behavior, tolerances)
    if not membership.is_local:
        raise CheckError("Behavior is not local", 'behavior', membership.distance)
    strategies = deterministic_strategies(behavior.scenario)
    return [(float(w), s) for w, s in zip(membership.weights, strategies) if w > threshold]


# --- Moment matrices ---

@dataclass(frozen=True, eq=False)
class MomentStructure:
    scenario: Scenario
    level: str
    words: Tuple[Word, ...]
    classes: Dict[MomentKey, Tuple[Tuple[int, int], ...]]
    zeros: Tuple[Tuple[int, int], ...]

    @property
    def size(self) -> int:
        return len(self.words)

    def word_index(self, word: Word) -> int:
        return self.words.index(word)

    def cell(self, key: MomentKey) -> Tuple[int, int]:
        return self.classes[key][0]


def _reduce_party(word: Word) -> Optional[Word]:
    """Projector algebra of one party: P P = P, and P_a P_a' = 0 for a != a' of one setting."""
    stack: List[Operator] = []
    for op in word:
        if stack and stack[-1][1] == op[1]:
            if stack[-1][2] != op[2]:
                return None
            continue
        stack.append(op)
    return tuple(stack)


def _canonical(word: Word) -> Optional[MomentKey]:
    alice = _reduce_party(tuple(op for op in word if op[0] == 'A'))
    bob = _reduce_party(tuple(op for op in word if op[0] == 'B'))
    if alice is None or bob is None:
        return None
    return min((alice, bob), (alice[::-1], bob[::-1]))


def _operators(scenario: Scenario, party: str) -> List[Operator]:
    settings, outcomes = (scenario.ma, scenario.oa) if party == 'A' else (scenario.mb, scenario.ob)
    return [(party, s, o) for s in range(settings) for o in range(outcomes - 1)]


@lru_cache(maxsize=32)
def moment_structure(scenario: Scenario, level: str = '1+AB') -> MomentStructure:
    """
    Words and moment equivalence classes for NPA level '1', '1+AB' or '2'.

    Raises:
        CheckError: For any other level.
    """
    if level not in LEVELS:
        raise CheckError(f"Unsupported NPA level {level!r}; expected one of {LEVELS}", 'level', level)
    alice = _operators(scenario, 'A')
    bob = _operators(scenario, 'B')
    words: List[Word] = [()] + [(op,) for op in alice] + [(op,) for op in bob]
    if level in ('1+AB', '2'):
        words += [(a, b) for a in alice for b in bob]
    if level == '2':
        words += [(a1, a2) for a1 in alice for a2 in alice if a1[1] != a2[1]]
        words += [(b1, b2) for b1 in bob for b2 in bob if b1[1] != b2[1]]

    classes: Dict[MomentKey, List[Tuple[int, int]]] = {}
    zeros: List[Tuple[int, int]] = []
    for i, u in enumerate(words):
        for j in range(i, len(words)):
            key = _canonical(u[::-1] + words[j])
            if key is None:
                zeros.append((i, j))
            else:
                classes.setdefault(key, []).append((i, j))
    logger.debug("Moment structure level %s: size %d, %d classes", level, len(words), len(classes))
    return MomentStructure(scenario, level, tuple(words),
                           {k: tuple(v) for k, v in classes.items()}, tuple(zeros))


def _cg_terms(scenario: Scenario) -> List[Tuple[str, MomentKey]]:
    alice = _operators(scenario, 'A')
    bob = _operators(scenario, 'B')
    terms = [('norm', ((), ()))]
    terms += [(f"A[{a}|{x}]", ((('A', x, a),), ())) for _, x, a in alice]
    terms += [(f"B[{b}|{y}]", ((), (('B', y, b),))) for _, y, b in bob]
    terms += [(f"AB[{a},{b}|{x},{y}]", ((('A', x, a),), (('B', y, b),)))
              for _, x, a in alice for _, y, b in bob]
    return terms


def cg_vector(behavior: Behavior) -> Dict[str, float]:
    """Collins-Gisin entries of a behavior, keyed by label."""
    alice = behavior.marginal_a()
    bob = behavior.marginal_b()
    values = {}
    for label, (a_word, b_word) in _cg_terms(behavior.scenario):
        if not a_word and not b_word:
            values[label] = 1.0
        elif not b_word:
            _, x, a = a_word[0]
            values[label] = float(alice[x, a])
        elif not a_word:
            _, y, b = b_word[0]
            values[label] = float(bob[y, b])
        else:
            (_, x, a), (_, y, b) = a_word[0], b_word[0]
            values[label] = float(behavior.probs[x, y, a, b])
    return values


@dataclass(frozen=True)
class BellFunctional:
    """f(p) = constant + sum of coefficients times Collins-Gisin entries of p."""
    constant: float
    coefficients: Dict[str, float]

    def evaluate(self, behavior: Behavior) -> float:
        values = cg_vector(behavior)
        return self.constant + sum(c * values[label] for label, c in self.coefficients.items())

    def to_dict(self) -> dict:
        return {'constant': self.constant, 'coefficients': dict(self.coefficients)}


@dataclass(frozen=True, eq=False)
class GuessingCertificate:
    value: float
    dual_bound: float
    bell_functional: BellFunctional
    level: str
    x_star: int
    epsilon: float
    solution: ConicSolution = field(repr=False)


def _structure_constraints(structure: MomentStructure, block: int) -> List[LinearConstraint]:
    constraints = []
    for cells in structure.classes.values():
        (i0, j0) = cells[0]
        for (i, j) in cells[1:]:
            constraints.append(LinearConstraint(((block, i0, j0, 1.0), (block, i, j, -1.0)), 0.0))
    for (i, j) in structure.zeros:
        constraints.append(LinearConstraint(((block, i, j, 1.0),), 0.0))
    return constraints


def _guessing_sdp(behavior: Behavior, x_star: int, level: str, epsilon: float,
                  guess_outcomes: Sequence[int]) -> Tuple[SdpProblem, List[Tuple[str, int]], Optional[int]]:
    scenario = behavior.scenario
    structure = moment_structure(scenario, level)
    blocks = len(guess_outcomes)
    robust = epsilon > 0.0
    quantum_block = blocks if robust else None
    values = cg_vector(behavior)

    constraints: List[LinearConstraint] = []
    for block in range(blocks + (1 if robust else 0)):
        constraints.extend(_structure_constraints(structure, block))

    behavior_rows: List[Tuple[str, int]] = []
    for label, key in _cg_terms(scenario):
        i, j = structure.cell(key)
        entries = [(block, i, j, 1.0) for block in range(blocks)]
        if robust:
            entries.append((quantum_block, i, j, -epsilon))
        behavior_rows.append((label, len(constraints)))
        constraints.append(LinearConstraint(tuple(entries), (1.0 - epsilon) * values[label]))

    normalization_row = None
    if robust:
        normalization_row = len(constraints)
        constraints.append(LinearConstraint(((quantum_block, 0, 0, 1.0),), 1.0))

    last = scenario.oa - 1
    objective: List[Tuple[int, int, int, float]] = []
    for block, e in enumerate(guess_outcomes):
        if e < last:
            i, j = structure.cell(((('A', x_star, e),), ()))
            objective.append((block, i, j, 1.0))
        else:
            objective.append((block, 0, 0, 1.0))
            for a in range(last):
                i, j = structure.cell(((('A', x_star, a),), ()))
                objective.append((block, i, j, -1.0))

    sizes = (structure.size,) * (blocks + (1 if robust else 0))
    return SdpProblem(sizes, tuple(objective), tuple(constraints)), behavior_rows, normalization_row


def guessing_probability(behavior: Behavior, x_star: int, level: str = '1+AB',
                         tolerances: SolverTolerances = SolverTolerances(),
                         guess_outcomes: Sequence[int] = None) -> GuessingCertificate:
    """
    Upper bound on Eve's probability of guessing Alice's outcome for setting x_star,
    with one moment matrix per guess and a dual Bell functional.

    Raises:
        SolverError: If the SDP does not end Optimal.
    """
    return guessing_probability_robust(behavior, x_star, 0.0, level, tolerances, guess_outcomes)


def guessing_probability_robust(behavior: Behavior, x_star: int, epsilon: float, level: str = '1+AB',
                                tolerances: SolverTolerances = SolverTolerances(),
                                guess_outcomes: Sequence[int] = None) -> GuessingCertificate:
    """
    Guessing probability when the observed behavior is only known to be
    (1 - epsilon) p + epsilon p_Q for some quantum p_Q.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise CheckError(f"epsilon must lie in [0, 1], got {epsilon}", 'epsilon', epsilon)
    if not 0 <= x_star < behavior.scenario.ma:
        raise CheckError(f"x_star {x_star} is not a setting of Alice", 'x_star', x_star)
    outcomes = tuple(guess_outcomes) if guess_outcomes is not None else tuple(range(behavior.scenario.oa))
    problem, behavior_rows, normalization_row = _guessing_sdp(behavior, x_star, level, epsilon, outcomes)
    solution = solve_sdp(problem, tolerances).require_optimal('guessing-probability SDP')

    y = solution.dual
    constant = 0.0
    coefficients: Dict[str, float] = {}
    for label, row in behavior_rows:
        weight = (1.0 - epsilon) * float(y[row])
        if label == 'norm':
            constant += weight
        else:
            coefficients[label] = weight
    if normalization_row is not None:
        constant += float(y[normalization_row])
    functional = BellFunctional(constant, coefficients)
    value = min(1.0, max(0.0, solution.primal_objective))
    logger.debug("G(x*=%d, eps=%.3e, level %s) = %.8f (dual %.8f)",
                 x_star, epsilon, level, value, solution.dual_objective)
    return GuessingCertificate(value, solution.dual_objective, functional, level, x_star, epsilon, solution)


def npa_feasible(behavior: Behavior, level: str = '1+AB',
                 tolerances: SolverTolerances = SolverTolerances()) -> bool:
    """Whether a PSD moment matrix of the given level reproduces the behavior."""
    structure = moment_structure(behavior.scenario, level)
    values = cg_vector(behavior)
    constraints = _structure_constraints(structure, 0)
    for label, key in _cg_terms(behavior.scenario):
        i, j = structure.cell(key)
        constraints.append(LinearConstraint(((0, i, j, 1.0),), values[label]))
    solution = solve_sdp(SdpProblem((structure.size,), tuple(), tuple(constraints)), tolerances)
    if solution.status not in (OPTIMAL, INFEASIBLE):
        raise SolverError(f"NPA feasibility SDP ended with status {solution.status}", solution.status, solution)
    return solution.status == OPTIMAL


# --- Truncation bound ---

def _sources(config: SchemeConfig) -> List[Tuple[str, float]]:
    if config.scheme == 'SH':
        return [('spdc', config.pbar), ('sp', config.p), ('sp', config.p)]
    return [('sp', config.p)] * 4


def _source_order(kind: str, count: int) -> int:
    return count if kind == 'spdc' else count - 1


def _source_probability(kind: str, parameter: float, count: int) -> float:
    if kind == 'spdc':
        return photonics.spdc_pair_distribution(parameter, count)
    return photonics.sp_photon_distribution(parameter, count)


def _product_state(scheme: str, counts: Tuple[int, ...]) -> photonics.StateMixture:
    if scheme == 'SH':
        pairs, n_h, n_v = counts
        register = photonics.ModeRegister((A_H, A_V, AP_H, AP_V), max(photonics.DEFAULT_CUTOFF, pairs))
        state = photonics.pure_mixture(photonics.psi_n(pairs, register))
        modes = (B_H, B_V)
        photons = (n_h, n_v)
    else:
        state = None
        modes = (A_H, A_V, B_H, B_V)
        photons = counts
    for mode, n in zip(modes, photons):
        register = photonics.ModeRegister((mode,), max(photonics.DEFAULT_CUTOFF, n))
        source = photonics.pure_mixture(photonics.fock_state(register, (n,)))
        state = source if state is None else photonics.tensor(state, source)
    return state


@lru_cache(maxsize=4096)
def _cached_herald(config: SchemeConfig, counts: Tuple[int, ...]) -> float:
    return herald_probability(config, _product_state(config.scheme, counts))


def conditional_herald_probability(config: SchemeConfig, counts: Sequence[int]) -> float:
    """p(herald | photon numbers), counts ordered as the scheme's sources."""
    # the herald does not depend on source parameters or analyzer settings
    key = config.replace(p=0.0, pbar=0.0, settings_a=((0.0, 0.0),), settings_b=((0.0, 0.0),), key_pair=(0, 0))
    return _cached_herald(key, tuple(int(c) for c in counts))


def epsilon_upper(config: SchemeConfig, order: int = None, box: str = 'per_source') -> float:
    """
    Upper bound on the fraction of heralded rounds produced by source events outside
    the order-`order` truncation. Events outside a finite box of photon numbers are
    assumed to herald with certainty.

    Args:
        box: 'per_source' bounds each source at the truncation order (SPDC pairs <= n,
             single-photon sources <= n + 1 photons); 'truncation' uses the truncation
             set itself.
    """
    order = config.truncation if order is None else order
    if box not in ('per_source', 'truncation'):
        raise CheckError(f"Unknown box {box!r}", 'box', box)
    sources = _sources(config)
    ranges = [range(0, order + 1) if kind == 'spdc' else range(1, order + 2) for kind, _ in sources]

    inside = 0.0
    kept = 0.0
    box_mass = 0.0
    for counts in itertools.product(*ranges):
        total_order = sum(_source_order(kind, n) for (kind, _), n in zip(sources, counts))
        in_truncation = total_order <= order
        if box == 'truncation' and not in_truncation:
            continue
        probability = math.prod(_source_probability(kind, parameter, n)
                                for (kind, parameter), n in zip(sources, counts))
        if probability == 0.0:
            continue
        heralded = probability * conditional_herald_probability(config, counts)
        box_mass += probability
        inside += heralded
        if in_truncation:
            kept += heralded
    denominator = inside + max(0.0, 1.0 - box_mass)
    if denominator <= 0.0:
        return 1.0
    epsilon = min(1.0, max(0.0, 1.0 - kept / denominator))
    logger.debug("epsilon_upper(order=%d, box=%s) = %.3e", order, box, epsilon)
    return epsilon

# heralded_diqkd/core/behavior.py
"""
Bell behaviors p(a, b | x, y), stored as arrays indexed [x, y, a, b], together with
the analytic pieces used on them: local-loss bookkeeping, entropies, CHSH, the
lossy Tsirelson family, the one-sided attack decomposition and the combined-attack
bound.
"""
import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats

from heralded_diqkd.utils.checks import CheckError, validate_positive_int, validate_unit_interval

logger = logging.getLogger(__name__)

NONNEGATIVE_SLACK = 1e-12
NORMALIZATION_TOL = 1e-9
TSIRELSON = 2.0 * math.sqrt(2.0)

# Outcome index of a two-detector analyzer is 2*click_H + click_V: 00, 01, 10, 11.
CLICK_OUTCOMES = ('00', '01', '10', '11')
# H-only -> +1, V-only -> -1, no click and double click -> +1
DEFAULT_CLICK_BINNING = (1, -1, 1, 1)


class RangeClampWarning(UserWarning):
    """Emitted when an argument is clamped into the domain of an analytic bound."""


@dataclass(frozen=True)
class Scenario:
    ma: int
    mb: int
    oa: int
    ob: int
    phi_a: Optional[int] = None
    phi_b: Optional[int] = None

    def __post_init__(self):
        for name in ('ma', 'mb'):
            validate_positive_int(name, getattr(self, name))
        for name in ('oa', 'ob'):
            validate_positive_int(name, getattr(self, name), minimum=2)
        for name, outcomes in (('phi_a', self.oa), ('phi_b', self.ob)):
            index = getattr(self, name)
            if index is not None and not (0 <= index < outcomes):
                raise CheckError(f"{name} must index an outcome, got {index}", name, index)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.ma, self.mb, self.oa, self.ob

    def to_dict(self) -> dict:
        return {'ma': self.ma, 'mb': self.mb, 'oa': self.oa, 'ob': self.ob,
                'phi_index_a': self.phi_a, 'phi_index_b': self.phi_b}

    @classmethod
    def from_dict(cls, data: dict) -> 'Scenario':
        return cls(data['ma'], data['mb'], data['oa'], data['ob'],
                   data.get('phi_index_a'), data.get('phi_index_b'))


@dataclass(frozen=True, eq=False)
class Behavior:
    scenario: Scenario
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.shape != self.scenario.shape:
            raise CheckError(f"Behavior array has shape {probs.shape}, expected {self.scenario.shape}",
                             'probs', probs.shape)
        if probs.min() < -NONNEGATIVE_SLACK:
            raise CheckError(f"Behavior has a negative entry {probs.min():.3e}", 'probs', probs.min())
        sums = probs.sum(axis=(2, 3))
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > NORMALIZATION_TOL:
            raise CheckError(f"Behavior is not normalized (deviation {worst:.3e})", 'probs', worst)
        probs = np.clip(probs, 0.0, None)
        probs.flags.writeable = False
        object.__setattr__(self, 'probs', probs)

    def marginal_a(self) -> np.ndarray:
        """p(a|x), averaged over Bob's settings; shape (ma, oa)."""
        return self.probs.sum(axis=3).mean(axis=1)

    def marginal_b(self) -> np.ndarray:
        """p(b|y), averaged over Alice's settings; shape (mb, ob)."""
        return self.probs.sum(axis=2).mean(axis=0)

    def no_signaling_violation(self) -> float:
        alice = self.probs.sum(axis=3)
        bob = self.probs.sum(axis=2)
        return float(max(np.max(np.abs(alice - alice[:, :1, :])),
                         np.max(np.abs(bob - bob[:1, :, :]))))

    def to_dict(self) -> dict:
        return {'scenario': self.scenario.to_dict(), 'probs': self.probs.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> 'Behavior':
        return cls(Scenario.from_dict(data['scenario']), np.asarray(data['probs'], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> 'Behavior':
        return cls.from_dict(json.loads(text))

    def csv_rows(self) -> List[Tuple[int, int, int, int, float]]:
        ma, mb, oa, ob = self.scenario.shape
        return [(x, y, a, b, float(self.probs[x, y, a, b]))
                for x in range(ma) for y in range(mb) for a in range(oa) for b in range(ob)]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(('x', 'y', 'a', 'b', 'p'))
        for x, y, a, b, value in self.csv_rows():
            writer.writerow((x, y, a, b, repr(value)))
        return buffer.getvalue()


@dataclass(frozen=True)
class AttackComponent:
    weight: float
    behavior: Behavior
    guess: Optional[Dict[int, int]]
    label: str = ''


@dataclass(frozen=True)
class AttackDecomposition:
    components: Tuple[AttackComponent, ...]
    eta: float
    target: Behavior = field(repr=False)

    def mixture(self) -> np.ndarray:
        return sum(c.weight * c.behavior.probs for c in self.components)

    def residual(self) -> float:
        return float(np.max(np.abs(self.mixture() - self.target.probs)))


# --- Constructors ---

def uniform_behavior(scenario: Scenario) -> Behavior:
    return Behavior(scenario, np.full(scenario.shape, 1.0 / (scenario.oa * scenario.ob)))


def deterministic_behavior(scenario: Scenario, alice: Sequence[int], bob: Sequence[int]) -> Behavior:
    probs = np.zeros(scenario.shape)
    for x, a in enumerate(alice):
        for y, b in enumerate(bob):
            probs[x, y, a, b] = 1.0
    return Behavior(scenario, probs)


def white_noise_mix(behavior: Behavior, w: float) -> Behavior:
    """(1 - w) p + w u with u uniform."""
    w = validate_unit_interval('w', w)
    u = uniform_behavior(behavior.scenario).probs
    return Behavior(behavior.scenario, (1.0 - w) * behavior.probs + w * u)


def relabel_b(behavior: Behavior, permutation: Sequence[int]) -> Behavior:
    """Bob's new outcome j is his old outcome permutation[j]."""
    s = behavior.scenario
    perm = [int(k) for k in permutation]
    if sorted(perm) != list(range(s.ob)):
        raise CheckError(f"{permutation} is not a permutation of Bob's outcomes", 'permutation', permutation)
    phi_b = perm.index(s.phi_b) if s.phi_b is not None else None
    return Behavior(Scenario(s.ma, s.mb, s.oa, s.ob, s.phi_a, phi_b), behavior.probs[:, :, :, perm])


def tsirelson_behavior() -> Behavior:
    """Binary behavior reaching S = 2 sqrt(2)."""
    c = math.cos(math.pi / 4)
    probs = np.zeros((2, 2, 2, 2))
    for x in range(2):
        for y in range(2):
            sign = -1.0 if (x, y) == (1, 1) else 1.0
            for a in range(2):
                for b in range(2):
                    same = 1.0 if a == b else -1.0
                    probs[x, y, a, b] = (1.0 + sign * same * c) / 4.0
    return Behavior(Scenario(2, 2, 2, 2), probs)


# --- Local loss ---

def apply_local_loss(behavior: Behavior, eta_a: float, eta_b: float) -> Behavior:
    """
    Inserts a 'no-click' outcome (the last index) on both sides: each side's
    outcome is kept with probability eta and replaced by phi otherwise.
    """
    eta_a = validate_unit_interval('eta_a', eta_a)
    eta_b = validate_unit_interval('eta_b', eta_b)
    s = behavior.scenario
    if s.phi_a is not None or s.phi_b is not None:
        raise CheckError("Behavior already has a no-click outcome", 'scenario', (s.phi_a, s.phi_b))
    p = behavior.probs
    lossy = np.zeros((s.ma, s.mb, s.oa + 1, s.ob + 1))
    alice = behavior.marginal_a()
    bob = behavior.marginal_b()
    for x in range(s.ma):
        for y in range(s.mb):
            lossy[x, y, :-1, :-1] = eta_a * eta_b * p[x, y]
            lossy[x, y, :-1, -1] = eta_a * (1.0 - eta_b) * alice[x]
            lossy[x, y, -1, :-1] = (1.0 - eta_a) * eta_b * bob[y]
            lossy[x, y, -1, -1] = (1.0 - eta_a) * (1.0 - eta_b)
    return Behavior(Scenario(s.ma, s.mb, s.oa + 1, s.ob + 1, s.oa, s.ob), lossy)


# --- Entropies ---

def binary_entropy(x: float) -> float:
    x = min(max(float(x), 0.0), 1.0)
    return float(stats.entropy([x, 1.0 - x], base=2))


def conditional_entropy(behavior: Behavior, x: int, y: int) -> float:
    """H(A | B) in bits for the setting pair (x, y)."""
    joint = behavior.probs[x, y]
    return float(stats.entropy(joint.ravel(), base=2) - stats.entropy(joint.sum(axis=0), base=2))


# --- CHSH ---

def _binning(outcomes: int, binning: Optional[Sequence[int]]) -> np.ndarray:
    if binning is None:
        binning = (1, -1) if outcomes == 2 else DEFAULT_CLICK_BINNING if outcomes == 4 else None
    if binning is None or len(binning) != outcomes:
        raise CheckError(f"A binning of {outcomes} outcomes to +/-1 is required", 'binning', binning)
    return np.asarray(binning, dtype=float)


def correlator(behavior: Behavior, x: int, y: int, binning_a=None, binning_b=None) -> float:
    alpha = _binning(behavior.scenario.oa, binning_a)
    beta = _binning(behavior.scenario.ob, binning_b)
    return float(alpha @ behavior.probs[x, y] @ beta)


def chsh(behavior: Behavior, binning_a: Sequence[int] = None, binning_b: Sequence[int] = None) -> float:
    """S = E00 + E01 + E10 - E11 on settings 0 and 1 of each party."""
    if behavior.scenario.ma < 2 or behavior.scenario.mb < 2:
        raise CheckError("CHSH needs two settings per party", 'scenario', behavior.scenario)
    e = [[correlator(behavior, x, y, binning_a, binning_b) for y in range(2)] for x in range(2)]
    return e[0][0] + e[0][1] + e[1][0] - e[1][1]


def chi(s: float) -> float:
    """h((1 + sqrt((S/2)^2 - 1)) / 2), the CHSH bound on Eve's information."""
    if s < 2.0 or s > TSIRELSON:
        clamped = min(max(s, 2.0), TSIRELSON)
        message = f"CHSH value {s:.6f} clamped to {clamped:.6f}"
        logger.warning(message)
        warnings.warn(message, RangeClampWarning, stacklevel=2)
        s = clamped
    return binary_entropy((1.0 + math.sqrt(max((s / 2.0) ** 2 - 1.0, 0.0))) / 2.0)


def gps_bound(s_cc: float, mu: float) -> float:
    """
    Eve's information on Alice's key bit when no-click events are kept and
    Alice's inconclusive rounds leak completely.
    """
    if mu >= 1.0:
        return 1.0
    if mu < 0.0:
        raise CheckError(f"mu must be non-negative, got {mu}", 'mu', mu)
    return min(1.0, (1.0 - mu) * chi((s_cc - 4.0 * mu) / (1.0 - mu)) + mu)


def gps_parameters(behavior: Behavior, binning_a=(1, -1), binning_b=(1, -1)) -> Tuple[float, float]:
    """
    (S_cc, mu) of a lossy binary behavior: the CHSH value of the conclusive-conclusive
    events and the ratio of one-sided inconclusive events to conclusive-conclusive ones,
    both averaged over the four CHSH setting pairs.
    """
    s = behavior.scenario
    conclusive_a = [a for a in range(s.oa) if a != s.phi_a]
    conclusive_b = [b for b in range(s.ob) if b != s.phi_b]
    alpha = np.asarray(binning_a, dtype=float)
    beta = np.asarray(binning_b, dtype=float)
    p_cc, p_one = 0.0, 0.0
    s_cc = 0.0
    for x in range(2):
        for y in range(2):
            block = behavior.probs[x, y]
            cc = block[np.ix_(conclusive_a, conclusive_b)]
            weight = cc.sum()
            p_cc += weight
            p_one += block.sum() - weight - (block[s.phi_a, s.phi_b]
                                             if s.phi_a is not None and s.phi_b is not None else 0.0)
            sign = -1.0 if (x, y) == (1, 1) else 1.0
            s_cc += sign * float(alpha @ cc @ beta) / weight if weight > 0 else 0.0
    return s_cc, p_one / p_cc


def conclusive_chsh(behavior: Behavior, binning_a=(1, -1), binning_b=(1, -1)) -> float:
    """CHSH value of the events where both parties obtained a conclusive outcome."""
    return gps_parameters(behavior, binning_a, binning_b)[0]


def lossy_tsirelson_one_sided(eta: float) -> Behavior:
    """Tsirelson-point behavior with Alice's detection efficiency eta; Alice's outcome 2 is phi."""
    eta = validate_unit_interval('eta', eta)
    s = (1.0 + math.cos(math.pi / 4)) / 4.0
    t = (1.0 - math.cos(math.pi / 4)) / 4.0
    probs = np.zeros((2, 2, 3, 2))
    for x in range(2):
        for y in range(2):
            aligned = [eta * s, eta * t] if (x, y) != (1, 1) else [eta * t, eta * s]
            probs[x, y, 0] = aligned
            probs[x, y, 1] = aligned[::-1]
            probs[x, y, 2] = [(1.0 - eta) / 2.0] * 2
    return Behavior(Scenario(2, 2, 3, 2, phi_a=2), probs)


def appendix_c_attack() -> AttackDecomposition:
    """
    Three-component attack on the one-sided lossy Tsirelson behavior at
    eta = (11 + sqrt(2)) / 17: a local part mixed with two quantum parts in which
    Alice's conclusive outcome for x = 0 is fixed.
    """
    s = (1.0 + math.cos(math.pi / 4)) / 4.0
    t = (1.0 - math.cos(math.pi / 4)) / 4.0
    p = math.sqrt(2.0) - 1.0
    lam = 1.0 / (3.0 - 2.0 * p)
    eta = (1.0 + lam) / 2.0
    scenario = Scenario(2, 2, 3, 2, phi_a=2)

    def block(rows_x0, rows_x1):
        # rows: a0, a1, phi; each row lists (y=0: b0 b1, y=1: b0 b1)
        probs = np.zeros((2, 2, 3, 2))
        for x, rows in enumerate((rows_x0, rows_x1)):
            for a, row in enumerate(rows):
                probs[x, 0, a] = row[:2]
                probs[x, 1, a] = row[2:]
        return Behavior(scenario, probs)

    zero = [0.0] * 4
    half = (1.0 - p) / 2.0
    local = block(
        [[s, t, s, t], [t, s, t, s], zero],
        [[p * s, p * t, p * t, p * s], [p * t, p * s, p * s, p * t], [half] * 4],
    )
    x1_quantum = [[s, t, t, s], [t, s, s, t], zero]
    fixed_zero = block([[s, t, s, t], zero, [t, s, t, s]], x1_quantum)
    fixed_one = block([zero, [t, s, t, s], [s, t, s, t]], x1_quantum)
    components = (
        AttackComponent(lam, local, None, 'local'),
        AttackComponent((1.0 - lam) / 2.0, fixed_zero, {0: 0}, 'x0 outcome fixed to 0'),
        AttackComponent((1.0 - lam) / 2.0, fixed_one, {0: 1}, 'x0 outcome fixed to 1'),
    )
    return AttackDecomposition(components, eta, lossy_tsirelson_one_sided(eta))


# --- Combined attack ---

def eta_c(n_k: int, m: int) -> float:
    """Efficiency at which Eve's combined attack makes all key rounds deterministic."""
    validate_positive_int('n_k', n_k)
    validate_positive_int('m', m)
    if n_k > m:
        raise CheckError(f"n_k = {n_k} key settings exceed the m = {m} settings in total", 'n_k', n_k)
    return 1.0 / (n_k + 1) if n_k < m else 1.0 / m


def combined_attack_hae(eta: float, n_k: int, m: int) -> float:
    """Upper bound on H(A|E) for Alice's key settings under the combined attack."""
    eta = validate_unit_interval('eta', eta)
    threshold = eta_c(n_k, m)
    return max(0.0, (eta - threshold) / (1.0 - threshold))


def correlated_bit_behavior(eta: float) -> Behavior:
    """Uniform perfectly correlated bit seen through detectors of efficiency eta on both sides."""
    ideal = np.zeros((1, 1, 2, 2))
    ideal[0, 0, 0, 0] = ideal[0, 0, 1, 1] = 0.5
    return apply_local_loss(Behavior(Scenario(1, 1, 2, 2), ideal), eta, eta)


def critical_eta_star(n_k: int, m: int = None, xtol: float = 1e-7) -> float:
    """
    Smallest efficiency for which the combined-attack bound on H(A|E) exceeds
    H(A|B) of a perfectly correlated uniform bit; `m` defaults to n_k + 1.
    """
    m = n_k + 1 if m is None else m
    lower = eta_c(n_k, m)

    def gap(eta: float) -> float:
        return combined_attack_hae(eta, n_k, m) - conditional_entropy(correlated_bit_behavior(eta), 0, 0)

    root = optimize.bisect(gap, lower, 1.0, xtol=xtol)
    logger.debug("critical_eta_star(n_k=%s, m=%s) = %.6f", n_k, m, root)
    return float(root)

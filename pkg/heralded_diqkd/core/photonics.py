# heralded_diqkd/core/photonics.py
"""
Truncated Fock-space engine for polarization-encoded linear optics.

States are mixtures of unnormalized pure Fock kets. Each mixture term carries a
weight and an order tag (i, j) recording the powers of the single-photon source
parameter p and the SPDC parameter pbar it was built from, so that any order
truncation can be re-applied after the circuit has run.
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from types import MappingProxyType
from typing import Dict, Iterable, Mapping, Sequence, Tuple, Union

import numpy as np

from heralded_diqkd.utils.checks import (
    CheckError, validate_half_open, validate_positive_int, validate_unit_interval,
)

logger = logging.getLogger(__name__)

DEFAULT_CUTOFF = 3
AMPLITUDE_PRUNE = 1e-14
WEIGHT_PRUNE = 1e-18
UNITARITY_TOL = 1e-10

Occupation = Tuple[int, ...]
Order = Tuple[int, int]


class PhotonicsError(Exception):
    """Base class for failures raised while propagating a state through a circuit."""


class CutoffExceeded(PhotonicsError):
    """Raised when an occupation above the register cutoff receives a nonzero amplitude."""
    def __init__(self, message: str, mode=None, occupation: Occupation = None, cutoff: int = None):
        super().__init__(message)
        self.mode = mode
        self.occupation = occupation
        self.cutoff = cutoff


class NonUnitary(PhotonicsError):
    """Raised when a mode map deviates from unitarity by more than UNITARITY_TOL."""
    def __init__(self, message: str, deviation: float = None):
        super().__init__(message)
        self.deviation = deviation


@dataclass(frozen=True, order=True)
class Mode:
    """A field mode: party ('A', 'B'), arm ('' kept, "'" travelling) and polarization."""
    party: str
    arm: str = ''
    pol: str = 'H'

    def __post_init__(self):
        if self.pol not in ('H', 'V'):
            raise CheckError(f"Polarization must be 'H' or 'V', got {self.pol!r}", 'pol', self.pol)
        if self.arm not in ('', "'"):
            raise CheckError(f"Arm must be '' or \"'\", got {self.arm!r}", 'arm', self.arm)

    @property
    def label(self) -> str:
        return f"{self.party}{self.arm}_{self.pol}"

    @classmethod
    def parse(cls, label: str) -> 'Mode':
        head, _, pol = label.partition('_')
        arm = "'" if head.endswith("'") else ''
        return cls(head.rstrip("'"), arm, pol)

    def __str__(self) -> str:
        return self.label


def polarization_pair(party: str, arm: str = '') -> Tuple[Mode, Mode]:
    """Returns the (H, V) modes of one spatial mode."""
    return Mode(party, arm, 'H'), Mode(party, arm, 'V')


@dataclass(frozen=True)
class ModeRegister:
    modes: Tuple[Mode, ...]
    cutoff: int = DEFAULT_CUTOFF

    def __post_init__(self):
        object.__setattr__(self, 'modes', tuple(self.modes))
        if len(set(self.modes)) != len(self.modes):
            raise CheckError("Mode labels in a register must be unique", 'modes', self.modes)
        validate_positive_int('cutoff', self.cutoff)

    @cached_property
    def _positions(self) -> Dict[Mode, int]:
        return {mode: i for i, mode in enumerate(self.modes)}

    def index(self, mode: Mode) -> int:
        try:
            return self._positions[mode]
        except KeyError:
            raise CheckError(f"Mode {mode} is not part of the register", 'mode', mode)

    def __len__(self) -> int:
        return len(self.modes)

    def with_cutoff(self, cutoff: int) -> 'ModeRegister':
        return ModeRegister(self.modes, cutoff)

    def extended(self, modes: Iterable[Mode]) -> 'ModeRegister':
        return ModeRegister(self.modes + tuple(modes), self.cutoff)


def _check_cutoff(register: ModeRegister, occupation: Occupation) -> None:
    for position, n in enumerate(occupation):
        if n > register.cutoff:
            mode = register.modes[position]
            raise CutoffExceeded(
                f"Occupation {n} of mode {mode} exceeds the cutoff {register.cutoff}",
                mode=mode, occupation=occupation, cutoff=register.cutoff,
            )


@dataclass(frozen=True, eq=False)
class FockKet:
    """Unnormalized pure state: occupation tuple -> complex amplitude."""
    register: ModeRegister
    terms: Mapping[Occupation, complex]

    def __post_init__(self):
        kept = {}
        for occupation, amplitude in self.terms.items():
            if abs(amplitude) < AMPLITUDE_PRUNE:
                continue
            if len(occupation) != len(self.register):
                raise CheckError(
                    f"Occupation {occupation} does not match a register of {len(self.register)} modes",
                    'occupation', occupation,
                )
            _check_cutoff(self.register, occupation)
            kept[tuple(occupation)] = complex(amplitude)
        object.__setattr__(self, 'terms', MappingProxyType(kept))

    def norm_squared(self) -> float:
        return float(sum(abs(a) ** 2 for a in self.terms.values()))

    def max_photons(self) -> int:
        return max((sum(occ) for occ in self.terms), default=0)

    def amplitude(self, occupation: Occupation) -> complex:
        return self.terms.get(tuple(occupation), 0j)


@dataclass(frozen=True)
class WeightedTerm:
    weight: float
    order: Order
    ket: FockKet

    @property
    def trace(self) -> float:
        return self.weight * self.ket.norm_squared()


@dataclass(frozen=True, eq=False)
class StateMixture:
    """Incoherent mixture sum_k weight_k |ket_k><ket_k| with order tags."""
    register: ModeRegister
    terms: Tuple[WeightedTerm, ...]

    def __post_init__(self):
        kept = tuple(t for t in self.terms if t.ket.terms and t.trace >= WEIGHT_PRUNE)
        object.__setattr__(self, 'terms', kept)

    def trace(self) -> float:
        return float(sum(t.trace for t in self.terms))

    def max_photons(self) -> int:
        return max((t.ket.max_photons() for t in self.terms), default=0)

    def truncated(self, max_order: int) -> 'StateMixture':
        """Keeps the terms whose total order i + j does not exceed `max_order`."""
        return StateMixture(self.register, tuple(t for t in self.terms if sum(t.order) <= max_order))

    def order_weights(self) -> Dict[Order, float]:
        weights: Dict[Order, float] = defaultdict(float)
        for t in self.terms:
            weights[t.order] += t.trace
        return dict(weights)

    def scaled(self, factor: float) -> 'StateMixture':
        return StateMixture(self.register, tuple(
            WeightedTerm(t.weight * factor, t.order, t.ket) for t in self.terms))

    def with_cutoff(self, cutoff: int) -> 'StateMixture':
        register = self.register.with_cutoff(cutoff)
        return StateMixture(register, tuple(
            WeightedTerm(t.weight, t.order, FockKet(register, t.ket.terms)) for t in self.terms))

    def extended(self, modes: Iterable[Mode]) -> 'StateMixture':
        """Appends vacuum modes to the register."""
        modes = tuple(modes)
        register = self.register.extended(modes)
        pad = (0,) * len(modes)
        return StateMixture(register, tuple(
            WeightedTerm(t.weight, t.order,
                         FockKet(register, {occ + pad: a for occ, a in t.ket.terms.items()}))
            for t in self.terms))


def fock_state(register: ModeRegister, occupation: Occupation, amplitude: complex = 1.0) -> FockKet:
    return FockKet(register, {tuple(occupation): amplitude})


def pure_mixture(ket: FockKet, weight: float = 1.0, order: Order = (0, 0)) -> StateMixture:
    return StateMixture(ket.register, (WeightedTerm(weight, order, ket),))


def tensor(first: StateMixture, second: StateMixture) -> StateMixture:
    """Product of two mixtures on disjoint registers; weights multiply, order tags add."""
    register = ModeRegister(first.register.modes + second.register.modes,
                            max(first.register.cutoff, second.register.cutoff))
    terms = []
    for a in first.terms:
        for b in second.terms:
            ket = FockKet(register, {
                occ_a + occ_b: amp_a * amp_b
                for occ_a, amp_a in a.ket.terms.items()
                for occ_b, amp_b in b.ket.terms.items()
            })
            order = (a.order[0] + b.order[0], a.order[1] + b.order[1])
            terms.append(WeightedTerm(a.weight * b.weight, order, ket))
    return StateMixture(register, tuple(terms))


# --- Linear optics ---

@dataclass(frozen=True, eq=False)
class ModeMap:
    """
    Unitary acting on creation operators of `modes`: a_j^dagger -> sum_i matrix[i, j] a_i^dagger.
    """
    modes: Tuple[Mode, ...]
    matrix: np.ndarray

    def __post_init__(self):
        modes = tuple(self.modes)
        matrix = np.array(self.matrix, dtype=complex)
        if matrix.shape != (len(modes), len(modes)):
            raise CheckError(f"Mode map of {len(modes)} modes needs a square matrix, got {matrix.shape}",
                             'matrix', matrix.shape)
        if len(set(modes)) != len(modes):
            raise CheckError("Mode map modes must be unique", 'modes', modes)
        deviation = float(np.max(np.abs(matrix.conj().T @ matrix - np.eye(len(modes)))))
        if deviation > UNITARITY_TOL:
            raise NonUnitary(f"Mode map deviates from unitarity by {deviation:.3e}", deviation)
        matrix.flags.writeable = False
        object.__setattr__(self, 'modes', modes)
        object.__setattr__(self, 'matrix', matrix)


def compose(*maps: ModeMap) -> ModeMap:
    """Single map equivalent to applying `maps` in the given order."""
    modes: list = []
    for m in maps:
        modes.extend(mode for mode in m.modes if mode not in modes)
    position = {mode: i for i, mode in enumerate(modes)}
    total = np.eye(len(modes), dtype=complex)
    for m in maps:
        step = np.eye(len(modes), dtype=complex)
        idx = [position[mode] for mode in m.modes]
        step[np.ix_(idx, idx)] = m.matrix
        total = step @ total
    return ModeMap(tuple(modes), total)


def beamsplitter(m1: Mode, m2: Mode, transmittance: float) -> ModeMap:
    """m1 -> sqrt(T) m1 + sqrt(1-T) m2 and m2 -> -sqrt(1-T) m1 + sqrt(T) m2."""
    transmittance = validate_unit_interval('transmittance', transmittance)
    t, r = math.sqrt(transmittance), math.sqrt(1.0 - transmittance)
    return ModeMap((m1, m2), [[t, -r], [r, t]])


def half_wave_plate(h: Mode, v: Mode, theta: float) -> ModeMap:
    c, s = math.cos(2 * theta), math.sin(2 * theta)
    return ModeMap((h, v), [[c, s], [s, -c]])


def quarter_wave_plate(h: Mode, v: Mode, phi: float) -> ModeMap:
    c, s = math.cos(phi), math.sin(phi)
    off = (1 - 1j) * s * c
    return ModeMap((h, v), [[c * c + 1j * s * s, off], [off, s * s + 1j * c * c]])


def analyzer(h: Mode, v: Mode, phi: float, theta: float) -> ModeMap:
    """QWP(phi) followed by HWP(theta); a PBS then separates h and v."""
    return compose(quarter_wave_plate(h, v, phi), half_wave_plate(h, v, theta))


def _expand_creation(matrix: np.ndarray, counts: Occupation) -> Sequence[Tuple[Occupation, complex]]:
    """Image of prod_k (a_k^dagger)^n_k / sqrt(n_k!) |0> as (occupation, amplitude) pairs."""
    size = len(counts)
    norm = math.prod(math.factorial(n) for n in counts)
    poly: Dict[Occupation, complex] = {(0,) * size: 1.0 / math.sqrt(norm)}
    for k, n in enumerate(counts):
        column = [(i, matrix[i, k]) for i in range(size) if abs(matrix[i, k]) > 0.0]
        for _ in range(n):
            grown: Dict[Occupation, complex] = defaultdict(complex)
            for mono, coefficient in poly.items():
                for i, u in column:
                    bumped = mono[:i] + (mono[i] + 1,) + mono[i + 1:]
                    grown[bumped] += coefficient * u
            poly = grown
    return [(mono, c * math.sqrt(math.prod(math.factorial(m) for m in mono)))
            for mono, c in poly.items() if abs(c) > 0.0]


def apply_mode_map(state: StateMixture, mode_map: ModeMap) -> StateMixture:
    """
    Applies a passive linear-optics unitary by substituting creation operators.

    Raises:
        CutoffExceeded: If an output occupation above the cutoff keeps a nonzero amplitude.
        CheckError: If a map mode is not in the register.
    """
    register = state.register
    positions = [register.index(mode) for mode in mode_map.modes]
    cache: Dict[Occupation, Sequence[Tuple[Occupation, complex]]] = {}
    terms = []
    for term in state.terms:
        out: Dict[Occupation, complex] = defaultdict(complex)
        for occupation, amplitude in term.ket.terms.items():
            counts = tuple(occupation[i] for i in positions)
            if counts not in cache:
                cache[counts] = _expand_creation(mode_map.matrix, counts)
            base = list(occupation)
            for sub, coefficient in cache[counts]:
                for i, n in zip(positions, sub):
                    base[i] = n
                out[tuple(base)] += amplitude * coefficient
        terms.append(WeightedTerm(term.weight, term.order, FockKet(register, out)))
    return StateMixture(register, tuple(terms))


def apply_loss(state: StateMixture, mode: Mode, eta: float) -> StateMixture:
    """
    Loss as a beamsplitter of transmittance `eta` with a vacuum ancilla that is traced out.
    Each term splits into one term per number of lost photons.
    """
    eta = validate_unit_interval('eta', eta)
    if eta == 1.0:
        return state
    k = state.register.index(mode)
    terms = []
    for term in state.terms:
        branches: Dict[int, Dict[Occupation, complex]] = defaultdict(lambda: defaultdict(complex))
        for occupation, amplitude in term.ket.terms.items():
            n = occupation[k]
            for lost in range(n + 1):
                factor = math.sqrt(math.comb(n, lost) * eta ** (n - lost) * (1.0 - eta) ** lost)
                if factor == 0.0:
                    continue
                kept = occupation[:k] + (n - lost,) + occupation[k + 1:]
                branches[lost][kept] += amplitude * factor
        for lost in sorted(branches):
            terms.append(WeightedTerm(term.weight, term.order, FockKet(state.register, branches[lost])))
    return StateMixture(state.register, tuple(terms))


def apply_losses(state: StateMixture, losses: Mapping[Mode, float]) -> StateMixture:
    for mode, eta in losses.items():
        state = apply_loss(state, mode, eta)
    return state


def _parse_pattern(pattern: Union[str, Sequence[int]], size: int) -> Tuple[bool, ...]:
    bits = tuple(int(c) for c in pattern)
    if len(bits) != size or any(b not in (0, 1) for b in bits):
        raise CheckError(f"Click pattern {pattern!r} must have {size} entries in {{0, 1}}",
                         'pattern', pattern)
    return tuple(bool(b) for b in bits)


def threshold_detect(state: StateMixture, modes: Sequence[Mode],
                     pattern: Union[str, Sequence[int]]) -> Tuple[float, StateMixture]:
    """
    Projects `modes` on a no-click (vacuum) / click (one or more photons) pattern.

    Returns:
        (weight, residual): the unnormalized probability of the pattern and the
        unnormalized post-measurement mixture on the unmeasured modes. Components with
        different measured occupations become separate incoherent terms.
    """
    clicks = _parse_pattern(pattern, len(modes))
    register = state.register
    measured = [register.index(m) for m in modes]
    rest = [i for i in range(len(register)) if i not in measured]
    residual_register = ModeRegister(tuple(register.modes[i] for i in rest), register.cutoff)

    weight = 0.0
    residual_terms = []
    for term in state.terms:
        groups: Dict[Occupation, Dict[Occupation, complex]] = defaultdict(dict)
        for occupation, amplitude in term.ket.terms.items():
            seen = tuple(occupation[i] for i in measured)
            if all((n > 0) == c for n, c in zip(seen, clicks)):
                groups[seen][tuple(occupation[i] for i in rest)] = amplitude
                weight += term.weight * abs(amplitude) ** 2
        for seen in sorted(groups):
            residual_terms.append(WeightedTerm(term.weight, term.order, FockKet(residual_register, groups[seen])))
    return weight, StateMixture(residual_register, tuple(residual_terms))


def click_probabilities(state: StateMixture, modes: Sequence[Mode]) -> Dict[Tuple[int, ...], float]:
    """Unnormalized weight of every click pattern on `modes`, in one pass over the state."""
    measured = [state.register.index(m) for m in modes]
    weights: Dict[Tuple[int, ...], float] = {
        tuple((i >> (len(modes) - 1 - j)) & 1 for j in range(len(modes))): 0.0
        for i in range(2 ** len(modes))
    }
    for term in state.terms:
        for occupation, amplitude in term.ket.terms.items():
            pattern = tuple(int(occupation[i] > 0) for i in measured)
            weights[pattern] += term.weight * abs(amplitude) ** 2
    return weights


# --- Sources ---

def default_pair_modes() -> Tuple[Mode, Mode, Mode, Mode]:
    return polarization_pair('A') + polarization_pair('B')


def psi_n(n: int, register: ModeRegister = None) -> FockKet:
    """
    Normalized n-pair singlet-type state L_+^n |0> / (n! sqrt(n+1)) with
    L_+ = a_H b_V - a_V b_H. The register's first four modes are (a_H, a_V, b_H, b_V).
    """
    if isinstance(n, bool) or not isinstance(n, int) or n < 0:
        raise CheckError(f"n must be a non-negative integer, got {n!r}", 'n', n)
    if register is None:
        register = ModeRegister(default_pair_modes(), max(DEFAULT_CUTOFF, n))
    if len(register) < 4:
        raise CheckError("psi_n needs a register with at least four modes", 'register', register)
    pad = (0,) * (len(register) - 4)
    scale = 1.0 / (math.factorial(n) * math.sqrt(n + 1))
    terms = {}
    for k in range(n + 1):
        coefficient = math.comb(n, k) * (-1) ** k * math.factorial(n - k) * math.factorial(k)
        terms[(n - k, k, k, n - k) + pad] = coefficient * scale
    return FockKet(register, terms)


def spdc_state(pbar: float, n_max: int, modes: Sequence[Mode] = None, cutoff: int = None) -> StateMixture:
    """
    Two-mode squeezed polarization-entangled source truncated at `n_max` pairs:
    sum_n (n+1)/2^n pbar^n |Psi_n><Psi_n|, order tag (0, n).

    Raises:
        CheckError: If pbar is outside [0, 1/2).
    """
    pbar = validate_half_open('pbar', pbar, 0.5)
    if isinstance(n_max, bool) or not isinstance(n_max, int) or n_max < 0:
        raise CheckError(f"n_max must be a non-negative integer, got {n_max!r}", 'n_max', n_max)
    modes = tuple(modes) if modes is not None else default_pair_modes()
    register = ModeRegister(modes, cutoff if cutoff is not None else max(DEFAULT_CUTOFF, n_max))
    terms = tuple(
        WeightedTerm((n + 1) / 2 ** n * pbar ** n, (0, n), psi_n(n, register))
        for n in range(n_max + 1)
    )
    return StateMixture(register, terms)


def sp_state(p: float, n_max: int, mode: Mode = None, cutoff: int = None) -> StateMixture:
    """
    Heralded single-photon source with multiphoton noise: sum_{n>=1} p^(n-1) |n><n|,
    order tag (n-1, 0).

    Raises:
        CheckError: If p is outside [0, 1).
    """
    p = validate_half_open('p', p, 1.0)
    validate_positive_int('n_max', n_max)
    mode = mode if mode is not None else Mode('A')
    register = ModeRegister((mode,), cutoff if cutoff is not None else max(DEFAULT_CUTOFF, n_max))
    terms = tuple(WeightedTerm(p ** (n - 1), (n - 1, 0), fock_state(register, (n,)))
                  for n in range(1, n_max + 1))
    return StateMixture(register, terms)


def spdc_pair_distribution(pbar: float, n: int) -> float:
    """Normalized probability of n pairs; the untruncated weights sum to 1/(1 - pbar/2)^2."""
    x = pbar / 2.0
    return (n + 1) * x ** n * (1.0 - x) ** 2


def sp_photon_distribution(p: float, n: int) -> float:
    """Normalized probability of n >= 1 photons from a single-photon source."""
    return p ** (n - 1) * (1.0 - p) if n >= 1 else 0.0

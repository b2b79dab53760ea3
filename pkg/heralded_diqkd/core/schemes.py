# heralded_diqkd/core/schemes.py
"""
The two heralded entanglement schemes.

Single-photon heralding (SH): Alice owns an SPDC source and keeps one arm; Bob owns two
single-photon sources (H and V) and splits them on a highly transmitting beamsplitter.
Alice's travelling arm and Bob's reflected arm meet at a partial Bell-state measurement
in Bob's lab.

Central heralding (CH): each party owns two single-photon sources and sends a small
reflected fraction to a central station hosting the same partial Bell-state measurement.

Circuit conventions
-------------------
* Detector order at the measurement is (A'_H, A'_V, B'_H, B'_V); the heralding pattern
  0110 means A'_V and B'_H clicked.
* The measurement rotates both incoming arms by a half-wave plate at 22.5 degrees, mixes
  them per polarization on a beamsplitter of transmittance (1 - t)/2 and separates the
  polarizations. With Bob's travelling arm (SH) or both travelling arms (CH) first
  passing a half-wave plate at 0 degrees, the heralded state is psi^- + t phi^-.
* Registers use a cutoff equal to the largest photon number of the initial state, since
  the wave plates can gather every photon of a spatial mode into one polarization.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Tuple

import numpy as np

from heralded_diqkd.core import photonics
from heralded_diqkd.core.behavior import Behavior, Scenario, binary_entropy, chi
from heralded_diqkd.core.photonics import (
    DEFAULT_CUTOFF, Mode, ModeMap, PhotonicsError, StateMixture, polarization_pair,
)
from heralded_diqkd.utils.checks import (
    CheckError, validate_half_open, validate_unit_interval,
)

logger = logging.getLogger(__name__)

A_H, A_V = polarization_pair('A')
AP_H, AP_V = polarization_pair('A', "'")
B_H, B_V = polarization_pair('B')
BP_H, BP_V = polarization_pair('B', "'")

KEPT_MODES = (A_H, A_V, B_H, B_V)
HERALD_MODES = (AP_H, AP_V, BP_H, BP_V)
HERALD_PATTERN = '0110'
CIRCUIT_MODES = (A_H, A_V, AP_H, AP_V, B_H, B_V, BP_H, BP_V)

# Order tag carrying the leading heralded term of each scheme
LEADING_ORDER = {'SH': (0, 1), 'CH': (0, 0)}
MAX_TRUNCATION = 2

# Two-qubit basis of one photon per party: HH, HV, VH, VV
_QUBIT_BASIS = {(1, 0, 1, 0): 0, (1, 0, 0, 1): 1, (0, 1, 1, 0): 2, (0, 1, 0, 1): 3}


@dataclass(frozen=True)
class MeasurementSetting:
    """Quarter-wave plate angle phi followed by half-wave plate angle theta (radians, mod pi)."""
    phi: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'phi', float(self.phi) % math.pi)
        object.__setattr__(self, 'theta', float(self.theta) % math.pi)


def default_settings(n_b: int = 2) -> Tuple[Tuple[MeasurementSetting, ...], Tuple[MeasurementSetting, ...]]:
    """
    CHSH-optimal linear analyzers for psi^-; a third Bob setting, if requested, is
    aligned with Alice's setting 0 and serves as the key setting.
    """
    alice = (MeasurementSetting(0.0, 0.0), MeasurementSetting(0.0, math.pi / 8))
    bob = [MeasurementSetting(0.0, math.pi / 16), MeasurementSetting(0.0, -math.pi / 16)]
    if n_b >= 3:
        bob.append(MeasurementSetting(0.0, 0.0))
    return alice, tuple(bob)


def _coerce_settings(raw) -> Tuple[MeasurementSetting, ...]:
    settings = []
    for item in raw:
        if isinstance(item, MeasurementSetting):
            settings.append(item)
        elif isinstance(item, dict):
            settings.append(MeasurementSetting(item.get('phi', 0.0), item.get('theta', 0.0)))
        else:
            phi, theta = item
            settings.append(MeasurementSetting(phi, theta))
    if not settings:
        raise CheckError("At least one measurement setting per party is required", 'settings', raw)
    return tuple(settings)


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = 'SH'
    pbar: float = 1e-4
    p: float = 1e-4
    T: float = 0.99
    t: float = 0.0
    eta_d: float = 1.0
    eta_h: float = 1.0
    eta_t: float = 1.0
    settings_a: Tuple[MeasurementSetting, ...] = field(default_factory=lambda: default_settings()[0])
    settings_b: Tuple[MeasurementSetting, ...] = field(default_factory=lambda: default_settings()[1])
    key_pair: Tuple[int, int] = (0, 0)
    truncation: int = 2
    rescale_eta_t: bool = False

    def __post_init__(self):
        if self.scheme not in LEADING_ORDER:
            raise CheckError(f"Unknown scheme {self.scheme!r}; expected 'SH' or 'CH'", 'scheme', self.scheme)
        validate_half_open('pbar', self.pbar, 0.5)
        validate_half_open('p', self.p, 1.0)
        for name in ('T', 't', 'eta_d', 'eta_h', 'eta_t'):
            object.__setattr__(self, name, validate_unit_interval(name, getattr(self, name)))
        if isinstance(self.truncation, bool) or not isinstance(self.truncation, int) \
                or not 0 <= self.truncation <= MAX_TRUNCATION:
            raise CheckError(f"truncation must be an integer in [0, {MAX_TRUNCATION}]",
                             'truncation', self.truncation)
        object.__setattr__(self, 'settings_a', _coerce_settings(self.settings_a))
        object.__setattr__(self, 'settings_b', _coerce_settings(self.settings_b))
        key = tuple(int(k) for k in self.key_pair)
        if len(key) != 2 or not (0 <= key[0] < len(self.settings_a)) or not (0 <= key[1] < len(self.settings_b)):
            raise CheckError(f"key_pair {self.key_pair} does not index the settings", 'key_pair', self.key_pair)
        object.__setattr__(self, 'key_pair', key)

    def replace(self, **changes) -> 'SchemeConfig':
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return type(self)(**values)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['settings_a'] = [[s.phi, s.theta] for s in self.settings_a]
        data['settings_b'] = [[s.phi, s.theta] for s in self.settings_b]
        data['key_pair'] = list(self.key_pair)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'SchemeConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise CheckError(f"Unknown scheme fields: {', '.join(unknown)}", 'scheme', unknown)
        target = {'SH': ShConfig, 'CH': ChConfig}.get(data.get('scheme', 'SH'))
        if target is None:
            raise CheckError(f"Unknown scheme {data.get('scheme')!r}", 'scheme', data.get('scheme'))
        return target(**data)

    @classmethod
    def from_json(cls, text: str) -> 'SchemeConfig':
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class ShConfig(SchemeConfig):
    scheme: str = 'SH'
    T: float = 0.99
    truncation: int = 2


@dataclass(frozen=True)
class ChConfig(SchemeConfig):
    scheme: str = 'CH'
    pbar: float = 0.0
    T: float = 0.01
    truncation: int = 1


@dataclass(frozen=True, eq=False)
class HeraldedResult:
    p_herald: float
    behavior: Behavior
    leading_coeff: float
    leading_state: np.ndarray
    fidelity: float
    conditional: StateMixture = field(repr=False)


# --- Targets ---

def target_ket(t: float) -> np.ndarray:
    """psi^- + t phi^- with normalized Bell states, basis (HH, HV, VH, VV)."""
    return np.array([t, 1.0, -1.0, -t]) / math.sqrt(2.0)


def creation_target(t: float) -> np.ndarray:
    """(a_H b_V - a_V b_H + t (a_H b_H - a_V b_V)) |0>, squared norm 2 (1 + t^2)."""
    return np.array([t, 1.0, -1.0, -t], dtype=float)


def fidelity_to_target(rho: np.ndarray, t: float) -> float:
    psi = target_ket(t)
    psi = psi / np.linalg.norm(psi)
    trace = float(np.real(np.trace(rho)))
    return float(np.real(psi.conj() @ rho @ psi)) / trace if trace > 0 else 0.0


def two_qubit_block(state: StateMixture, order=None) -> np.ndarray:
    """
    Unnormalized density matrix of the one-photon-per-party subspace of (A, B),
    optionally restricted to one order tag.
    """
    register = state.register
    positions = [register.index(m) for m in KEPT_MODES]
    others = [i for i in range(len(register)) if i not in positions]
    rho = np.zeros((4, 4), dtype=complex)
    for term in state.terms:
        if order is not None and term.order != tuple(order):
            continue
        vector = np.zeros(4, dtype=complex)
        for occupation, amplitude in term.ket.terms.items():
            if any(occupation[i] for i in others):
                continue
            index = _QUBIT_BASIS.get(tuple(occupation[i] for i in positions))
            if index is not None:
                vector[index] = amplitude
        rho += term.weight * np.outer(vector, vector.conj())
    return rho


def effective_eta_t(config: SchemeConfig) -> float:
    """Loss seen by the CH station arms: eta_h (or eta_d when rescaled) times eta_t."""
    return (config.eta_d if config.rescale_eta_t else config.eta_h) * config.eta_t


def leading_order_state(config: SchemeConfig) -> Tuple[float, np.ndarray]:
    """
    Leading heralded term c |psi_t><psi_t| with psi_t = creation_target(t), whose
    squared norm is 2 (1 + t^2): SH c = eta_h^2 eta_t T (1-T) / 8 per unit pbar, CH
    c = eta~_t T^2 (1-T)^2 / 4. The trace c 2 (1 + t^2) is the heralding weight of
    the leading order; against the normalized target_ket the coefficient doubles.
    """
    T = config.T
    if config.scheme == 'SH':
        coeff = config.eta_h ** 2 * config.eta_t * T * (1.0 - T) / 8.0
    else:
        coeff = effective_eta_t(config) * T ** 2 * (1.0 - T) ** 2 / 4.0
    psi = creation_target(config.t)
    return coeff, np.outer(psi, psi)


# --- Initial states ---

def build_sh_initial(config: SchemeConfig) -> StateMixture:
    """SPDC on (A, A') times two single-photon sources on B_H, B_V, truncated in total order."""
    n = config.truncation
    spdc = photonics.spdc_state(config.pbar, n, modes=(A_H, A_V, AP_H, AP_V))
    source_h = photonics.sp_state(config.p, n + 1, mode=B_H)
    source_v = photonics.sp_state(config.p, n + 1, mode=B_V)
    state = photonics.tensor(photonics.tensor(spdc, source_h), source_v).truncated(n)
    return state.with_cutoff(max(DEFAULT_CUTOFF, state.max_photons()))


def build_ch_initial(config: SchemeConfig) -> StateMixture:
    """Four single-photon sources on A_H, A_V, B_H, B_V, truncated in total order."""
    n = config.truncation
    state = None
    for mode in KEPT_MODES:
        source = photonics.sp_state(config.p, n + 1, mode=mode)
        state = source if state is None else photonics.tensor(state, source)
    state = state.truncated(n)
    return state.with_cutoff(max(DEFAULT_CUTOFF, state.max_photons()))


# --- Circuits ---

def _partial_bsm(t: float) -> Tuple[ModeMap, ...]:
    transmittance = (1.0 - t) / 2.0
    return (
        photonics.half_wave_plate(AP_H, AP_V, math.pi / 8),
        photonics.half_wave_plate(BP_H, BP_V, math.pi / 8),
        photonics.beamsplitter(AP_H, BP_H, transmittance),
        photonics.beamsplitter(AP_V, BP_V, transmittance),
    )


def _to_circuit_register(initial: StateMixture) -> StateMixture:
    missing = [m for m in CIRCUIT_MODES if m not in initial.register.modes]
    state = initial.extended(missing)
    return state.with_cutoff(max(DEFAULT_CUTOFF, state.max_photons()))


def _run_sh(config: SchemeConfig, initial: StateMixture) -> Tuple[float, StateMixture]:
    state = _to_circuit_register(initial)
    state = photonics.apply_losses(state, {AP_H: config.eta_t, AP_V: config.eta_t})
    circuit = photonics.compose(
        photonics.beamsplitter(B_H, BP_H, config.T),
        photonics.beamsplitter(B_V, BP_V, config.T),
        photonics.half_wave_plate(BP_H, BP_V, 0.0),
        *_partial_bsm(config.t),
    )
    state = photonics.apply_mode_map(state, circuit)
    state = photonics.apply_losses(state, {m: config.eta_h for m in HERALD_MODES})
    return photonics.threshold_detect(state, HERALD_MODES, HERALD_PATTERN)


def _run_ch(config: SchemeConfig, initial: StateMixture) -> Tuple[float, StateMixture]:
    state = _to_circuit_register(initial)
    kept_fraction = 1.0 - config.T
    split = photonics.compose(
        photonics.beamsplitter(A_H, AP_H, kept_fraction),
        photonics.beamsplitter(A_V, AP_V, kept_fraction),
        photonics.beamsplitter(B_H, BP_H, kept_fraction),
        photonics.beamsplitter(B_V, BP_V, kept_fraction),
    )
    state = photonics.apply_mode_map(state, split)
    arm = math.sqrt(effective_eta_t(config))
    state = photonics.apply_losses(state, {m: arm for m in HERALD_MODES})
    station = photonics.compose(
        photonics.half_wave_plate(AP_H, AP_V, 0.0),
        photonics.half_wave_plate(BP_H, BP_V, 0.0),
        *_partial_bsm(config.t),
    )
    state = photonics.apply_mode_map(state, station)
    return photonics.threshold_detect(state, HERALD_MODES, HERALD_PATTERN)


def herald_probability(config: SchemeConfig, initial: StateMixture) -> float:
    """Unnormalized heralding weight of an arbitrary source state sent through the scheme."""
    runner = _run_sh if config.scheme == 'SH' else _run_ch
    weight, _ = runner(config, initial)
    return weight


def herald_sh(config: SchemeConfig) -> Tuple[float, StateMixture]:
    """
    Returns:
        (p_herald, conditional): the heralding probability per round of the truncated
        source mixture and the unnormalized heralded state on (A, B).
    """
    initial = build_sh_initial(config)
    weight, conditional = _run_sh(config, initial)
    logger.debug("SH herald weight %.6e over %d terms", weight, len(conditional.terms))
    return weight / initial.trace(), conditional


def herald_ch(config: SchemeConfig) -> Tuple[float, StateMixture]:
    initial = build_ch_initial(config)
    weight, conditional = _run_ch(config, initial)
    logger.debug("CH herald weight %.6e over %d terms", weight, len(conditional.terms))
    return weight / initial.trace(), conditional


# --- Measurement ---

def measure_behavior(conditional: StateMixture, config: SchemeConfig) -> Behavior:
    """
    Detector loss eta_d on the kept modes, then each party's analyzer and two
    threshold detectors. Outcomes 00, 01, 10, 11 are indexed 2*click_H + click_V.

    Raises:
        PhotonicsError: If the heralded state has zero weight.
    """
    state = photonics.apply_losses(conditional, {m: config.eta_d for m in KEPT_MODES})
    norm = state.trace()
    if norm <= 0.0:
        raise PhotonicsError("The heralding pattern never occurs for these parameters")
    ma, mb = len(config.settings_a), len(config.settings_b)
    probs = np.zeros((ma, mb, 4, 4))
    for x, setting_a in enumerate(config.settings_a):
        rotated_a = photonics.apply_mode_map(
            state, photonics.analyzer(A_H, A_V, setting_a.phi, setting_a.theta))
        for y, setting_b in enumerate(config.settings_b):
            rotated = photonics.apply_mode_map(
                rotated_a, photonics.analyzer(B_H, B_V, setting_b.phi, setting_b.theta))
            for pattern, weight in photonics.click_probabilities(rotated, KEPT_MODES).items():
                a = 2 * pattern[0] + pattern[1]
                b = 2 * pattern[2] + pattern[3]
                probs[x, y, a, b] = weight / norm
    return Behavior(Scenario(ma, mb, 4, 4), probs)


def _heralded_result(config: SchemeConfig, p_herald: float, conditional: StateMixture) -> HeraldedResult:
    block = two_qubit_block(conditional, LEADING_ORDER[config.scheme])
    if config.scheme == 'SH':
        block = block / config.pbar if config.pbar > 0 else np.zeros_like(block)
    psi = creation_target(config.t)
    overlap = float(np.real(psi @ block @ psi))
    coeff = overlap / float(psi @ psi) ** 2
    trace = float(np.real(np.trace(block)))
    leading_state = block / trace if trace > 0 else block
    return HeraldedResult(
        p_herald=p_herald,
        behavior=measure_behavior(conditional, config),
        leading_coeff=coeff,
        leading_state=leading_state,
        fidelity=fidelity_to_target(block, config.t),
        conditional=conditional,
    )


def behavior_sh(config: SchemeConfig) -> HeraldedResult:
    if config.scheme != 'SH':
        raise CheckError("behavior_sh needs an SH configuration", 'scheme', config.scheme)
    if config.T >= 1.0 - 1e-12:
        logger.warning("SH with T = 1 sends nothing to the measurement; no heralds expected")
    p_herald, conditional = herald_sh(config)
    return _heralded_result(config, p_herald, conditional)


def behavior_ch(config: SchemeConfig) -> HeraldedResult:
    if config.scheme != 'CH':
        raise CheckError("behavior_ch needs a CH configuration", 'scheme', config.scheme)
    if config.T <= 1e-12:
        logger.warning("CH with T = 0 sends nothing to the station; no heralds expected")
    p_herald, conditional = herald_ch(config)
    return _heralded_result(config, p_herald, conditional)


def simulate(config: SchemeConfig) -> HeraldedResult:
    return behavior_sh(config) if config.scheme == 'SH' else behavior_ch(config)


# --- Amplifier reference ---

@dataclass(frozen=True)
class AmplifierReference:
    lam: float
    chsh_upper: float
    r_estimate: float


def amplifier_reference(pbar: float, T: float, eta_t: float) -> AmplifierReference:
    """
    Closed-form reference for an SPDC source followed by a qubit amplifier: the CHSH
    bound limited by the vacuum admixture and the resulting key-rate estimate.
    """
    pbar = validate_half_open('pbar', pbar, 0.5)
    eta_t = validate_unit_interval('eta_t', eta_t)
    T = validate_unit_interval('T', T)
    if T >= 1.0:
        raise CheckError("The amplifier reference needs T < 1", 'T', T)
    lam = T / (1.0 - T)
    x = lam * eta_t * pbar
    chsh_upper = (2.0 + x * 2.0 * math.sqrt(2.0)) / (1.0 + x)
    lam_bar = x / (1.0 + x)
    r_estimate = (1.0 - chi(chsh_upper)) - (1.0 - binary_entropy(lam_bar))
    return AmplifierReference(lam, chsh_upper, r_estimate)

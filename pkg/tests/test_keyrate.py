# tests/test_keyrate.py
import logging
import math

import numpy as np
import pytest

from heralded_diqkd.core import behavior as bh
from heralded_diqkd.core import keyrate
from heralded_diqkd.core.behavior import Behavior, Scenario
from heralded_diqkd.core.conic import SolverError
from heralded_diqkd.core.keyrate import BracketError, KeyRateReport, ParameterSpace
from heralded_diqkd.core.reproduce import TABLE1_EXPECTED
from heralded_diqkd.core.schemes import ChConfig, ShConfig
from heralded_diqkd.utils.checks import CheckError

# Bloch-plane analyzer angles: Alice 0, pi/2; Bob pi/4, -pi/4 and 0 (key setting)
ALICE_ANGLES = (0.0, math.pi / 2)
BOB_ANGLES = (math.pi / 4, -math.pi / 4, 0.0)


def correlated_singlet_behavior(visibility: float = 1.0) -> Behavior:
    """p(a, b | x, y) = (1 + (-1)^(a+b) V cos(alpha_x - beta_y)) / 4."""
    probs = np.zeros((2, 3, 2, 2))
    for x, alpha in enumerate(ALICE_ANGLES):
        for y, beta in enumerate(BOB_ANGLES):
            correlation = visibility * math.cos(alpha - beta)
            for a in range(2):
                for b in range(2):
                    probs[x, y, a, b] = (1.0 + (-1) ** (a + b) * correlation) / 4.0
    return Behavior(Scenario(2, 3, 2, 2), probs)


def fake_report(config, r=0.5, key_rate=1.0, p_herald=1e-3) -> KeyRateReport:
    return KeyRateReport(config=config, p_herald=p_herald, g=0.5, h=0.0, r_down=r, nu_rep=keyrate.DEFAULT_NU_REP,
                         key_rate=key_rate, epsilon=0.0, level='1+AB')


# --- Tests for closed forms ---
def test_transmission():
    assert keyrate.transmission(0.0) == 1.0
    assert keyrate.transmission(22.0, 22.0) == pytest.approx(math.exp(-1.0))
    with pytest.raises(CheckError):
        keyrate.transmission(-1.0)
    with pytest.raises(CheckError):
        keyrate.transmission(1.0, 0.0)


@pytest.mark.parametrize('s, expected', [
    (2.0, 0.0),
    (bh.TSIRELSON, 1.0),
    (2.5, 1.0 - bh.binary_entropy(0.875)),
])
def test_chsh_rate_chain(s, expected):
    assert keyrate.chsh_rate_chain(s) == pytest.approx(expected, abs=1e-12)


def test_key_per_second():
    assert keyrate.key_per_second(100e6, 1e-3, 0.5) == pytest.approx(5e4)
    assert keyrate.key_per_second(100e6, 1e-3, -0.2) == 0.0
    with pytest.raises(CheckError):
        keyrate.key_per_second(100e6, 1.5, 0.5)


# --- Tests for the min-entropy bound ---
def test_r_down_is_one_bit_for_ideal_correlations():
    r, g, h = keyrate.r_down(correlated_singlet_behavior(), 0, 2)
    assert g == pytest.approx(0.5, abs=1e-5)
    assert h == pytest.approx(0.0, abs=1e-12)
    assert r == pytest.approx(1.0, abs=1e-4)


def test_r_down_drops_with_noise():
    clean, _, _ = keyrate.r_down(correlated_singlet_behavior(1.0), 0, 2)
    noisy, _, _ = keyrate.r_down(correlated_singlet_behavior(0.9), 0, 2)
    assert noisy < clean


@pytest.mark.parametrize('kwargs', [{'y_star': 3}, {'level': '4'}])
def test_r_down_checks_arguments(kwargs):
    arguments = {'x_star': 0, 'y_star': 2, **kwargs}
    with pytest.raises(CheckError):
        keyrate.r_down(correlated_singlet_behavior(), **arguments)


def test_report_json_keys():
    report = fake_report(ShConfig(), r=0.25)
    data = report.to_dict()
    assert {'G', 'H', 'r_down', 'p_herald', 'nu_rep', 'K', 'epsilon', 'level', 'config'} <= set(data)
    assert 'w_star' not in data
    assert '"r_down": 0.25' in report.to_json()


# --- Tests for search configurations ---
def test_config_at_efficiency_uses_one_local_efficiency():
    config = keyrate.config_at_efficiency('CH', 0.9, eta_t=0.5)
    assert isinstance(config, ChConfig)
    assert config.eta_d == config.eta_h == 0.9
    assert config.rescale_eta_t
    assert config.key_pair == (0, 2)
    assert keyrate.config_at_efficiency('SH', 0.9, n_b=2).key_pair == (0, 0)
    with pytest.raises(CheckError):
        keyrate.config_at_efficiency('XY', 0.9)


@pytest.mark.parametrize('free_phi', [False, True])
def test_parameter_space_encode_decode(free_phi):
    config = keyrate.config_at_efficiency('SH', 0.95, pbar=2e-4).replace(T=0.97, t=0.25)
    space = ParameterSpace(config, free_phi)
    z = space.encode(config)
    assert len(z) == len(space.names) == 3 + 5 * (2 if free_phi else 1)
    decoded = space.decode(z)
    assert decoded.T == pytest.approx(0.97)
    assert decoded.t == pytest.approx(0.25)
    assert decoded.pbar == pytest.approx(2e-4)
    assert [s.theta for s in decoded.settings_b] == pytest.approx([s.theta for s in config.settings_b])


def test_parameter_space_keeps_bounds():
    space = ParameterSpace(ChConfig())
    config = space.decode(np.array([50.0, -50.0, 0.1, 0.2, 0.3, 0.4]))
    assert 1e-6 <= config.T <= 0.5
    assert 0.0 <= config.t <= 1.0


def test_random_starts_are_reproducible():
    space = ParameterSpace(keyrate.config_at_efficiency('CH', 0.9))
    first = space.random_start(np.random.default_rng(7))
    second = space.random_start(np.random.default_rng(7))
    assert np.array_equal(first, second)
    assert len(first) == len(space.names)


# --- Tests for the optimizer ---
def _quadratic(config, *args, **kwargs):
    return fake_report(config, r=-(config.T - 0.2) ** 2 - (config.t - 0.3) ** 2)


def test_maximize_key_finds_the_optimum(mocker):
    mocker.patch.object(keyrate, 'evaluate_key_rate', side_effect=_quadratic)
    base = keyrate.config_at_efficiency('CH', 0.9, n_b=2)
    report = keyrate.maximize_key(base, 'r_down', starts=3, max_evals=2000, seed=1)
    assert report.config.T == pytest.approx(0.2, abs=1e-2)
    assert report.config.t == pytest.approx(0.3, abs=1e-2)
    assert report.trace.starts == 3
    assert report.trace.best_value == pytest.approx(0.0, abs=1e-4)
    assert report.trace.to_dict()['evaluation_count'] == len(report.trace.evaluations)


def test_maximize_key_flags_exhausted_budget(mocker, caplog):
    mocker.patch.object(keyrate, 'evaluate_key_rate', side_effect=_quadratic)
    with caplog.at_level(logging.WARNING, logger='heralded_diqkd.core.keyrate'):
        report = keyrate.maximize_key(keyrate.config_at_efficiency('CH', 0.9, n_b=2), 'r_down',
                                      starts=1, max_evals=5)
    assert report.trace.budget_exhausted
    assert 'exhausted' in caplog.text


def test_maximize_key_rejects_unknown_objective():
    with pytest.raises(CheckError):
        keyrate.maximize_key(ChConfig(), 'fidelity')


def test_failed_points_get_a_floor_value():
    space = ParameterSpace(ChConfig())

    def failing(config):
        raise SolverError('no convergence', 'NumericalFailure')

    outcome = keyrate._run_start(space, failing, 0, space.encode(ChConfig()), 20, 1e-6)
    assert outcome.value == keyrate.FAILED_POINT
    assert all(value == keyrate.FAILED_POINT for _, _, value in outcome.evaluations)


@pytest.mark.parametrize('r, key_rate, expected', [(0.2, 40.0, 40.0), (-0.1, 0.0, -0.1)])
def test_key_objective_is_ordered_across_zero(mocker, r, key_rate, expected):
    mocker.patch.object(keyrate, 'evaluate_key_rate', return_value=fake_report(ChConfig(), r, key_rate))
    value = keyrate._objective_value(ChConfig(), 'key_rate', '1+AB', 1e8, 'per_source', True, None)
    assert value == expected


# --- Tests for the searches ---
def _threshold_at(eta_c):
    def fake_maximize(base, objective, *args, **kwargs):
        return fake_report(base, r=base.eta_d - eta_c)
    return fake_maximize


def test_critical_efficiency_bisection(mocker):
    mocker.patch.object(keyrate, 'maximize_key', side_effect=_threshold_at(0.93))
    value = keyrate.critical_local_efficiency('CH', xtol=1e-4)
    assert value == pytest.approx(0.93, abs=1e-4)


def test_critical_efficiency_warm_starts_from_previous_optimum(mocker):
    mocked = mocker.patch.object(keyrate, 'maximize_key', side_effect=_threshold_at(0.93))
    keyrate.critical_local_efficiency('SH', xtol=0.05)
    assert mocked.call_args_list[0].kwargs['initial_points'] == []
    assert len(mocked.call_args_list[1].kwargs['initial_points']) == 1


def test_critical_efficiency_without_crossing_raises(mocker):
    mocker.patch.object(keyrate, 'maximize_key', side_effect=_threshold_at(0.5))
    with pytest.raises(BracketError) as excinfo:
        keyrate.critical_local_efficiency('CH')
    assert excinfo.value.lower == 0.8
    assert excinfo.value.values[0] > 0


def test_distance_sweep_repairs_non_monotone_rates(mocker):
    # the optimizer misses the optimum at 10 km; the 20 km optimum moved back does better
    rates = {0.0: 100.0, 10.0: 10.0, 20.0: 50.0}

    def fake_maximize(base, *args, **kwargs):
        distance = -22.0 * math.log(base.eta_t)
        return fake_report(base, key_rate=rates[round(distance)])

    mocker.patch.object(keyrate, 'maximize_key', side_effect=fake_maximize)
    mocker.patch.object(keyrate, 'evaluate_key_rate', side_effect=lambda config, *a: fake_report(config, key_rate=60.0))
    rows = keyrate.distance_sweep('CH', 0.95, [20.0, 0.0, 10.0])
    assert [row.L_km for row in rows] == [0.0, 10.0, 20.0]
    assert [row.K_bits_per_s for row in rows] == [100.0, 60.0, 50.0]
    assert rows[1].eta_t == pytest.approx(math.exp(-10.0 / 22.0))


# --- Long reproduction suites ---
@pytest.mark.slow
@pytest.mark.parametrize('kind', ['CH', 'SH'])
def test_noise_robustness_matches_table(kind):
    expected, tolerance = TABLE1_EXPECTED[(kind, 'noise_robustness')]
    report = keyrate.max_noise_robustness(kind)
    assert report.w_star == pytest.approx(expected, abs=tolerance)


@pytest.mark.slow
def test_ch_sweep_is_positive_at_short_distance():
    rows = keyrate.distance_sweep('CH', 0.99, [0.0, 20.0])
    assert rows[0].K_bits_per_s > 0.0
    assert rows[0].K_bits_per_s >= rows[1].K_bits_per_s

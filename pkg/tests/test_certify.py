# tests/test_certify.py
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heralded_diqkd.core import behavior as bh
from heralded_diqkd.core import certify, schemes
from heralded_diqkd.core.behavior import Behavior, Scenario
from heralded_diqkd.core.schemes import ChConfig, ShConfig
from heralded_diqkd.utils.checks import CheckError

BINARY = Scenario(2, 2, 2, 2)


def pr_box() -> Behavior:
    probs = np.zeros((2, 2, 2, 2))
    for x in range(2):
        for y in range(2):
            for a in range(2):
                probs[x, y, a, a ^ (x & y)] = 0.5
    return Behavior(BINARY, probs)


# --- Tests for the local polytope ---
def test_strategy_count_and_columns():
    strategies = certify.deterministic_strategies(BINARY)
    matrix = certify.strategy_matrix(BINARY)
    assert len(strategies) == 16
    assert matrix.shape == (16, 16)
    for k, strategy in enumerate(strategies):
        assert np.allclose(matrix[:, k], strategy.behavior(BINARY).probs.ravel())


def test_too_many_strategies_raise(mocker):
    mocker.patch.object(certify, 'MAX_STRATEGIES', 10)
    with pytest.raises(CheckError):
        certify.deterministic_strategies(BINARY)


def test_tsirelson_noise_robustness():
    result = certify.noise_robustness(bh.tsirelson_behavior())
    assert result.w_star == pytest.approx(1.0 - 1.0 / math.sqrt(2.0), abs=1e-6)


def test_pr_box_noise_robustness():
    assert certify.noise_robustness(pr_box()).w_star == pytest.approx(0.5, abs=1e-6)


def test_deterministic_point_is_local_with_one_strategy():
    b = bh.deterministic_behavior(BINARY, (0, 1), (1, 0))
    membership = certify.local_membership(b)
    assert membership.is_local
    assert membership.distance == 0.0
    decomposition = certify.local_decomposition(b)
    assert len(decomposition) == 1
    weight, strategy = decomposition[0]
    assert weight == pytest.approx(1.0)
    assert strategy == certify.DeterministicStrategy((0, 1), (1, 0))


def test_tsirelson_is_not_local():
    membership = certify.local_membership(bh.tsirelson_behavior())
    assert not membership.is_local
    assert membership.weights is None
    assert membership.distance == pytest.approx(1.0 - 1.0 / math.sqrt(2.0), abs=1e-6)
    with pytest.raises(CheckError):
        certify.local_decomposition(bh.tsirelson_behavior())


@pytest.mark.parametrize('offset, local', [(-1e-3, True), (1e-3, False)])
def test_one_sided_lossy_tsirelson_boundary(offset, local):
    b = bh.lossy_tsirelson_one_sided(1.0 / math.sqrt(2.0) + offset)
    assert certify.local_membership(b).is_local is local


def test_white_noise_beyond_threshold_is_local():
    assert certify.local_membership(bh.white_noise_mix(bh.tsirelson_behavior(), 0.3)).is_local


# --- Tests for the moment structure ---
@pytest.mark.parametrize('level, size', [('1', 5), ('1+AB', 9), ('2', 13)])
def test_moment_matrix_sizes(level, size):
    assert certify.moment_structure(BINARY, level).size == size


def test_unknown_level_raises():
    with pytest.raises(CheckError):
        certify.moment_structure(BINARY, '3')


def test_cg_vector_of_tsirelson():
    values = certify.cg_vector(bh.tsirelson_behavior())
    assert values['norm'] == 1.0
    assert values['A[0|0]'] == pytest.approx(0.5)
    assert values['AB[0,0|0,0]'] == pytest.approx((1 + math.cos(math.pi / 4)) / 4)


def test_npa_feasibility_separates_quantum_from_pr_box():
    assert certify.npa_feasible(bh.tsirelson_behavior())
    assert not certify.npa_feasible(pr_box())


# --- Tests for the guessing probability ---
def test_tsirelson_guessing_probability_is_one_half():
    certificate = certify.guessing_probability(bh.tsirelson_behavior(), 0)
    assert certificate.value == pytest.approx(0.5, abs=1e-5)
    assert certificate.dual_bound >= certificate.value - 1e-6


def test_deterministic_point_is_fully_guessable():
    b = bh.deterministic_behavior(BINARY, (0, 0), (0, 0))
    assert certify.guessing_probability(b, 0).value == pytest.approx(1.0, abs=1e-6)


def test_dual_functional_reproduces_the_bound():
    b = bh.white_noise_mix(bh.tsirelson_behavior(), 0.1)
    certificate = certify.guessing_probability(b, 0)
    assert certificate.bell_functional.evaluate(b) == pytest.approx(certificate.dual_bound, abs=1e-6)


def test_guessing_probability_grows_with_epsilon():
    b = bh.white_noise_mix(bh.tsirelson_behavior(), 0.05)
    values = [certify.guessing_probability_robust(b, 0, eps).value for eps in (0.0, 0.01, 0.05)]
    assert values[0] <= values[1] + 1e-6
    assert values[1] <= values[2] + 1e-6


def test_higher_level_is_not_looser():
    b = bh.white_noise_mix(bh.tsirelson_behavior(), 0.1)
    level_one = certify.guessing_probability(b, 0, level='1').value
    level_ab = certify.guessing_probability(b, 0, level='1+AB').value
    assert level_ab <= level_one + 1e-6


@pytest.mark.parametrize('kwargs', [{'x_star': 2}, {'x_star': 0, 'epsilon': 1.5}])
def test_guessing_probability_checks_arguments(kwargs):
    with pytest.raises(CheckError):
        certify.guessing_probability_robust(bh.tsirelson_behavior(), kwargs['x_star'], kwargs.get('epsilon', 0.0))


# --- Tests for the truncation bound ---
@pytest.mark.parametrize('config', [ShConfig(pbar=1e-3, p=1e-3), ChConfig(p=1e-3, T=0.05)])
def test_epsilon_upper_is_a_probability(config):
    epsilon = certify.epsilon_upper(config)
    assert 0.0 <= epsilon <= 1.0


@settings(max_examples=10)
@given(scheme=st.sampled_from(['SH', 'CH']), order=st.integers(0, 1),
       p=st.floats(1e-4, 0.05), pbar=st.floats(1e-4, 0.05))
def test_epsilon_upper_bounds_heralds_beyond_the_truncation(scheme, order, p, pbar):
    if scheme == 'SH':
        config = ShConfig(pbar=pbar, p=p, T=0.95, truncation=2)
        initial = schemes.build_sh_initial(config)
    else:
        config = ChConfig(p=p, T=0.1, truncation=2)
        initial = schemes.build_ch_initial(config)
    # unnormalized herald weights share the source normalization
    full = schemes.herald_probability(config, initial)
    kept = schemes.herald_probability(config, initial.truncated(order))
    dropped = (full - kept) / full
    assert dropped > 0.0
    assert certify.epsilon_upper(config, order=order) >= dropped - 1e-12


def test_epsilon_upper_rejects_unknown_box():
    with pytest.raises(CheckError):
        certify.epsilon_upper(ShConfig(), box='sphere')


def test_conditional_herald_probability_ignores_settings():
    config = ChConfig(T=0.05)
    first = certify.conditional_herald_probability(config, (1, 1, 1, 1))
    second = certify.conditional_herald_probability(config.replace(p=0.01, key_pair=(1, 1)), (1, 1, 1, 1))
    assert first == second
    assert 0.0 < first <= 1.0

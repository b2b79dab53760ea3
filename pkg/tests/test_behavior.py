# tests/test_behavior.py
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from heralded_diqkd.core import behavior as bh
from heralded_diqkd.core.behavior import Behavior, RangeClampWarning, Scenario
from heralded_diqkd.utils.checks import CheckError


@st.composite
def product_behaviors(draw, ma=2, mb=2, oa=2, ob=2):
    """Random no-signaling behaviors: mixtures of product distributions."""
    weights = draw(st.lists(st.floats(0.05, 1.0), min_size=1, max_size=3))
    probs = np.zeros((ma, mb, oa, ob))
    for w in weights:
        alice = np.array([[draw(st.floats(0.01, 1.0)) for _ in range(oa)] for _ in range(ma)])
        bob = np.array([[draw(st.floats(0.01, 1.0)) for _ in range(ob)] for _ in range(mb)])
        alice /= alice.sum(axis=1, keepdims=True)
        bob /= bob.sum(axis=1, keepdims=True)
        probs += w * np.einsum('xa,yb->xyab', alice, bob)
    probs /= sum(weights)
    return Behavior(Scenario(ma, mb, oa, ob), probs)


# --- Tests for the data model ---
def test_behavior_rejects_unnormalized():
    with pytest.raises(CheckError):
        Behavior(Scenario(1, 1, 2, 2), np.full((1, 1, 2, 2), 0.3))


def test_behavior_rejects_negative_entry():
    probs = np.array([[[[0.6, -0.1], [0.3, 0.2]]]])
    with pytest.raises(CheckError):
        Behavior(Scenario(1, 1, 2, 2), probs)


def test_behavior_rejects_wrong_shape():
    with pytest.raises(CheckError):
        Behavior(Scenario(2, 2, 2, 2), np.full((1, 1, 2, 2), 0.25))


def test_behavior_is_read_only():
    b = bh.tsirelson_behavior()
    with pytest.raises(ValueError):
        b.probs[0, 0, 0, 0] = 1.0


def test_behavior_json_keeps_scenario():
    b = bh.lossy_tsirelson_one_sided(0.9)
    restored = Behavior.from_json(b.to_json())
    assert restored.scenario == b.scenario
    assert np.allclose(restored.probs, b.probs)


def test_behavior_csv_has_one_row_per_entry():
    b = bh.tsirelson_behavior()
    lines = b.to_csv().strip().split('\n')
    assert lines[0] == 'x,y,a,b,p'
    assert len(lines) == 1 + 16


def test_scenario_rejects_bad_phi_index():
    with pytest.raises(CheckError):
        Scenario(2, 2, 2, 2, phi_a=2)


@given(product_behaviors())
def test_product_mixtures_are_no_signaling(b):
    assert b.no_signaling_violation() < 1e-9
    assert np.allclose(b.probs.sum(axis=(2, 3)), 1.0)


# --- Tests for local loss ---
def test_apply_local_loss_one_sided_matches_lossy_tsirelson():
    lossy = bh.apply_local_loss(bh.tsirelson_behavior(), 0.8, 1.0)
    reference = bh.lossy_tsirelson_one_sided(0.8)
    # apply_local_loss also adds a never-used phi outcome for Bob
    assert np.allclose(lossy.probs[:, :, :, :2], reference.probs)
    assert np.allclose(lossy.probs[:, :, :, 2], 0.0)


def test_apply_local_loss_zero_efficiency_is_all_phi():
    lossy = bh.apply_local_loss(bh.tsirelson_behavior(), 0.0, 0.0)
    assert np.allclose(lossy.probs[:, :, 2, 2], 1.0)
    assert lossy.scenario.phi_a == 2 and lossy.scenario.phi_b == 2


@given(product_behaviors(), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_apply_local_loss_keeps_invariants(b, eta_a, eta_b):
    lossy = bh.apply_local_loss(b, eta_a, eta_b)
    assert np.allclose(lossy.probs.sum(axis=(2, 3)), 1.0, atol=1e-9)
    assert lossy.no_signaling_violation() < 1e-9


def test_apply_local_loss_rejects_bad_eta():
    with pytest.raises(CheckError):
        bh.apply_local_loss(bh.tsirelson_behavior(), 1.5, 1.0)


@pytest.mark.parametrize('lossy', [
    bh.lossy_tsirelson_one_sided(0.9),
    bh.apply_local_loss(bh.tsirelson_behavior(), 0.9, 0.9),
])
def test_apply_local_loss_rejects_existing_no_click_outcome(lossy):
    with pytest.raises(CheckError) as excinfo:
        bh.apply_local_loss(lossy, 0.9, 0.9)
    assert excinfo.value.name == 'scenario'


# --- Tests for entropies ---
def test_conditional_entropy_perfect_correlation():
    assert bh.conditional_entropy(bh.correlated_bit_behavior(1.0), 0, 0) == pytest.approx(0.0, abs=1e-12)


def test_conditional_entropy_uniform_is_one_bit():
    assert bh.conditional_entropy(bh.uniform_behavior(Scenario(1, 1, 2, 2)), 0, 0) == pytest.approx(1.0)


@pytest.mark.parametrize('eta', [0.3, 0.7, 0.9])
def test_conditional_entropy_lossy_correlated_bit_closed_form(eta):
    expected = bh.binary_entropy(eta) + eta * (1.0 - eta)
    assert bh.conditional_entropy(bh.correlated_bit_behavior(eta), 0, 0) == pytest.approx(expected)


@given(product_behaviors(oa=3, ob=2), st.permutations([0, 1]))
def test_conditional_entropy_invariant_under_bob_relabeling(b, perm):
    relabeled = bh.relabel_b(b, perm)
    assert bh.conditional_entropy(relabeled, 1, 0) == pytest.approx(bh.conditional_entropy(b, 1, 0))


# --- Tests for CHSH ---
def test_tsirelson_reaches_bound():
    assert bh.chsh(bh.tsirelson_behavior()) == pytest.approx(bh.TSIRELSON)


def test_deterministic_behavior_chsh_is_two():
    b = bh.deterministic_behavior(Scenario(2, 2, 2, 2), (0, 0), (0, 0))
    assert bh.chsh(b) == pytest.approx(2.0)


def test_white_noise_scales_chsh():
    b = bh.white_noise_mix(bh.tsirelson_behavior(), 0.25)
    assert bh.chsh(b) == pytest.approx(0.75 * bh.TSIRELSON)


@pytest.mark.parametrize('s, expected', [
    (2.0, 1.0),
    (bh.TSIRELSON, 0.0),
    (2.5, bh.binary_entropy(0.875)),
])
def test_chi_values(s, expected):
    assert bh.chi(s) == pytest.approx(expected, abs=1e-12)


def test_chi_clamps_with_warning():
    with pytest.warns(RangeClampWarning):
        assert bh.chi(1.5) == pytest.approx(1.0)
    with pytest.warns(RangeClampWarning):
        assert bh.chi(3.0) == pytest.approx(0.0, abs=1e-12)


def test_chi_inside_range_does_not_warn():
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        bh.chi(2.4)


def test_gps_bound_limits():
    assert bh.gps_bound(bh.TSIRELSON, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert bh.gps_bound(2.5, 1.0) == 1.0


def test_conclusive_chsh_of_lossy_tsirelson():
    assert bh.conclusive_chsh(bh.lossy_tsirelson_one_sided(0.6)) == pytest.approx(bh.TSIRELSON)


def test_relabel_rejects_non_permutation():
    with pytest.raises(CheckError):
        bh.relabel_b(bh.tsirelson_behavior(), (0, 0))


# --- Tests for the one-sided attack ---
def test_lossy_tsirelson_is_valid_and_ternary():
    b = bh.lossy_tsirelson_one_sided(0.75)
    assert b.scenario.shape == (2, 2, 3, 2)
    assert b.scenario.phi_a == 2
    assert b.no_signaling_violation() < 1e-12


def test_appendix_c_attack_reconstructs_behavior():
    attack = bh.appendix_c_attack()
    assert attack.eta == pytest.approx((11 + math.sqrt(2)) / 17, abs=1e-12)
    assert attack.residual() < 1e-12
    assert sum(c.weight for c in attack.components) == pytest.approx(1.0)


def test_appendix_c_quantum_parts_reach_tsirelson_on_conclusive_events():
    _, fixed_zero, fixed_one = bh.appendix_c_attack().components
    assert fixed_zero.guess == {0: 0}
    assert fixed_one.guess == {0: 1}
    for component in (fixed_zero, fixed_one):
        assert bh.conclusive_chsh(component.behavior) == pytest.approx(bh.TSIRELSON, abs=1e-9)


# --- Tests for the combined attack ---
@pytest.mark.parametrize('n_k, m, expected', [(1, 2, 0.5), (3, 4, 0.25), (3, 3, 1 / 3)])
def test_eta_c(n_k, m, expected):
    assert bh.eta_c(n_k, m) == pytest.approx(expected)


@pytest.mark.parametrize('n_k, m', [(3, 2), (5, 1)])
def test_eta_c_rejects_more_key_settings_than_settings(n_k, m):
    with pytest.raises(CheckError):
        bh.eta_c(n_k, m)
    with pytest.raises(CheckError):
        bh.combined_attack_hae(0.9, n_k, m)


def test_combined_attack_hae_endpoints():
    assert bh.combined_attack_hae(0.5, 1, 2) == 0.0
    assert bh.combined_attack_hae(1.0, 1, 2) == pytest.approx(1.0)


def test_critical_eta_star_endpoints():
    assert bh.critical_eta_star(1) == pytest.approx(0.857, abs=1e-3)
    assert bh.critical_eta_star(10 ** 6) == pytest.approx(0.822, abs=1e-3)


def test_critical_eta_star_decreases_with_key_settings():
    values = [bh.critical_eta_star(n) for n in (1, 2, 10, 100)]
    assert values == sorted(values, reverse=True)

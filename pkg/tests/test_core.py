from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from riskgate.core import (
    NULL_ACTION,
    GateConfig,
    GlucoseFeatures,
    NavigationFeatures,
    build_proxy_state,
    evaluate,
    gate_values,
    pad_window,
    select_action,
    shaped_reward,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
unit = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def q_and_risk(draw):
    m = draw(st.integers(1, 6))
    a = draw(st.integers(1, 6))
    q = draw(arrays(float, (m, a), elements=finite))
    rho = draw(arrays(float, (a,), elements=unit))
    return q, rho


def test_gate_values_hand_example():
    q = np.array([[1.0, 5.0], [3.0, 1.0]])
    qp, qm, qg = gate_values(q, [0.25, 1.0])
    np.testing.assert_allclose(qp, [3.0, 5.0])
    np.testing.assert_allclose(qm, [1.0, 1.0])
    np.testing.assert_allclose(qg, [0.75 * 3 + 0.25 * 1, 1.0])


@given(q_and_risk())
@settings(max_examples=200, deadline=None)
def test_gate_convexity(data):
    q, rho = data
    qp, qm, qg = gate_values(q, rho)
    assert np.all(qm <= qg) and np.all(qg <= qp)


@given(q_and_risk())
@settings(max_examples=100, deadline=None)
def test_gate_limits(data):
    q, _ = data
    a = q.shape[1]
    qp, qm, qg0 = gate_values(q, np.zeros(a))
    np.testing.assert_array_equal(qg0, qp)
    _, _, qg1 = gate_values(q, np.ones(a))
    np.testing.assert_array_equal(qg1, qm)


@given(q_and_risk(), unit)
@settings(max_examples=100, deadline=None)
def test_gate_monotone_in_risk(data, bump):
    q, rho = data
    _, _, lo = gate_values(q, rho)
    _, _, hi = gate_values(q, np.minimum(1.0, rho + bump))
    assert np.all(hi <= lo + 1e-9)


def test_single_member_ignores_risk():
    q = np.array([[2.0, -1.0, 4.0]])
    _, _, qg = gate_values(q, [0.9, 0.1, 0.5])
    np.testing.assert_array_equal(qg, q[0])


@given(q_and_risk(), unit)
@settings(max_examples=200, deadline=None)
def test_selection_safe_or_fallback(data, r_max):
    q, rho = data
    ev = evaluate(q, rho, r_max)
    if (rho <= r_max).any():
        assert not ev.fallback_used
        assert rho[ev.chosen_action] <= r_max
        assert ev.q_gate[ev.chosen_action] == ev.q_gate[rho <= r_max].max()
    else:
        assert ev.fallback_used
        assert ev.chosen_action == int(np.argmin(rho))


def test_select_ties_lowest_index():
    assert select_action([1.0, 1.0, 1.0], [0.1, 0.1, 0.1], 0.5) == (0, False)
    assert select_action([1.0, 2.0], [0.9, 0.9], 0.5) == (0, True)


def test_select_threshold_inclusive():
    assert select_action([0.0, 9.0], [0.0, 0.25], 0.25) == (1, False)


def test_gate_rejects_bad_shapes():
    with pytest.raises(ValueError):
        gate_values(np.zeros((2, 3)), [0.1, 0.2])
    with pytest.raises(ValueError):
        gate_values(np.array([[np.nan, 1.0]]), [0.1, 0.2])
    with pytest.raises(ValueError):
        select_action([], [], 0.5)


def test_gate_config_validation():
    with pytest.raises(ValueError):
        GateConfig(r_max=1.5)
    with pytest.raises(ValueError):
        GateConfig(lambda_risk=-0.1)
    with pytest.raises(ValueError):
        GateConfig(window_len=0)
    with pytest.raises(ValueError):
        GateConfig(discount=1.0)


def test_shaped_reward():
    assert shaped_reward(1.0, 0.5, 0.1) == pytest.approx(0.95)
    assert shaped_reward(1.0, 0.9, 0.0) == 1.0


def test_pad_window_repeats_first_observation():
    padded = pad_window([(np.array([5.0]), 2)], 3)
    assert len(padded) == 3
    assert [a for _, a in padded] == [NULL_ACTION, NULL_ACTION, 2]
    assert all(o[0] == 5.0 for o, _ in padded)
    with pytest.raises(ValueError):
        pad_window([], 3)


def test_glucose_features():
    rec = GlucoseFeatures(decay=0.5, dt_min=3.0, action_values=[0.0, 0.5, 1.0, 2.0, 4.0])
    window = [(np.array([120.0]), NULL_ACTION), (np.array([126.0]), 3), (np.array([132.0]), 1)]
    ps = build_proxy_state(window, rec)
    cgm, trend, last, iob = ps.features
    assert cgm == 132.0
    assert trend == pytest.approx(12.0 / 6.0)
    assert last == 0.5
    assert iob == pytest.approx(0.5 + 0.5 * 2.0)


def test_navigation_features_layout():
    rec = NavigationFeatures(obs_dim=2, n_actions=3)
    ps = build_proxy_state([(np.array([1.0, 2.0]), 1)], rec, window_len=2)
    assert ps.features.shape == (rec.dim(2),)
    np.testing.assert_array_equal(ps.features, [1, 2, 1, 2, 0, 0, 0, 0, 1, 0])


def test_proxy_rejects_nonfinite():
    with pytest.raises(ValueError):
        build_proxy_state([(np.array([np.nan]), 0)], GlucoseFeatures())

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskgate import metrics as M
from reference_tables import GLUCOSE_ADOLESCENT, GLUCOSE_ADULT, NAV_CIRCLE, NAV_GOAL, nav_mismatches, recompute_ranks


def test_glucose_metrics_boundaries_inclusive():
    m = M.glucose_metrics([69.9, 70.0, 120.0, 180.0, 180.1])
    assert m.tir_pct == pytest.approx(60.0)
    assert m.time_below_70_pct == pytest.approx(20.0)
    assert m.time_above_180_pct == pytest.approx(20.0)
    assert m.mean_bg == pytest.approx(np.mean([69.9, 70.0, 120.0, 180.0, 180.1]))


@given(st.lists(st.floats(20, 500), min_size=1, max_size=200))
@settings(max_examples=200, deadline=None)
def test_glucose_percentages_sum_to_100(g):
    m = M.glucose_metrics(g)
    assert m.tir_pct + m.time_below_70_pct + m.time_above_180_pct == pytest.approx(100.0)


def test_glucose_metrics_latency_and_empty():
    m = M.glucose_metrics([100.0], runtime_s=2.0, latencies_s=[0.001, 0.003])
    assert m.per_step_latency_ms == pytest.approx(2.0)
    with pytest.raises(ValueError):
        M.glucose_metrics([])


def test_nav_metrics_reference_rows():
    ppo = M.nav_metrics([11.37], [109.87], 11.37)
    assert (round(ppo.j_r, 3), round(ppo.j_c, 3), round(ppo.reward_per_cost, 3)) == (1.0, 4.395, 0.103)
    rg = M.nav_metrics([5.39], [36.93], 11.37)
    assert round(rg.reward_per_cost, 3) == 0.146


def test_nav_metrics_zero_cost_flagged_infinite():
    m = M.nav_metrics([3.0, 5.0], [0.0, 0.0], 10.0)
    assert m.reward_per_cost_infinite and math.isinf(m.reward_per_cost)


def test_nav_metrics_rejects_bad_inputs():
    with pytest.raises(ValueError):
        M.nav_metrics([1.0], [1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        M.nav_metrics([1.0], [1.0], 0.0)


def test_average_ranks_ties_and_direction():
    np.testing.assert_allclose(M.average_ranks([3, 1, 3], higher_is_better=True), [1.5, 3.0, 1.5])
    np.testing.assert_allclose(M.average_ranks([3, 1, 2], higher_is_better=False), [3.0, 1.0, 2.0])


def test_mean_rank_best_everywhere_is_one():
    r = M.glucose_mean_rank({"a": (90, 1, 1), "b": (80, 2, 5), "c": (70, 9, 3)})
    assert r["a"] == 1.0


@pytest.mark.parametrize("table", [GLUCOSE_ADULT, GLUCOSE_ADOLESCENT])
def test_mean_rank_reproduces_printed_column(table):
    ranks = recompute_ranks(table)
    for name, row in table.items():
        assert round(ranks[name], 2) == row[3]


def test_normalized_navigation_columns_circle_block():
    assert nav_mismatches(NAV_CIRCLE) == []


def test_normalized_navigation_columns_goal_block_cost_and_ratio():
    # J^C and reward/cost reproduce on every row; see the ledger for the J^R column
    assert all(label == "J^R" for _, label, _, _ in nav_mismatches(NAV_GOAL))


def test_risk_calibration_perfect_and_threshold():
    p = np.array([0.1, 0.3, 0.6, 0.9])
    cal = M.risk_calibration(p, p, r_max=0.25)
    assert cal.mae == 0 and cal.hellinger == 0 and cal.threshold_agreement_pct == 100.0
    assert cal.pearson_r == pytest.approx(1.0)
    cal = M.risk_calibration([0.2, 0.3], [0.3, 0.2], r_max=0.25)
    assert cal.threshold_agreement_pct == 0.0 and cal.mean_signed_error == pytest.approx(0.0)


def test_risk_calibration_constant_series():
    cal = M.risk_calibration([0.1, 0.1, 0.1], [0.0, 1.0, 0.0], r_max=0.25)
    assert not cal.pearson_defined and math.isnan(cal.pearson_r)
    with pytest.raises(ValueError):
        M.risk_calibration([0.1, 0.2], [0.1], r_max=0.25)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=50), st.lists(st.floats(0, 1), min_size=2, max_size=50))
@settings(max_examples=200, deadline=None)
def test_hellinger_in_unit_interval(p, q):
    n = min(len(p), len(q))
    assert 0.0 <= M.hellinger_normalized(p[:n], q[:n]) <= 1.0
    assert 0.0 <= M.hellinger_bernoulli(p[:n], q[:n]) <= 1.0


def test_mean_sd_and_format():
    assert M.mean_sd([1.0, 3.0]) == (2.0, pytest.approx(math.sqrt(2)))
    assert M.mean_sd([5.0]) == (5.0, 0.0)
    assert M.format_mean_sd([82.0, 82.0]) == "82.0 ± 0.0"

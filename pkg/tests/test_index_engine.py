import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from txindex import index_engine
from txindex.flow_model import FlowParams, build_mdp
from txindex.index_engine import (IndexabilityWarning, IndexTable, PolicySet, closed_form_indices,
                                  compute_indices_adaptive_greedy, evaluate_policy, index_lookup_table,
                                  three_state_branches, write_index_csv)
from txindex.verify import tooth_violations

BASE = dict(alpha=1.0, beta=0.9999)


def simulate_totals(mdp, admit, start, steps=2000):
    """Truncated discounted sums along the deterministic trajectory."""
    b = mdp.params.beta
    n, disc, w, r = start, 1.0, 0.0, 0.0
    for _ in range(steps):
        if n in admit:
            w += disc * mdp.work1[n - 1]
            r += disc * mdp.reward1[n - 1]
            n = mdp.succ1(n)
        else:
            n = mdp.succ0(n)
        disc *= b
    return w, r


def ag(N, gamma, alpha, beta):
    return compute_indices_adaptive_greedy(build_mdp(FlowParams(N, gamma, alpha, beta)))


# -- evaluate_policy -----------------------------------------------------------

def test_empty_policy_has_zero_totals():
    mdp = build_mdp(FlowParams(5, 0.5, 1, 0.9))
    for start in mdp.states:
        assert evaluate_policy(mdp, PolicySet.of([]), start) == (0.0, 0.0)


def test_single_state_geometric_series():
    mdp = build_mdp(FlowParams(1, 0.5, 1, 0.5))
    w, r = evaluate_policy(mdp, PolicySet.of([1]), 1)
    assert w == pytest.approx(2.0, abs=1e-14)
    assert r == pytest.approx(math.log(2) / 0.5, abs=1e-14)


def test_two_state_always_admit_work():
    mdp = build_mdp(FlowParams(2, 0.5, 0.0, 0.5))
    w, _ = evaluate_policy(mdp, PolicySet.of([1, 2]), 1)
    assert w == pytest.approx(3.0, abs=1e-14)
    assert w == pytest.approx(simulate_totals(mdp, {1, 2}, 1, 200)[0], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.floats(0, 0.95), st.sampled_from([0.0, 0.5, 1.0, 2.0]),
       st.floats(0.1, 0.95), st.data())
def test_evaluate_policy_matches_trajectory(N, gamma, alpha, beta, data):
    mdp = build_mdp(FlowParams(N, gamma, alpha, beta))
    admit = set(data.draw(st.sets(st.integers(1, N))))
    start = data.draw(st.integers(1, N))
    w, r = evaluate_policy(mdp, PolicySet.of(admit), start)
    sw, sr = simulate_totals(mdp, admit, start, steps=800)
    assert w == pytest.approx(sw, rel=1e-9, abs=1e-9)
    assert r == pytest.approx(sr, rel=1e-9, abs=1e-9)


def test_policy_set_helpers():
    s = PolicySet.from_mask(0b101, 3)
    assert s.admit == {1, 3} and 3 in s and len(s) == 2
    assert not s.is_threshold()
    assert PolicySet.of([1, 2]).is_threshold()
    with pytest.raises(ValueError):
        PolicySet.of([4]).mask_array(3)


# -- adaptive greedy -------------------------------------------------------------

def test_one_state_index():
    assert ag(1, 0.5, 1.0, 0.9)[1] == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("N", [1, 2, 7, 30])
def test_alpha_zero_gives_ones(N):
    t = ag(N, 0.5, 0.0, 0.9)
    assert np.allclose(t.values, 1.0, atol=1e-12)
    assert t.indexable


def test_two_state_index_value():
    expected = (math.log(3) + 0.5 * (math.log(3) - math.log(2))) / (2 + 0.5 * (2 - 1))
    assert expected == pytest.approx(0.520538, abs=1e-6)
    assert ag(2, 0.5, 1.0, 0.5)[2] == pytest.approx(expected, abs=1e-12)


def test_alpha_zero_ties_break_to_lowest_state():
    assert ag(6, 0.5, 0.0, 0.9).assignment_order == (1, 2, 3, 4, 5, 6)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 25), st.floats(0, 0.99), st.floats(0, 3), st.floats(0.05, 0.999))
def test_assignment_order_values_nonincreasing(N, gamma, alpha, beta):
    t = ag(N, gamma, alpha, beta)
    assert sorted(t.assignment_order) == list(range(1, N + 1))
    if t.indexable:
        seq = [t[s] for s in t.assignment_order]
        assert all(b <= a + 1e-9 for a, b in zip(seq, seq[1:]))
        assert np.all(t.marginal_work > 0)


# -- closed forms --------------------------------------------------------------

def R(n, alpha=1.0):
    return math.log1p(n) if alpha == 1 else ((1 + n) ** (1 - alpha) - 1) / (1 - alpha)


def test_three_state_restart_formulas():
    b = 0.9
    t = closed_form_indices(build_mdp(FlowParams(3, 0.5, 1.0, b)))
    l2, l3, l4 = math.log(2), math.log(3), math.log(4)
    assert t[1] == pytest.approx(l2, abs=1e-14)
    assert t[2] == pytest.approx((l3 + b * (l3 - l2)) / (2 + b), abs=1e-14)
    assert t[3] == pytest.approx((l4 + b * (l4 - l2) + b * b * (l4 - l3)) / (3 + b * 2 + b * b * 1), abs=1e-14)
    assert ag(3, 0.5, 1.0, b).values == pytest.approx(t.values, abs=1e-12)


@pytest.mark.parametrize("beta", [0.3, 0.9, 0.9999])
def test_three_state_alpha_below_one_branch(beta):
    t = closed_form_indices(build_mdp(FlowParams(3, 0.7, 0.5, beta)))
    assert t[2] == pytest.approx((R(2, 0.5) - beta * R(1, 0.5)) / (2 - beta * 1), abs=1e-14)


def test_closed_form_not_applicable_above_three():
    assert closed_form_indices(build_mdp(FlowParams(4, 0.5, 1, 0.9))) is None


def test_swapped_branch_third_index():
    # gamma >= 2/3, alpha >= 1: state 3 enters before state 2 for this beta
    b = 0.99
    mdp = build_mdp(FlowParams(3, 0.7, 1.0, b))
    t = ag(3, 0.7, 1.0, b)
    assert t.assignment_order == (1, 3, 2)
    nu3 = (R(3) * (1 + b) - b * b * R(1)) / (3 * (1 + b) - b * b * 1)
    assert t[3] == pytest.approx(nu3, abs=1e-12)
    assert closed_form_indices(mdp).values == pytest.approx(t.values, abs=1e-12)
    # the ratio without the (1 + b) weights does not match the greedy value
    assert abs((R(3) - b * b * R(1)) / (3 - b * b) - t[3]) > 1e-3


def test_branch_selection_matches_greedy_on_dense_beta_scan():
    for b in np.linspace(0.5, 0.9999, 40):
        for a in (0.9, 1.0, 2.0):
            mdp = build_mdp(FlowParams(3, 0.7, a, float(b)))
            assert closed_form_indices(mdp).values == pytest.approx(
                compute_indices_adaptive_greedy(mdp).values, abs=1e-8)
            assert set(three_state_branches(mdp)) == {"restart", "ordered", "swapped"}


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 3), st.floats(0, 0.99), st.floats(0, 3), st.floats(0.05, 0.999))
def test_closed_form_matches_greedy_random(N, gamma, alpha, beta):
    mdp = build_mdp(FlowParams(N, gamma, alpha, beta))
    assert closed_form_indices(mdp).values == pytest.approx(
        compute_indices_adaptive_greedy(mdp).values, abs=1e-8)


# -- shape and parameter monotonicity -----------------------------------------

def test_base_instance_zigzag():
    t = ag(70, 0.5, **BASE)
    assert not t.monotone_nonincreasing
    assert t[5] < t[6]  # odd windows sit below the next even one


@pytest.mark.parametrize("gamma,period", [(0.5, 2), (2 / 3, 3)])
def test_teeth_hold_away_from_window_cap(gamma, period):
    # with a larger cap the first 70 states show clean teeth; near the cap the
    # absorbing top state bends the last few values
    v = ag(140, gamma, **BASE).values[:70]
    assert tooth_violations(v, period) == []


def test_gamma_zero_monotone():
    assert ag(70, 0.0, **BASE).monotone_nonincreasing


@pytest.mark.parametrize("n", [5, 20, 50])
def test_index_decreasing_in_alpha_and_beta(n):
    by_alpha = [ag(70, 0.5, a, 0.9999)[n] for a in (0, 0.5, 1, 2)]
    assert all(b <= a + 1e-9 for a, b in zip(by_alpha, by_alpha[1:]))
    by_beta = [ag(70, 0.5, 1.0, b)[n] for b in (0.3, 0.9, 0.9999)]
    assert all(b <= a + 1e-9 for a, b in zip(by_beta, by_beta[1:]))


@pytest.mark.parametrize("n", [6, 12, 18])
def test_gamma_099_is_lower_bound(n):
    low = ag(70, 0.99, **BASE)[n]
    for g in (1 / 3, 0.5, 2 / 3, 5 / 6):
        assert low <= ag(70, g, **BASE)[n] + 1e-9


# -- lookup tables ---------------------------------------------------------------

def test_lookup_table_memoized_and_shaped():
    p = FlowParams(70, 0.5, 1.0, 0.9999)
    v1 = index_lookup_table(p)
    v2 = index_lookup_table(FlowParams(70, 0.5, 1.0, 0.9999, initial_window=3))
    assert v1 is v2 and len(v1) == 70
    assert np.allclose(index_lookup_table(FlowParams(70, 0.5, 0.0, 0.9999)), 1.0)


def test_lookup_table_warns_when_not_indexable(monkeypatch):
    bad = IndexTable(np.ones(3), False, True, (1, 2, 3))
    monkeypatch.setattr(index_engine, "index_table_for", lambda p: bad)
    with pytest.warns(IndexabilityWarning):
        vals = index_lookup_table(FlowParams(3, 0.5, 1, 0.9))
    assert np.array_equal(vals, np.ones(3))


def test_csv_export():
    buf = io.StringIO()
    write_index_csv(ag(3, 0.5, 1.0, 0.9), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "state,index_value"
    assert len(lines) == 4 and lines[1].startswith("1,0.693147")

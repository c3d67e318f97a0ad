import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (candidate_oracle, expand_oracle, expanders_oracle, reach_oracle,
                     returnable_oracle)
from snomdp.exceptions import NoExpandersError
from snomdp.gridworld import GridWorld
from snomdp.safesets import (SENTINEL, SafeSetState, SafetyIntervals, candidate_set,
                             expand_safe_set, expanders, reachable_set, returnable_set,
                             select_goal, synchronized_update, update_intervals)

H = -0.5


def _iv(lower, upper, h=H):
    lower = np.asarray(lower, dtype=float)
    return SafetyIntervals(lower, np.asarray(upper, dtype=float), np.zeros(len(lower), bool), h)


def test_zero_scale_collapses_to_mean():
    iv = _iv([-SENTINEL], [SENTINEL])
    out = update_intervals(iv, [5.0], [3.0], 0.0)
    assert (out.lower[0], out.upper[0]) == (5.0, 5.0)


def test_update_is_idempotent():
    iv = _iv([-SENTINEL, 0.0], [SENTINEL, 4.0])
    a = update_intervals(iv, [1.0, 2.0], [0.5, 3.0], 2.0)
    b = update_intervals(a, [1.0, 2.0], [0.5, 3.0], 2.0)
    assert np.array_equal(a.lower, b.lower) and np.array_equal(a.upper, b.upper)


def test_hand_intersection():
    out = update_intervals(_iv([0.0], [2.5]), [1.0], [1.0], 2.0)
    assert (out.lower[0], out.upper[0]) == (0.0, 2.5)


def test_disjoint_band_collapses_to_nearest_endpoint():
    out = update_intervals(_iv([0.0, 0.0], [1.0, 1.0]), [5.0, -5.0], [0.1, 0.1], 1.0)
    assert out.lower.tolist() == [1.0, 0.0] and out.upper.tolist() == [1.0, 0.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0, 3), st.floats(0, 4)),
                min_size=1, max_size=10))
def test_intervals_contract(updates):
    iv = _iv([-SENTINEL], [SENTINEL])
    for m, s, b in updates:
        nxt = update_intervals(iv, [m], [s], b)
        assert nxt.lower[0] >= iv.lower[0] and nxt.upper[0] <= iv.upper[0]
        assert nxt.lower[0] <= nxt.upper[0]
        iv = nxt


def test_huge_lipschitz_keeps_base():
    w = GridWorld(4, 4)
    base = w.mask([(1, 1)])
    iv = _iv(np.full(16, 10.0), np.full(16, 10.0))
    assert np.array_equal(candidate_set(iv, base, "lower", 1e9, w.distances), base)


def test_zero_lipschitz_covers_grid():
    w = GridWorld(4, 4)
    base = w.mask([(1, 1)])
    lower = np.full(16, -SENTINEL)
    lower[w.index((1, 1))] = H
    iv = _iv(lower, np.full(16, SENTINEL))
    assert candidate_set(iv, base, "lower", 0.0, w.distances).all()


def test_line_candidate_by_hand():
    w = GridWorld(5, 1)
    lower = np.full(5, -SENTINEL)
    lower[0] = H + 2
    got = candidate_set(_iv(lower, np.full(5, SENTINEL)), w.mask([(0, 0)]), "lower", 1.0,
                        w.distances)
    assert w.states_of(got) == {(0, 0), (1, 0), (2, 0)}


def test_reachable_examples():
    w = GridWorld(5, 5)
    assert not reachable_set(w, np.zeros(25, bool)).any()
    assert w.states_of(reachable_set(w, w.mask([(2, 2)]))) == {
        (2, 2), (2, 3), (3, 2), (2, 1), (1, 2)}
    assert reachable_set(w, np.ones(25, bool)).all()


def test_returnable_examples():
    w = GridWorld(5, 1)
    X = w.mask([(0, 0), (1, 0), (2, 0)])
    assert np.array_equal(returnable_set(w, X, X), X)
    assert not returnable_set(w, X, np.zeros(5, bool)).any()
    assert np.array_equal(returnable_set(w, X, w.mask([(0, 0)])), X)


def test_no_expansion_with_huge_lipschitz():
    w = GridWorld(5, 5)
    s0 = w.mask([(2, 2), (2, 3)])
    iv = SafetyIntervals.initial_for(w, s0, H)
    ss = expand_safe_set(SafeSetState.initial_for(s0), iv, w, 1e9, "pessimistic")
    assert np.array_equal(ss.x_minus, s0)


def test_sides_coincide_when_bounds_coincide():
    rng = np.random.default_rng(0)
    w = GridWorld(5, 5)
    vals = rng.normal(size=25)
    iv = _iv(vals, vals)
    s0 = w.mask([(2, 2)])
    ss = synchronized_update(SafeSetState.initial_for(s0), iv, w, 0.7, until_stable=True)
    assert np.array_equal(ss.x_minus, ss.x_plus) and np.array_equal(ss.s_minus, ss.s_plus)


def test_full_candidate_set_has_no_expanders():
    w = GridWorld(3, 3)
    ss = SafeSetState(*(np.ones(9, bool),) * 4, np.zeros(9, bool), np.zeros(9))
    G, _ = expanders(ss, _iv(np.zeros(9), np.full(9, 5.0)), w, 1.0)
    assert not G.any()


def test_single_cell_expander_by_hand():
    w = GridWorld(2, 1)
    s0 = w.mask([(0, 0)])
    ss = SafeSetState.initial_for(s0)
    iv = _iv([H, -SENTINEL], [H + 1.5, SENTINEL])
    G, width = expanders(ss, iv, w, 1.0)
    assert G.tolist() == [True, False] and width[0] == 1.5


def test_width_by_subtraction():
    assert _iv([0.0, -1.0], [0.0, 2.0]).width.tolist() == [0.0, 3.0]


def test_select_goal():
    w = np.array([1.0, 2.0, 2.0, 0.5])
    assert select_goal(np.array([True, False, False, False]), w) == 0
    assert select_goal(np.array([True, True, False, False]), w) == 1
    assert select_goal(np.array([False, True, True, False]), w) == 1
    with pytest.raises(NoExpandersError):
        select_goal(np.zeros(4, bool), w)


def random_instance(rng):
    width, height = rng.integers(1, 6, size=2)
    w = GridWorld(int(width), int(height))
    n = w.n_states
    h = float(rng.normal())
    lower = h + rng.normal(scale=1.5, size=n)
    upper = lower + rng.exponential(1.0, size=n)
    prev_minus = np.zeros(n, bool)
    prev_minus[rng.integers(n)] = True
    # grow a connected seed set by a few random walk steps
    s = int(np.flatnonzero(prev_minus)[0])
    for _ in range(rng.integers(0, 4)):
        s = int(w.successors[s, rng.integers(5)])
        prev_minus[s] = True
    prev_plus = prev_minus | (rng.random(n) < 0.3)
    L = float(rng.choice([0.0, 0.3, 1.0, 2.5]))
    iv = SafetyIntervals(lower, upper, prev_minus.copy(), h)
    return w, iv, prev_minus, prev_plus, L


def check_instance(rng):
    """One fuzzed comparison of every set operation against the oracles."""
    w, iv, pm, pp, L = random_instance(rng)
    X = rng.random(w.n_states) < 0.6
    Xbar = X & (rng.random(w.n_states) < 0.3)
    if w.states_of(reachable_set(w, X)) != {w.state(i) for i in reach_oracle(w, np.flatnonzero(X))}:
        return False
    got_ret = set(np.flatnonzero(returnable_set(w, X, Xbar)).tolist())
    if got_ret != returnable_oracle(w, set(np.flatnonzero(X)), set(np.flatnonzero(Xbar))):
        return False
    prev = SafeSetState(pm, pp, pm, pp, np.zeros(w.n_states, bool), np.zeros(w.n_states))
    ss = expand_safe_set(prev, iv, w, L, "pessimistic")
    ss = expand_safe_set(ss, iv, w, L, "optimistic")
    S_m, X_m, S_p, X_p = expand_oracle(w, iv.lower, iv.upper, set(np.flatnonzero(pm)),
                                       set(np.flatnonzero(pp)), L, iv.threshold)
    got = [set(np.flatnonzero(a).tolist()) for a in (ss.s_minus, ss.x_minus, ss.s_plus,
                                                     ss.x_plus)]
    if got != [S_m, X_m, S_p, X_p]:
        return False
    if set(candidate_oracle(w, iv.lower, set(np.flatnonzero(pm)), L, iv.threshold)) != \
            set(np.flatnonzero(candidate_set(iv, pm, "lower", L, w.distances)).tolist()):
        return False
    G, _ = expanders(ss, iv, w, L)
    return set(np.flatnonzero(G).tolist()) == expanders_oracle(w, iv.upper, X_m, S_m, L,
                                                               iv.threshold)


def test_fuzzed_set_operations_match_oracles():
    rng = np.random.default_rng(2024)
    assert all(check_instance(rng) for _ in range(60))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_pessimistic_set_is_monotone_and_inside_optimistic(seed):
    rng = np.random.default_rng(seed)
    w = GridWorld(5, 5)
    s0 = np.zeros(25, bool)
    s0[rng.integers(25)] = True
    iv = SafetyIntervals.initial_for(w, s0, H)
    ss = SafeSetState.initial_for(s0)
    g = rng.normal(size=25)
    for _ in range(4):
        std = rng.uniform(0, 1, size=25)
        iv = update_intervals(iv, g + rng.normal(scale=0.1, size=25) * std, std, 2.0)
        nxt = synchronized_update(ss, iv, w, 1.0, until_stable=True)
        assert np.all(nxt.x_minus >= ss.x_minus)
        assert np.all(nxt.x_minus <= nxt.x_plus)
        ss = nxt

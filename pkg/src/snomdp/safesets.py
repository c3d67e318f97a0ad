"""Confidence intervals on the safety function and the safe sets built from them.

All sets are boolean masks over the flat state index of a
:class:`~snomdp.gridworld.GridWorld`. ``world.mask`` and ``world.states_of``
convert to and from sets of ``(x, y)`` tuples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import NoExpandersError

SENTINEL = 1e12


@dataclass(frozen=True)
class SafetyIntervals:
    """Per-state bounds ``lower <= g(s) <= upper`` intersected over time."""

    lower: np.ndarray
    upper: np.ndarray
    initial: np.ndarray
    threshold: float

    @classmethod
    def initial_for(cls, world, initial_safe, threshold: float) -> "SafetyIntervals":
        """``[h, SENTINEL]`` on the seed set, ``[-SENTINEL, SENTINEL]`` elsewhere."""
        initial = np.asarray(initial_safe, dtype=bool)
        lower = np.where(initial, threshold, -SENTINEL)
        upper = np.full(world.n_states, SENTINEL)
        return cls(lower, upper, initial.copy(), float(threshold))

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def update_intervals(iv: SafetyIntervals, mean, std, scale: float) -> SafetyIntervals:
    """Intersect the current intervals with ``mean -/+ scale * std``.

    Where the new band misses the old interval entirely (the confidence band
    failed to cover ``g`` at some point) the interval collapses to the old
    endpoint nearest the band. That keeps ``l`` nondecreasing and ``u``
    nonincreasing and marks the state as carrying no further information.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    band_lo = mean - scale * std
    band_hi = mean + scale * std
    lo = np.maximum(iv.lower, band_lo)
    hi = np.minimum(iv.upper, band_hi)
    empty = lo > hi
    if empty.any():
        nearest = np.where(band_lo > iv.upper, iv.upper, iv.lower)
        lo = np.where(empty, nearest, lo)
        hi = np.where(empty, nearest, hi)
    return replace(iv, lower=lo, upper=hi)


def _lipschitz_penalty(distances: np.ndarray, L: float) -> np.ndarray:
    # keeps d = 0 finite when L is infinite
    return np.where(distances == 0, 0.0, L * distances)


def candidate_set(iv: SafetyIntervals, base, bound: str, L: float, distances,
                  include_base: bool = True, penalty=None) -> np.ndarray:
    """States certified through the Lipschitz bound from some state in ``base``.

    ``{s | exists s' in base: bound(s') - L d(s, s') >= h}``, plus ``base``
    itself when ``include_base`` is set. ``penalty`` optionally supplies the
    precomputed ``L * distances`` matrix.
    """
    base = np.asarray(base, dtype=bool)
    if bound not in ("lower", "upper"):
        raise ValueError(f"bound must be 'lower' or 'upper', got {bound!r}")
    values = iv.lower if bound == "lower" else iv.upper
    idx = np.flatnonzero(base)
    if len(idx) == 0:
        return base.copy()
    pen = penalty[idx] if penalty is not None else _lipschitz_penalty(distances[idx], L)
    margin = values[idx, None] - pen
    out = np.any(margin >= iv.threshold, axis=0)
    return out | base if include_base else out


def reachable_set(world, X) -> np.ndarray:
    """``X`` together with every state one action away from it."""
    X = np.asarray(X, dtype=bool)
    out = X.copy()
    out[world.successors[X].ravel()] = True
    return out


def returnable_set(world, X, X_bar) -> np.ndarray:
    """States that can reach ``X_bar`` along a path inside ``X`` (least fixed point)."""
    X = np.asarray(X, dtype=bool)
    R = np.asarray(X_bar, dtype=bool).copy()
    succ = world.successors
    while True:
        grown = R | (X & R[succ].any(axis=1))
        if np.array_equal(grown, R):
            return R
        R = grown


@dataclass(frozen=True)
class SafeSetState:
    x_minus: np.ndarray
    x_plus: np.ndarray
    s_minus: np.ndarray
    s_plus: np.ndarray
    expanders: np.ndarray
    widths: np.ndarray

    @classmethod
    def initial_for(cls, initial_safe) -> "SafeSetState":
        s0 = np.asarray(initial_safe, dtype=bool)
        return cls(s0.copy(), s0.copy(), s0.copy(), s0.copy(),
                   np.zeros_like(s0), np.zeros(len(s0)))


def expand_safe_set(prev: SafeSetState, iv: SafetyIntervals, world, L: float,
                    side: str) -> SafeSetState:
    """One update of the pessimistic or optimistic safe set.

    The candidate set is certified from the previous safe set (lower bound for
    the pessimistic side, upper bound for the optimistic side); the new safe
    set keeps the candidates that are one step from the previous safe set and
    can return to it through candidates.
    """
    if side == "pessimistic":
        before = prev.x_minus
        S = candidate_set(iv, before, "lower", L, world.distances,
                          penalty=world.lipschitz_penalty(L))
    elif side == "optimistic":
        before = prev.x_plus
        S = candidate_set(iv, before, "upper", L, world.distances,
                          penalty=world.lipschitz_penalty(L))
    else:
        raise ValueError(f"side must be 'pessimistic' or 'optimistic', got {side!r}")
    X = S & reachable_set(world, before) & returnable_set(world, S, before)
    if side == "pessimistic":
        return replace(prev, x_minus=X, s_minus=S)
    return replace(prev, x_plus=X, s_plus=S)


def expansion_counts(ss: SafeSetState, iv: SafetyIntervals, world, L: float) -> np.ndarray:
    """For every state, how many states outside the pessimistic candidate set
    its upper bound could certify."""
    outside = ~ss.s_minus
    if not outside.any():
        return np.zeros(world.n_states, dtype=int)
    margin = iv.upper[:, None] - world.lipschitz_penalty(L)[:, outside]
    return np.count_nonzero(margin >= iv.threshold, axis=1)


def expanders(ss: SafeSetState, iv: SafetyIntervals, world, L: float):
    """Expander mask ``G`` (subset of the pessimistic set) and widths ``u - l``."""
    counts = expansion_counts(ss, iv, world, L)
    G = ss.x_minus & (counts > 0)
    return G, iv.width


def select_goal(G, w) -> int:
    """Index of the widest expander; ties go to the lowest state index."""
    G = np.asarray(G, dtype=bool)
    idx = np.flatnonzero(G)
    if len(idx) == 0:
        raise NoExpandersError("no expanders left")
    w = np.asarray(w, dtype=float)
    return int(idx[np.argmax(w[idx])])


def synchronized_update(prev: SafeSetState, iv: SafetyIntervals, world, L: float,
                        until_stable: bool = False) -> SafeSetState:
    """Both sides of the safe set plus expanders, from the same intervals.

    A single application grows each side by at most one step. With
    ``until_stable`` the two operators are reapplied on the same intervals
    until neither set changes, which is what the agent uses between walks.
    """
    ss = prev
    while True:
        nxt = expand_safe_set(ss, iv, world, L, "pessimistic")
        nxt = expand_safe_set(nxt, iv, world, L, "optimistic")
        stable = (np.array_equal(nxt.x_minus, ss.x_minus)
                  and np.array_equal(nxt.x_plus, ss.x_plus))
        ss = nxt
        if stable or not until_stable:
            break
    G, w = expanders(ss, iv, world, L)
    return replace(ss, expanders=G, widths=w)


def snapshot_records(t: int, world, ss: SafeSetState, iv: SafetyIntervals):
    """Rows ``(t, x, y, in_X_minus, in_X_plus, in_G, l, u, w)``."""
    for i, (x, y) in enumerate(world.cells):
        yield (t, int(x), int(y), bool(ss.x_minus[i]), bool(ss.x_plus[i]),
               bool(ss.expanders[i]), float(iv.lower[i]), float(iv.upper[i]),
               float(iv.upper[i] - iv.lower[i]))

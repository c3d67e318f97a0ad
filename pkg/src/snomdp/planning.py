"""Bellman solvers on deterministic grid MDPs restricted to an admissible set.

Every value function in the algorithm has the same shape: from state ``s``
pick the admissible successor ``s'`` maximizing ``q(s') = r(s') + gamma V(s')``
(or ``p(s') (r(s') + gamma V(s'))`` when a survival probability is attached,
which is the backup of an MDP with an absorbing zero-reward state entered
with probability ``1 - p``).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.special import erfc

from .exceptions import ConvergenceError, DisconnectedSafeSetError
from .gridworld import ACTIONS

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 10_000
TIE_TOL = 1e-10


@dataclass
class MdpView:
    """Deterministic MDP over ``admissible`` states of a grid."""

    admissible: np.ndarray
    successors: np.ndarray
    reward: np.ndarray
    gamma: float
    survival: Optional[np.ndarray] = None

    def __post_init__(self):
        self.admissible = np.asarray(self.admissible, dtype=bool)
        self.reward = np.asarray(self.reward, dtype=float)
        if not 0 <= self.gamma < 1:
            raise ValueError("discount must be in [0, 1)")
        if self.survival is not None:
            self.survival = np.asarray(self.survival, dtype=float)
            p = self.survival[self.admissible]
            if np.any(p < 0) or np.any(p > 1):
                raise ValueError("survival probabilities must lie in [0, 1]")

    @classmethod
    def on(cls, world, admissible, reward, gamma, survival=None) -> "MdpView":
        return cls(admissible, world.successors, reward, gamma, survival)

    def action_values(self, V: np.ndarray) -> np.ndarray:
        """``q`` for every (state, action); ``-inf`` where the successor is inadmissible."""
        succ = self.successors
        target = np.where(self.admissible, self.reward + self.gamma * V, 0.0)
        if self.survival is not None:
            target = np.where(self.admissible, self.survival * target, 0.0)
        return np.where(self.admissible[succ], target[succ], -np.inf)


@dataclass
class ValueSolution:
    value: np.ndarray
    policy: np.ndarray
    residual: float
    iterations: int
    deltas: List[float]


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """First action (in ``ACTIONS`` order) within a hair of the row maximum; -1 if none."""
    best = q.max(axis=1)
    finite = np.isfinite(best)
    tol = TIE_TOL * np.maximum(1.0, np.abs(np.where(finite, best, 0.0)))
    ok = q >= (best - tol)[:, None]
    policy = np.argmax(ok, axis=1)
    return np.where(finite, policy, -1)


def value_iteration(view: MdpView, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                    init=None) -> ValueSolution:
    """Synchronous value iteration until the sup-norm change drops below ``tol``.

    Values of inadmissible states are fixed at zero. The returned policy is
    greedy with respect to the final values for *every* state that has an
    admissible successor, admissible or not, and ``-1`` elsewhere.
    """
    adm = view.admissible
    V = np.zeros(len(adm)) if init is None else np.where(adm, init, 0.0)
    deltas = []
    delta = np.inf
    for it in range(1, max_iter + 1):
        q = view.action_values(V)
        V_new = np.where(adm, q.max(axis=1), 0.0) if adm.any() else V
        delta = float(np.max(np.abs(V_new - V))) if adm.any() else 0.0
        deltas.append(delta)
        V = V_new
        if delta < tol:
            break
    else:
        raise ConvergenceError(f"value iteration did not converge in {max_iter} sweeps", delta)
    policy = greedy_policy(view.action_values(V))
    return ValueSolution(V, policy, delta, it, deltas)


def optimistic_reward(mean, std, scale: float) -> np.ndarray:
    """Upper confidence bound ``mean + scale * std``."""
    return np.asarray(mean, dtype=float) + scale * np.asarray(std, dtype=float)


def es2_auxiliary_reward(mean, std, scale: float, x_minus, x_plus) -> np.ndarray:
    """Pessimistic reward inside ``x_minus``, optimistic on ``x_plus - x_minus``,
    NaN outside ``x_plus``."""
    mean = np.asarray(mean, dtype=float)
    bonus = scale * np.asarray(std, dtype=float)
    x_minus = np.asarray(x_minus, dtype=bool)
    x_plus = np.asarray(x_plus, dtype=bool)
    r = np.where(x_minus, mean - bonus, mean + bonus)
    return np.where(x_plus | x_minus, r, np.nan)


def pes2_survival(mean_g, std_g, h: float) -> np.ndarray:
    """Probability that ``g(s) >= h`` under a Gaussian belief; indicator when ``std`` is 0."""
    mean_g = np.asarray(mean_g, dtype=float)
    std_g = np.asarray(std_g, dtype=float)
    safe_std = np.where(std_g > 0, std_g, 1.0)
    p = 1.0 - 0.5 * erfc((mean_g - h) / (np.sqrt(2.0) * safe_std))
    return np.where(std_g > 0, p, (mean_g >= h).astype(float))


@dataclass
class StopCheck:
    stop: bool
    visited: np.ndarray
    solution: ValueSolution


def _policy_image(world, x_minus, policy) -> np.ndarray:
    idx = np.flatnonzero(x_minus)
    acts = policy[idx]
    if np.any(acts < 0):
        raise DisconnectedSafeSetError("a pessimistic state has no admissible successor")
    out = np.zeros(world.n_states, dtype=bool)
    out[world.successors[idx, acts]] = True
    return out


def _stop_check(world, x_minus, x_plus, reward, gamma, tol, max_iter, survival=None):
    x_minus = np.asarray(x_minus, dtype=bool)
    admissible = np.asarray(x_plus, dtype=bool) | x_minus
    view = MdpView.on(world, admissible, np.nan_to_num(reward), gamma, survival)
    sol = value_iteration(view, tol, max_iter)
    image = _policy_image(world, x_minus, sol.policy)
    return StopCheck(bool(np.all(x_minus[image])), image, sol)


def es2_stop_check(world, x_minus, x_plus, mean_r, std_r, scale, gamma,
                   tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> StopCheck:
    """Solve the auxiliary MDP over ``x_plus``; stop when its greedy policy
    maps every pessimistic state back into the pessimistic set."""
    reward = es2_auxiliary_reward(mean_r, std_r, scale, x_minus, x_plus)
    return _stop_check(world, x_minus, x_plus, reward, gamma, tol, max_iter)


def pes2_stop_check(world, x_minus, x_plus, mean_r, std_r, mean_g, std_g, scale, h, gamma,
                    tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, survival=None) -> StopCheck:
    """As :func:`es2_stop_check` with every move discounted by the probability
    that its target is safe. ``survival`` overrides that probability."""
    if survival is None:
        survival = pes2_survival(mean_g, std_g, h)
    reward = es2_auxiliary_reward(mean_r, std_r, scale, x_minus, x_plus)
    return _stop_check(world, x_minus, x_plus, reward, gamma, tol, max_iter, survival)


def shortest_path_to_set(world, allowed, start: int, targets) -> List[int]:
    """Fewest actions from ``start`` to any target, every visited state in ``allowed``.

    Breadth-first search expanding actions in ``ACTIONS`` order, which makes
    the returned sequence the first in that order among the shortest ones.
    """
    allowed = np.asarray(allowed, dtype=bool)
    targets = np.asarray(targets, dtype=bool)
    if targets[start]:
        return []
    succ = world.successors
    parent = {start: None}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        for a in range(1, len(ACTIONS)):
            t = int(succ[s, a])
            if t in parent or not allowed[t]:
                continue
            parent[t] = (s, a)
            if targets[t]:
                path = []
                while parent[t] is not None:
                    t, a_ = parent[t]
                    path.append(a_)
                return path[::-1]
            queue.append(t)
    raise DisconnectedSafeSetError(f"no path from state {world.state(start)} inside the safe set")


def shortest_safe_path(world, x_minus, start: int, goal: int) -> List[int]:
    """Shortest action sequence from ``start`` to ``goal`` inside ``x_minus``."""
    targets = np.zeros(world.n_states, dtype=bool)
    targets[goal] = True
    x_minus = np.asarray(x_minus, dtype=bool)
    if not (x_minus[start] and x_minus[goal]):
        raise DisconnectedSafeSetError("path endpoints must lie in the safe set")
    return shortest_path_to_set(world, x_minus, start, targets)

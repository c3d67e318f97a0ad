"""Stepwise safe exploration followed by reward optimization.

A run has two phases. While exploring safety the agent repeatedly recomputes
the safe sets, walks to the expander with the widest confidence interval and
updates both GP beliefs at every state it passes. Once a stopping rule fires
it freezes the safety belief and the admissible set and optimizes an
optimistic reward inside that set for the rest of the run.

Three stopping rules are available: ``classic`` (every expander's interval
is narrower than ``eps_g``), ``es2`` and ``pes2`` (the greedy policy of an
auxiliary MDP keeps every pessimistic state inside the pessimistic set). The
classic rule stays active as a backstop under ``es2``/``pes2``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .exceptions import ConfigurationError, ParseError, RunAborted, SnoMdpError
from .gp import ConfidenceSchedule, GaussianProcess, Kernel, info_gain_estimate
from .gridworld import ACTIONS, STAY, EnvironmentTruth, GridWorld, State, observe
from .planning import (DEFAULT_MAX_ITER, DEFAULT_TOL, MdpView, es2_stop_check,
                       optimistic_reward, pes2_stop_check, shortest_path_to_set,
                       shortest_safe_path, value_iteration)
from .safesets import (SafeSetState, SafetyIntervals, reachable_set, returnable_set,
                       select_goal, synchronized_update, update_intervals)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
AVERAGE_WINDOW = 50

EXPLORE = "explore_safety"
OPTIMIZE = "optimize_reward"

STOP_MODES = ("classic", "es2", "pes2")
METHODS = ("sno_mdp_classic", "sno_mdp_es2", "sno_mdp_pes2", "safemdp", "oracle")


@dataclass(frozen=True)
class AgentConfig:
    threshold: float
    lipschitz: float
    initial_safe_set: Tuple[State, ...]
    start_state: State
    gamma: float = 0.99
    eps_g: float = 0.1
    alpha: ConfidenceSchedule = field(default_factory=lambda: ConfidenceSchedule(fixed_value=3.0))
    beta: ConfidenceSchedule = field(default_factory=lambda: ConfidenceSchedule(fixed_value=2.0))
    stop_mode: str = "classic"
    max_steps: int = 1000
    seed: int = 0
    kernel_reward: Kernel = field(default_factory=Kernel)
    kernel_safety: Kernel = field(default_factory=Kernel)
    noise_variance_reward: float = 0.0
    noise_variance_safety: float = 0.0
    vi_tol: float = DEFAULT_TOL
    vi_max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        s0 = tuple(tuple(int(c) for c in s) for s in self.initial_safe_set)
        object.__setattr__(self, "initial_safe_set", s0)
        object.__setattr__(self, "start_state", tuple(int(c) for c in self.start_state))
        if not s0:
            raise ConfigurationError("initial safe set must be nonempty")
        if self.start_state not in s0:
            raise ConfigurationError("start state must belong to the initial safe set")
        if not 0 <= self.gamma < 1:
            raise ConfigurationError("discount must be < 1 and >= 0")
        if not self.eps_g > 0:
            raise ConfigurationError("eps_g must be positive")
        if not self.lipschitz >= 0:
            raise ConfigurationError("lipschitz constant must be nonnegative")
        if self.stop_mode not in STOP_MODES:
            raise ConfigurationError(f"unknown stop mode {self.stop_mode!r}")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")
        for name, sched, noise in (("alpha", self.alpha, self.noise_variance_reward),
                                   ("beta", self.beta, self.noise_variance_safety)):
            if sched.mode == "theoretical" and not sched.info_gain and not noise > 0:
                raise ConfigurationError(
                    f"theoretical {name} schedule needs a positive noise variance "
                    "to estimate the information gain")


@dataclass
class TrajectoryLog:
    method: str
    seed: int
    start: State
    records: list
    summary: dict
    trace: Optional[list] = None

    def header(self) -> dict:
        return {"record": "header", "schema_version": SCHEMA_VERSION, "method": self.method,
                "seed": self.seed, "start": list(self.start)}

    def to_jsonl(self) -> str:
        lines = [self.header()]
        lines.extend({"record": "step", **r} for r in self.records)
        lines.append({"record": "summary", "schema_version": SCHEMA_VERSION, **self.summary})
        return "".join(json.dumps(obj, sort_keys=True) + "\n" for obj in lines)

    @classmethod
    def from_jsonl(cls, text: str, source="<log>") -> "TrajectoryLog":
        header = summary = None
        records = []
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj.pop("record")
            except (ValueError, KeyError, AttributeError, TypeError):
                raise ParseError("not a log record", row=n, path=source) from None
            if kind == "header":
                if obj.get("schema_version") != SCHEMA_VERSION:
                    raise ParseError("unsupported schema version", row=n, path=source)
                header = obj
            elif kind == "step":
                records.append(obj)
            elif kind == "summary":
                summary = obj
            else:
                raise ParseError(f"unknown record type {kind!r}", row=n, path=source)
        if header is None or summary is None:
            raise ParseError("log lacks a header or summary record", path=source)
        summary.pop("schema_version", None)
        return cls(header["method"], header["seed"], tuple(header["start"]), records, summary)

    @property
    def unsafe_action_count(self) -> int:
        return self.summary["unsafe_action_count"]

    @property
    def t_transition(self) -> int:
        return self.summary["t_transition"]

    def rewards(self) -> np.ndarray:
        return np.array([r["true_reward"] for r in self.records])


class _Simulation:
    """Mutable state of one run; never shared between runs."""

    def __init__(self, config: AgentConfig, env: EnvironmentTruth, world: GridWorld,
                 method: str, record_trace: bool = False):
        if env.reward.shape != world.shape:
            raise ConfigurationError("environment does not cover the world")
        self.config = config
        self.env = env
        self.world = world
        self.method = method
        self.rng = np.random.default_rng(config.seed)
        self.coords = world.coords
        self.s0 = world.mask(config.initial_safe_set)
        self.s = world.index(config.start_state)
        self.t = 0
        self.gp_r = GaussianProcess(config.kernel_reward, config.noise_variance_reward)
        self.gp_g = GaussianProcess(config.kernel_safety, config.noise_variance_safety)
        self.learn_safety = True
        self.iv = SafetyIntervals.initial_for(world, self.s0, config.threshold)
        self.ss = SafeSetState.initial_for(self.s0)
        self.belief_g = None
        self.phase = EXPLORE
        self.admissible = None
        self.t_transition = None
        self.records = []
        self.rewards = []
        self.trace = [] if record_trace else None

    # -- sensing and moving ----------------------------------------------

    def sense(self):
        obs = observe(self.env, self.world, self.world.state(self.s), self.rng)
        X = self.coords[[self.world.index(o.state) for o in obs]]
        self.gp_r.partial_fit(X, [o.reward_sample for o in obs])
        if self.learn_safety:
            self.gp_g.partial_fit(X, [o.safety_sample for o in obs])

    def step(self, a: int):
        self.s = int(self.world.successors[self.s, a])
        self.t += 1
        self.sense()
        self._record(a)

    def _record(self, a: int):
        x, y = self.world.state(self.s)
        r = float(self.env.reward_flat[self.s])
        g = float(self.env.safety_flat[self.s])
        self.rewards.append(r)
        window = self.rewards[-AVERAGE_WINDOW:]
        G = self.ss.expanders
        self.records.append({
            "t": self.t, "x": x, "y": y, "action": ACTIONS[a], "phase": self.phase,
            "true_reward": r, "true_safety": g, "unsafe": g < self.config.threshold,
            "x_minus": int(self.ss.x_minus.sum()), "x_plus": int(self.ss.x_plus.sum()),
            "expanders": int(G.sum()),
            "max_width": float(self.ss.widths[G].max()) if G.any() else 0.0,
            "avg50": float(sum(window) / len(window)),
            "in_safe_set": bool(self.ss.x_minus[self.s]),
            "in_admissible": bool(self.admissible[self.s]) if self.phase == OPTIMIZE else None,
        })

    # -- beliefs ---------------------------------------------------------

    def _scale(self, sched: ConfidenceSchedule, gp: GaussianProcess, t: int) -> float:
        gain = None
        if sched.mode == "theoretical" and not sched.info_gain:
            gain = info_gain_estimate(gp, self.coords,
                                      budget=min(gp.n_observations, self.world.n_states))
        return sched.multiplier(t, gain)

    def refresh(self):
        """Recompute intervals, both safe sets and the expanders."""
        mean, std = self.gp_g.predict(self.coords, return_std=True)
        self.belief_g = (mean, std)
        beta = self._scale(self.config.beta, self.gp_g, self.t + 1)
        self.iv = update_intervals(self.iv, mean, std, beta)
        self.ss = synchronized_update(self.ss, self.iv, self.world, self.config.lipschitz,
                                      until_stable=True)
        if self.trace is not None:
            self.trace.append({"t": self.t, "lower": self.iv.lower.copy(),
                               "upper": self.iv.upper.copy(), "x_minus": self.ss.x_minus.copy(),
                               "x_plus": self.ss.x_plus.copy(),
                               "expanders": self.ss.expanders.copy()})

    def reward_belief(self):
        return self.gp_r.predict(self.coords, return_std=True)

    # -- phase 1 ---------------------------------------------------------

    def check_stop(self):
        """Admissible set for reward optimization if a stopping rule fires, else None."""
        cfg = self.config
        ss = self.ss
        if cfg.stop_mode in ("es2", "pes2"):
            mean_r, std_r = self.reward_belief()
            alpha = self._scale(cfg.alpha, self.gp_r, self.t + 1)
            if cfg.stop_mode == "es2":
                chk = es2_stop_check(self.world, ss.x_minus, ss.x_plus, mean_r, std_r, alpha,
                                     cfg.gamma, cfg.vi_tol, cfg.vi_max_iter)
            else:
                mean_g, std_g = self.belief_g
                chk = pes2_stop_check(self.world, ss.x_minus, ss.x_plus, mean_r, std_r,
                                      mean_g, std_g, alpha, cfg.threshold, cfg.gamma,
                                      cfg.vi_tol, cfg.vi_max_iter)
            if chk.stop:
                log.debug("%s stop at t=%d, |Y|=%d", cfg.stop_mode, self.t, chk.visited.sum())
                return chk.visited
        G = ss.expanders
        if G.any() and ss.widths[G].max() < cfg.eps_g:
            log.debug("classic stop at t=%d", self.t)
            return ss.x_minus.copy()
        return None

    def explore(self, stop: bool = True):
        """Safety exploration until a stopping rule fires or steps run out."""
        cfg = self.config
        self.sense()
        while self.t < cfg.max_steps:
            self.refresh()
            if stop:
                admissible = self.check_stop()
                if admissible is not None:
                    return admissible
            G = self.ss.expanders
            if not G.any():
                if stop:
                    return self.ss.x_minus.copy()
                self.step(STAY)
                continue
            goal = select_goal(G, self.ss.widths)
            path = shortest_safe_path(self.world, self.ss.x_minus, self.s, goal) or [STAY]
            for a in path:
                if self.t >= cfg.max_steps:
                    break
                self.step(a)
        return None

    # -- phase 2 ---------------------------------------------------------

    def optimize(self, admissible: np.ndarray):
        cfg = self.config
        self.phase = OPTIMIZE
        self.learn_safety = False
        self.admissible = np.asarray(admissible, dtype=bool)
        adm = np.flatnonzero(self.admissible)
        # A noiseless repeat reading moves the posterior only through the
        # jitter term, so the plan is kept until a new location is observed.
        static = cfg.noise_variance_reward == 0 and cfg.alpha.mode == "fixed"
        V = None
        planned_at = None
        while self.t < cfg.max_steps:
            if not (static and planned_at == self.gp_r.n_locations):
                mean_r, std_r = self.gp_r.predict(self.coords[adm], return_std=True)
                U = np.zeros(self.world.n_states)
                U[adm] = optimistic_reward(mean_r, std_r,
                                           self._scale(cfg.alpha, self.gp_r, self.t + 1))
                sol = value_iteration(MdpView.on(self.world, self.admissible, U, cfg.gamma),
                                      cfg.vi_tol, cfg.vi_max_iter, init=V)
                V = sol.value
                planned_at = self.gp_r.n_locations
            a = int(sol.policy[self.s])
            if a < 0:
                a = shortest_path_to_set(self.world, self.ss.x_minus, self.s, self.admissible)[0]
            self.step(a)

    # -- bookkeeping -----------------------------------------------------

    def to_log(self) -> TrajectoryLog:
        r = np.array(self.rewards)
        T = len(r)
        # first Phase 2 step; runs that never switch report the step count
        tt = T if self.t_transition is None else self.t_transition
        n_explore = T if self.t_transition is None else self.t_transition - 1
        disc = float(np.sum(r * self.config.gamma ** np.arange(T))) if T else 0.0
        summary = {
            "method": self.method,
            "seed": self.config.seed,
            "total_steps": T,
            "t_transition": tt,
            "transitioned": self.t_transition is not None,
            "cumulative_reward": float(r.sum()),
            "cumulative_discounted_reward": disc,
            "exploration_reward": float(r[:n_explore].sum()),
            "exploitation_reward": float(r[n_explore:].sum()),
            "final_avg50": float(r[-AVERAGE_WINDOW:].mean()) if T else 0.0,
            "unsafe_action_count": int(sum(rec["unsafe"] for rec in self.records)),
            "admissible_size": int(self.admissible.sum()) if self.admissible is not None else None,
            "oracle_reward_bound": None,
        }
        return TrajectoryLog(self.method, self.config.seed, self.config.start_state,
                             self.records, summary, self.trace)


def _abort(sim: _Simulation, exc: Exception):
    raise RunAborted(f"{sim.method} run aborted at t={sim.t}: {exc}", log=sim.to_log()) from exc


def run_sno_mdp(config: AgentConfig, env: EnvironmentTruth, world: GridWorld,
                record_trace: bool = False) -> TrajectoryLog:
    """Full stepwise run with the stopping rule named by ``config.stop_mode``."""
    sim = _Simulation(config, env, world, f"sno_mdp_{config.stop_mode}", record_trace)
    try:
        admissible = sim.explore(stop=True)
        if admissible is not None:
            sim.t_transition = sim.t + 1
            sim.optimize(admissible)
    except SnoMdpError as exc:
        _abort(sim, exc)
    return sim.to_log()


def run_safemdp_baseline(config: AgentConfig, env: EnvironmentTruth, world: GridWorld,
                         record_trace: bool = False) -> TrajectoryLog:
    """Safety exploration for the whole run, ignoring reward."""
    sim = _Simulation(config, env, world, "safemdp", record_trace)
    try:
        sim.explore(stop=False)
    except SnoMdpError as exc:
        _abort(sim, exc)
    return sim.to_log()


def true_safe_set(world: GridWorld, safety, threshold: float, lipschitz: float,
                  initial_safe, eps: float = 0.0) -> np.ndarray:
    """Largest set reachable from ``initial_safe`` when ``g`` itself is known.

    Iterates ``X <- R_safe(X) & R_reach(X) & R_ret(R_safe(X), X)`` to its fixed
    point, where ``R_safe(X)`` adds every state the Lipschitz bound certifies
    from ``X`` with margin ``eps``.
    """
    g = np.asarray(safety, dtype=float).ravel()
    X = np.asarray(initial_safe, dtype=bool).copy()
    D = world.distances
    while True:
        idx = np.flatnonzero(X)
        pen = np.where(D[idx] == 0, 0.0, lipschitz * D[idx])
        certified = X | np.any(g[idx, None] - eps - pen >= threshold, axis=0)
        new = certified & reachable_set(world, X) & returnable_set(world, certified, X)
        if np.array_equal(new, X):
            return X
        X = new


def run_oracle(config: AgentConfig, env: EnvironmentTruth, world: GridWorld) -> TrajectoryLog:
    """Plan on the true reward over the true safely reachable set."""
    sim = _Simulation(config, env, world, "oracle")
    safe = true_safe_set(world, env.safety, config.threshold, config.lipschitz, sim.s0)
    sim.ss = SafeSetState(safe, safe, safe, safe, np.zeros_like(safe), np.zeros(world.n_states))
    sim.t_transition = 1
    sim.phase = OPTIMIZE
    sim.admissible = safe
    try:
        sol = value_iteration(MdpView.on(world, safe, env.reward_flat, config.gamma),
                              config.vi_tol, config.vi_max_iter)
        while sim.t < config.max_steps:
            a = int(sol.policy[sim.s])
            sim.s = int(world.successors[sim.s, a])
            sim.t += 1
            sim._record(a)
    except SnoMdpError as exc:
        _abort(sim, exc)
    out = sim.to_log()
    out.summary["oracle_reward_bound"] = float(env.reward_flat[safe].max())
    return out


def config_for_method(config: AgentConfig, method: str) -> AgentConfig:
    if method.startswith("sno_mdp_"):
        return replace(config, stop_mode=method[len("sno_mdp_"):])
    return config


def run_method(method: str, config: AgentConfig, env: EnvironmentTruth, world: GridWorld,
               record_trace: bool = False) -> TrajectoryLog:
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    if method == "oracle":
        return run_oracle(config, env, world)
    if method == "safemdp":
        return run_safemdp_baseline(config, env, world, record_trace)
    return run_sno_mdp(config_for_method(config, method), env, world, record_trace)

"""Experiment specifications: parsing, defaults, validation and world building.

A spec is a YAML document with four blocks::

    environment:   # synthetic GP world or elevation raster
    agent:         # AgentConfig fields (``auto`` allowed for lipschitz / start)
    runs:          # seeds
    methods:       # subset of METHODS
    output:        # directory, snapshots

``resolve_spec`` fills every default and returns a plain nested dict. Feeding
``dump_spec(resolved)`` back through ``resolve_spec`` gives the same dict,
which is what ``snomdp validate`` prints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Tuple

import numpy as np
import yaml

from .agent import METHODS, AgentConfig
from .exceptions import ConfigurationError, ParseError
from .gp import ConfidenceSchedule, Kernel
from .gridworld import (EnvironmentTruth, GridWorld, elevation_environment,
                        ingest_elevation_grid, sample_gp_environment, true_lipschitz)

ELEVATION_FORMATS = ("csv", "esri_ascii")

DEFAULTS = {
    "environment": {
        "kind": "synthetic",
        "width": 20,
        "height": 20,
        "cell_size": 1.0,
        "world_seed": None,
        "r_max": 1.0,
        "noise_reward": 0.0,
        "noise_safety": 0.0,
        "kernel_reward": {"family": "rbf", "lengthscale": 2.0, "prior_variance": 1.0},
        "kernel_safety": {"family": "rbf", "lengthscale": 2.0, "prior_variance": 1.0},
    },
    "agent": {
        "threshold": -1.0,
        "lipschitz": "auto",
        "gamma": 0.99,
        "eps_g": 0.1,
        "alpha": {"mode": "fixed", "value": 3.0},
        "beta": {"mode": "fixed", "value": 2.0},
        "initial_safe_set": "auto",
        "start_state": "auto",
        "max_steps": 2000,
        "vi_tol": 1e-6,
        "vi_max_iter": 10000,
    },
    "runs": {"seeds": [0]},
    "methods": list(METHODS),
    "output": {"directory": "results", "snapshots": False},
}

SCHEDULE_DEFAULTS = {"mode": "fixed", "value": 2.0, "rkhs_bound": 1.0, "noise_scale": 1.0,
                     "failure_probability": 0.05, "info_gain": [], "scale_is_squared": False}

_ENV_KEYS = {
    "synthetic": {"kind", "width", "height", "cell_size", "world_seed", "r_max",
                  "noise_reward", "noise_safety", "kernel_reward", "kernel_safety"},
    "elevation": {"kind", "file", "format", "cell_size", "world_seed", "r_max",
                  "noise_reward", "noise_safety", "kernel_reward", "kernel_safety"},
}


def _fail(field_name: str, message: str):
    raise ConfigurationError(f"{field_name}: {message}")


def _check_keys(block: dict, allowed, where: str):
    if not isinstance(block, dict):
        _fail(where, "expected a mapping")
    extra = sorted(set(block) - set(allowed))
    if extra:
        _fail(f"{where}.{extra[0]}", "unknown field")


def _number(value, where: str, *, integer=False, positive=False, nonnegative=False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(where, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        _fail(where, "expected an integer")
    if not math.isfinite(value):
        _fail(where, "must be finite")
    if positive and not value > 0:
        _fail(where, "must be positive")
    if nonnegative and value < 0:
        _fail(where, "must be nonnegative")
    return int(value) if integer else float(value)


def _state(value, where: str) -> list:
    if not (isinstance(value, (list, tuple)) and len(value) == 2):
        _fail(where, "a state is a two-element list [x, y]")
    return [_number(v, where, integer=True, nonnegative=True) for v in value]


def _kernel(raw, where: str) -> dict:
    base = {"family": "rbf", "lengthscale": 1.0, "prior_variance": 1.0}
    _check_keys(raw, base, where)
    out = {**base, **raw}
    out["lengthscale"] = _number(out["lengthscale"], f"{where}.lengthscale", positive=True)
    out["prior_variance"] = _number(out["prior_variance"], f"{where}.prior_variance",
                                    positive=True)
    try:
        Kernel(**out)
    except ConfigurationError as exc:
        _fail(where, str(exc))
    return out


def _schedule(raw, where: str, default_value: float) -> dict:
    _check_keys(raw, SCHEDULE_DEFAULTS, where)
    out = {**SCHEDULE_DEFAULTS, "value": default_value, **raw}
    out["value"] = _number(out["value"], f"{where}.value", positive=True)
    out["rkhs_bound"] = _number(out["rkhs_bound"], f"{where}.rkhs_bound", nonnegative=True)
    out["noise_scale"] = _number(out["noise_scale"], f"{where}.noise_scale", nonnegative=True)
    out["failure_probability"] = _number(out["failure_probability"],
                                         f"{where}.failure_probability")
    out["info_gain"] = [_number(g, f"{where}.info_gain", nonnegative=True)
                        for g in out["info_gain"] or []]
    out["scale_is_squared"] = bool(out["scale_is_squared"])
    if out["mode"] not in ("fixed", "theoretical"):
        _fail(f"{where}.mode", "must be 'fixed' or 'theoretical'")
    if out["mode"] == "theoretical" and not 0 < out["failure_probability"] < 1:
        _fail(f"{where}.failure_probability", "must lie in (0, 1)")
    return out


def schedule_from(d: dict) -> ConfidenceSchedule:
    return ConfidenceSchedule(mode=d["mode"], fixed_value=d["value"],
                              rkhs_bound=d["rkhs_bound"], noise_scale=d["noise_scale"],
                              failure_probability=d["failure_probability"],
                              info_gain=tuple(d["info_gain"]),
                              scale_is_squared=d["scale_is_squared"])


def _resolve_environment(raw, base_dir: Path) -> dict:
    raw = dict(raw or {})
    kind = raw.get("kind", "synthetic")
    if kind not in _ENV_KEYS:
        _fail("environment.kind", "must be 'synthetic' or 'elevation'")
    _check_keys(raw, _ENV_KEYS[kind], "environment")
    d = DEFAULTS["environment"]
    env = {"kind": kind}
    if kind == "synthetic":
        env["width"] = _number(raw.get("width", d["width"]), "environment.width",
                               integer=True, positive=True)
        env["height"] = _number(raw.get("height", d["height"]), "environment.height",
                                integer=True, positive=True)
        env["cell_size"] = _number(raw.get("cell_size", d["cell_size"]),
                                   "environment.cell_size", positive=True)
    else:
        if "file" not in raw:
            _fail("environment.file", "required for elevation worlds")
        path = Path(str(raw["file"]))
        if not path.is_absolute():
            path = (base_dir / path).resolve()
        env["file"] = str(path)
        fmt = raw.get("format", "esri_ascii")
        if fmt not in ELEVATION_FORMATS:
            _fail("environment.format", f"must be one of {', '.join(ELEVATION_FORMATS)}")
        env["format"] = fmt
        cs = raw.get("cell_size")
        if cs is None:
            _fail("environment.cell_size", "required for elevation worlds")
        env["cell_size"] = _number(cs, "environment.cell_size", positive=True)
        if not path.is_file():
            _fail("environment.file", f"no such file: {path}")
        try:
            _load_elevation(env["file"], fmt, env["cell_size"])
        except (ParseError, ValueError) as exc:
            _fail("environment.file", str(exc))
    ws = raw.get("world_seed", d["world_seed"])
    env["world_seed"] = None if ws is None else _number(ws, "environment.world_seed",
                                                        integer=True)
    env["r_max"] = _number(raw.get("r_max", d["r_max"]), "environment.r_max", positive=True)
    for key in ("noise_reward", "noise_safety"):
        env[key] = _number(raw.get(key, d[key]), f"environment.{key}", nonnegative=True)
    for key in ("kernel_reward", "kernel_safety"):
        env[key] = _kernel(raw.get(key, d[key]), f"environment.{key}")
    return env


def _resolve_agent(raw) -> dict:
    raw = dict(raw or {})
    d = DEFAULTS["agent"]
    _check_keys(raw, d, "agent")
    a = {}
    a["threshold"] = _number(raw.get("threshold", d["threshold"]), "agent.threshold")
    L = raw.get("lipschitz", d["lipschitz"])
    a["lipschitz"] = "auto" if L == "auto" else _number(L, "agent.lipschitz", nonnegative=True)
    g = _number(raw.get("gamma", d["gamma"]), "agent.gamma")
    if not g < 1:
        _fail("agent.gamma", "discount must be < 1")
    if g < 0:
        _fail("agent.gamma", "discount must be >= 0")
    a["gamma"] = g
    a["eps_g"] = _number(raw.get("eps_g", d["eps_g"]), "agent.eps_g", positive=True)
    a["alpha"] = _schedule(raw.get("alpha", d["alpha"]), "agent.alpha", 3.0)
    a["beta"] = _schedule(raw.get("beta", d["beta"]), "agent.beta", 2.0)
    s0 = raw.get("initial_safe_set", d["initial_safe_set"])
    if s0 != "auto":
        if not isinstance(s0, (list, tuple)) or not s0:
            _fail("agent.initial_safe_set", "must be 'auto' or a nonempty list of states")
        s0 = [_state(s, "agent.initial_safe_set") for s in s0]
    a["initial_safe_set"] = s0
    start = raw.get("start_state", d["start_state"])
    a["start_state"] = start if start == "auto" else _state(start, "agent.start_state")
    if s0 != "auto" and a["start_state"] != "auto" and a["start_state"] not in s0:
        _fail("agent.start_state", "must belong to the initial safe set")
    a["max_steps"] = _number(raw.get("max_steps", d["max_steps"]), "agent.max_steps",
                             integer=True, positive=True)
    a["vi_tol"] = _number(raw.get("vi_tol", d["vi_tol"]), "agent.vi_tol", positive=True)
    a["vi_max_iter"] = _number(raw.get("vi_max_iter", d["vi_max_iter"]), "agent.vi_max_iter",
                               integer=True, positive=True)
    return a


def resolve_spec(raw: dict, base_dir=".") -> dict:
    """Validate a parsed spec and fill defaults. Raises ConfigurationError."""
    if raw is None:
        raw = {}
    _check_keys(raw, DEFAULTS, "spec")
    base_dir = Path(base_dir)
    out = {"environment": _resolve_environment(raw.get("environment"), base_dir),
           "agent": _resolve_agent(raw.get("agent"))}
    runs = raw.get("runs", DEFAULTS["runs"])
    _check_keys(runs, DEFAULTS["runs"], "runs")
    seeds = runs.get("seeds", DEFAULTS["runs"]["seeds"])
    if not isinstance(seeds, list) or not seeds:
        _fail("runs.seeds", "must be a nonempty list of integers")
    seeds = [_number(s, "runs.seeds", integer=True) for s in seeds]
    if len(set(seeds)) != len(seeds):
        _fail("runs.seeds", "duplicate seed")
    out["runs"] = {"seeds": seeds}
    methods = raw.get("methods", DEFAULTS["methods"])
    if not isinstance(methods, list) or not methods:
        _fail("methods", "must be a nonempty list")
    for m in methods:
        if m not in METHODS:
            _fail("methods", f"unknown method {m!r}")
    if len(set(methods)) != len(methods):
        _fail("methods", "duplicate method")
    out["methods"] = list(methods)
    output = raw.get("output", DEFAULTS["output"])
    _check_keys(output, DEFAULTS["output"], "output")
    directory = Path(str(output.get("directory", DEFAULTS["output"]["directory"])))
    if not directory.is_absolute():
        directory = (base_dir / directory).resolve()
    out["output"] = {"directory": str(directory),
                     "snapshots": bool(output.get("snapshots", False))}
    _check_agent_against_world(out)
    return out


def _check_agent_against_world(spec: dict):
    env, agent = spec["environment"], spec["agent"]
    if env["kind"] == "synthetic":
        w, h = env["width"], env["height"]
    else:
        elev = _load_elevation(env["file"], env["format"], env["cell_size"])
        w, h = elev.ncols, elev.nrows
    states = [] if agent["initial_safe_set"] == "auto" else list(agent["initial_safe_set"])
    if agent["start_state"] != "auto":
        states.append(agent["start_state"])
    for x, y in states:
        if not (x < w and y < h):
            _fail("agent.initial_safe_set", f"state {[x, y]} lies outside the {w}x{h} grid")


def load_spec(path) -> dict:
    """Read and resolve a spec file; relative paths are taken from its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"spec: no such file: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"spec: {path}: not valid YAML ({exc})") from None
    return resolve_spec(raw, path.parent)


def dump_spec(spec: dict) -> str:
    return yaml.safe_dump(spec, sort_keys=False, default_flow_style=None)


# --------------------------------------------------------------------------
# worlds and agent configs
# --------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _load_elevation(path: str, fmt: str, cell_size: float):
    with open(path, "rb") as fh:
        try:
            return ingest_elevation_grid(fh, fmt, cell_size)
        except ParseError as exc:
            raise ParseError(exc.message, exc.row, exc.column, path) from None


@dataclass
class Instance:
    world: GridWorld
    env: EnvironmentTruth
    config: AgentConfig


def build_world(spec: dict, seed: int) -> Tuple[GridWorld, EnvironmentTruth]:
    env = spec["environment"]
    world_seed = seed if env["world_seed"] is None else env["world_seed"]
    kr = Kernel(**env["kernel_reward"])
    if env["kind"] == "synthetic":
        world = GridWorld(env["width"], env["height"], env["cell_size"])
        truth = sample_gp_environment(world, kr, Kernel(**env["kernel_safety"]), world_seed,
                                      env["r_max"], env["noise_reward"], env["noise_safety"])
        return world, truth
    elev = _load_elevation(env["file"], env["format"], env["cell_size"])
    return elevation_environment(elev, kr, world_seed, env["r_max"], env["noise_reward"],
                                 env["noise_safety"])


def build_instance(spec: dict, seed: int) -> Instance:
    """World, ground truth and agent config for one run seed."""
    world, truth = build_world(spec, seed)
    a = spec["agent"]
    env = spec["environment"]
    g = truth.safety_flat
    if a["initial_safe_set"] == "auto":
        if a["start_state"] == "auto":
            start = world.state(int(np.argmax(g)))
        else:
            start = tuple(a["start_state"])
        s0 = (start,)
    else:
        s0 = tuple(tuple(s) for s in a["initial_safe_set"])
        if a["start_state"] == "auto":
            start = max(s0, key=lambda s: (g[world.index(s)], [-c for c in s]))
        else:
            start = tuple(a["start_state"])
    unsafe = [s for s in s0 if g[world.index(s)] < a["threshold"]]
    if unsafe:
        _fail("agent.initial_safe_set", f"state {list(unsafe[0])} is not safe in world seed "
                                        f"{seed}")
    L = true_lipschitz(world, truth.safety) if a["lipschitz"] == "auto" else a["lipschitz"]
    config = AgentConfig(
        threshold=a["threshold"], lipschitz=L, initial_safe_set=s0, start_state=start,
        gamma=a["gamma"], eps_g=a["eps_g"], alpha=schedule_from(a["alpha"]),
        beta=schedule_from(a["beta"]), max_steps=a["max_steps"], seed=seed,
        kernel_reward=Kernel(**env["kernel_reward"]),
        kernel_safety=Kernel(**env["kernel_safety"]),
        noise_variance_reward=env["noise_reward"] ** 2,
        noise_variance_safety=env["noise_safety"] ** 2,
        vi_tol=a["vi_tol"], vi_max_iter=a["vi_max_iter"])
    return Instance(world, truth, config)

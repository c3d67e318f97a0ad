"""Grid worlds, ground-truth environments and the observation channel.

States are ``(x, y)`` integer tuples. Internally every per-state array is laid
out in lexicographic ``(x, y)`` order, i.e. state ``(x, y)`` has flat index
``x * height + y``. Elevation rasters use the usual ``(row, col)`` layout and
map to states as ``x = col`` and ``y = row``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import CovarianceError, ParseError

State = Tuple[int, int]

ACTIONS: Tuple[str, ...] = ("stay", "up", "right", "down", "left")
ACTION_DELTAS: Tuple[Tuple[int, int], ...] = ((0, 0), (0, 1), (1, 0), (0, -1), (-1, 0))
STAY = 0

JITTER_START = 1e-10
JITTER_MAX = 1e-6


@dataclass(eq=False)
class GridWorld:
    """Finite grid with the five-action deterministic transition function.

    Actions that would leave the grid leave the state unchanged.
    """

    width: int
    height: int
    cell_size: float = 1.0

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("grid dimensions must be positive")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        self.width = int(self.width)
        self.height = int(self.height)
        self.cell_size = float(self.cell_size)
        xs, ys = np.meshgrid(np.arange(self.width), np.arange(self.height), indexing="ij")
        self._cells = np.column_stack([xs.ravel(), ys.ravel()])
        succ = np.empty((self.n_states, len(ACTIONS)), dtype=np.intp)
        for a, (dx, dy) in enumerate(ACTION_DELTAS):
            nx = np.clip(self._cells[:, 0] + dx, 0, self.width - 1)
            ny = np.clip(self._cells[:, 1] + dy, 0, self.height - 1)
            # clipping only ever happens on the axis being moved along, so
            # a clipped move lands on the current state
            succ[:, a] = nx * self.height + ny
        self._successors = succ
        self._distances = None
        self._penalty = (None, None)

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.width, self.height)

    @property
    def successors(self) -> np.ndarray:
        """``(n_states, n_actions)`` table of successor indices."""
        return self._successors

    @property
    def cells(self) -> np.ndarray:
        """Integer grid coordinates of every state, in index order."""
        return self._cells

    @property
    def coords(self) -> np.ndarray:
        """Physical coordinates (cells scaled by ``cell_size``)."""
        return self._cells * self.cell_size

    @property
    def distances(self) -> np.ndarray:
        """Euclidean distance between every pair of states, in physical units."""
        if self._distances is None:
            self._distances = cdist(self.coords, self.coords)
        return self._distances

    def lipschitz_penalty(self, L: float) -> np.ndarray:
        """``L * d(s, s')`` for every pair; the diagonal is 0 even for infinite ``L``.

        The most recent ``L`` is cached since one run uses a single constant.
        """
        if self._penalty[0] != L:
            D = self.distances
            self._penalty = (L, np.where(D == 0, 0.0, L * D))
        return self._penalty[1]

    def index(self, s: State) -> int:
        x, y = s
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ValueError(f"state {s} outside {self.width}x{self.height} grid")
        return int(x) * self.height + int(y)

    def state(self, i: int) -> State:
        return (int(i) // self.height, int(i) % self.height)

    def states(self) -> List[State]:
        return [self.state(i) for i in range(self.n_states)]

    def mask(self, states: Iterable[State]) -> np.ndarray:
        m = np.zeros(self.n_states, dtype=bool)
        for s in states:
            m[self.index(s)] = True
        return m

    def states_of(self, mask: np.ndarray) -> set:
        return {self.state(i) for i in np.flatnonzero(mask)}

    def distance(self, s: State, t: State) -> float:
        return self.cell_size * math.hypot(s[0] - t[0], s[1] - t[1])


def transition(world: GridWorld, s: State, a) -> State:
    """Deterministic successor of ``s`` under action ``a`` (name or index)."""
    if isinstance(a, str):
        a = ACTIONS.index(a)
    return world.state(world.successors[world.index(s), a])


def neighborhood(world: GridWorld, s: State) -> List[State]:
    """``s`` followed by its distinct in-grid 4-neighbours, in action order."""
    out: List[State] = []
    for i in world.successors[world.index(s)]:
        t = world.state(i)
        if t not in out:
            out.append(t)
    return out


@dataclass
class EnvironmentTruth:
    """Ground-truth reward and safety fields, both shaped ``(width, height)``."""

    reward: np.ndarray
    safety: np.ndarray
    r_max: float
    seed: int = 0
    noise_reward: float = 0.0
    noise_safety: float = 0.0

    def __post_init__(self):
        self.reward = np.asarray(self.reward, dtype=float)
        self.safety = np.asarray(self.safety, dtype=float)
        if self.reward.shape != self.safety.shape:
            raise ValueError("reward and safety fields differ in shape")
        if not np.all(np.isfinite(self.safety)):
            raise ValueError("safety field must be finite")
        if not (np.all(self.reward > 0) and np.all(self.reward <= self.r_max)):
            raise ValueError("reward must lie in (0, r_max]")

    @property
    def reward_flat(self) -> np.ndarray:
        return self.reward.ravel()

    @property
    def safety_flat(self) -> np.ndarray:
        return self.safety.ravel()


@dataclass(frozen=True)
class Observation:
    state: State
    reward_sample: float
    safety_sample: float


def _cholesky_with_jitter(K: np.ndarray) -> np.ndarray:
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K)))
        except np.linalg.LinAlgError:
            jitter *= 10
    raise CovarianceError("kernel matrix is not positive definite on the grid")


def rescale_reward(draw: np.ndarray, r_max: float) -> np.ndarray:
    """Map ``draw`` affinely so its minimum is ``0.01 r_max`` and maximum ``r_max``."""
    lo, hi = float(draw.min()), float(draw.max())
    if hi - lo <= 0:
        return np.full_like(draw, r_max, dtype=float)
    scaled = 0.01 * r_max + (draw - lo) / (hi - lo) * 0.99 * r_max
    return np.minimum(scaled, r_max)


def draw_gp_field(world: GridWorld, kernel, rng: np.random.Generator) -> np.ndarray:
    """One exact zero-mean GP draw over every grid state, shaped ``(width, height)``."""
    K = kernel(world.coords)
    chol = _cholesky_with_jitter(K)
    return (chol @ rng.standard_normal(world.n_states)).reshape(world.shape)


def sample_gp_environment(world: GridWorld, kernel_r, kernel_g, seed: int,
                          r_max: float = 1.0, noise_reward: float = 0.0,
                          noise_safety: float = 0.0) -> EnvironmentTruth:
    """Draw reward and safety fields from their GP priors.

    The safety field is drawn first, then the reward field, from a single
    generator seeded with ``seed``. The reward draw is rescaled into
    ``(0, r_max]``.
    """
    if not r_max > 0:
        raise ValueError("r_max must be positive")
    rng = np.random.default_rng(seed)
    safety = draw_gp_field(world, kernel_g, rng)
    reward = rescale_reward(draw_gp_field(world, kernel_r, rng), r_max)
    return EnvironmentTruth(reward=reward, safety=safety, r_max=r_max, seed=seed,
                            noise_reward=noise_reward, noise_safety=noise_safety)


def observe(env: EnvironmentTruth, world: GridWorld, s: State,
            rng: np.random.Generator) -> List[Observation]:
    """Noisy reward and safety readings at ``s`` and its 4-neighbours."""
    out = []
    for t in neighborhood(world, s):
        nr = rng.normal(0.0, env.noise_reward)
        ng = rng.normal(0.0, env.noise_safety)
        out.append(Observation(t, float(env.reward[t] + nr), float(env.safety[t] + ng)))
    return out


def true_lipschitz(world: GridWorld, field_: np.ndarray) -> float:
    """Smallest L with ``|f(s) - f(s')| <= L d(s, s')`` over all state pairs."""
    f = np.asarray(field_, dtype=float).ravel()
    if world.n_states < 2:
        return 0.0
    D = world.distances
    diff = np.abs(f[:, None] - f[None, :])
    off = D > 0
    return float(np.max(diff[off] / D[off]))


# --------------------------------------------------------------------------
# elevation grids
# --------------------------------------------------------------------------

@dataclass
class ElevationField:
    """Elevation raster ``values[row, col]`` in metres."""

    values: np.ndarray
    cell_size: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ValueError("elevation grid must be a non-empty 2-D array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("elevation grid has missing cells")

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    def world(self) -> GridWorld:
        return GridWorld(self.ncols, self.nrows, self.cell_size)


def _number(token: str, row: int, col: int) -> float:
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"non-numeric cell {token!r}", row=row, column=col) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite cell {token!r}", row=row, column=col)
    return v


def _read_csv(text: str, cell_size) -> ElevationField:
    if cell_size is None:
        raise ParseError("CSV elevation grids need an explicit cell size")
    rows: List[List[float]] = []
    reader = csv.reader(io.StringIO(text))
    for r, raw in enumerate(reader, start=1):
        if not raw or all(not c.strip() for c in raw):
            continue
        vals = [_number(c.strip(), r, c_i) for c_i, c in enumerate(raw, start=1)]
        if rows and len(vals) != len(rows[0]):
            raise ParseError(f"row has {len(vals)} cells, expected {len(rows[0])}",
                             row=len(rows) + 1)
        rows.append(vals)
    if not rows:
        raise ParseError("empty elevation grid")
    return ElevationField(np.array(rows), float(cell_size))


_ESRI_REQUIRED = ("ncols", "nrows", "cellsize")
_ESRI_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
              "cellsize", "nodata_value")


def _read_esri(text: str, cell_size) -> ElevationField:
    lines = text.splitlines()
    header = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key not in _ESRI_KEYS:
            break
        if len(parts) != 2:
            raise ParseError(f"malformed header line {lines[i]!r}", row=i + 1)
        header[key] = parts[1]
        i += 1
    for key in _ESRI_REQUIRED:
        if key not in header:
            raise ParseError(f"missing header field {key!r}")
    try:
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        cs = float(header["cellsize"])
    except ValueError:
        raise ParseError("non-numeric header value") from None
    if ncols < 1 or nrows < 1 or not cs > 0:
        raise ParseError("header dimensions must be positive")
    if cell_size is not None and not math.isclose(float(cell_size), cs):
        raise ParseError(f"configured cell size {cell_size} disagrees with header {cs}")
    nodata = header.get("nodata_value")
    nodata = float(nodata) if nodata is not None else None
    tokens = []
    for line in lines[i:]:
        tokens.extend(line.split())
    if len(tokens) != ncols * nrows:
        raise ParseError(f"expected {ncols * nrows} values, found {len(tokens)}")
    values = np.empty((nrows, ncols))
    for k, tok in enumerate(tokens):
        r, c = divmod(k, ncols)
        v = _number(tok, r + 1, c + 1)
        if nodata is not None and v == nodata:
            raise ParseError("NODATA cell", row=r + 1, column=c + 1)
        values[r, c] = v
    return ElevationField(values, cs)


def ingest_elevation_grid(source, format: str = "csv", cell_size=None) -> ElevationField:
    """Parse an elevation grid from bytes, text or a binary/text stream.

    Parameters
    ----------
    source : bytes, str or file-like
        Raw file contents.
    format : {"csv", "esri_ascii"}
    cell_size : float, optional
        Required for CSV input; for ESRI grids it must agree with the header.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if format == "csv":
        return _read_csv(source, cell_size)
    if format == "esri_ascii":
        return _read_esri(source, cell_size)
    raise ValueError(f"unknown elevation format {format!r}")


def write_esri_ascii(elev: ElevationField, nodata: float = -9999.0) -> str:
    out = [f"ncols {elev.ncols}", f"nrows {elev.nrows}", "xllcorner 0.0",
           "yllcorner 0.0", f"cellsize {elev.cell_size!r}", f"NODATA_value {nodata!r}"]
    for row in elev.values:
        out.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def slope_safety_from_elevation(elev: ElevationField) -> np.ndarray:
    """Negated steepest rise-over-run to any 4-neighbour, shaped ``(nrows, ncols)``.

    With ``h = -tan(25 deg)`` the constraint ``g >= h`` forbids slopes above 25 degrees.
    """
    z = elev.values
    if min(z.shape) < 2:
        raise ValueError("elevation grid must be at least 2x2")
    worst = np.zeros_like(z)
    dv = np.abs(np.diff(z, axis=0))
    dh = np.abs(np.diff(z, axis=1))
    worst[1:, :] = np.maximum(worst[1:, :], dv)
    worst[:-1, :] = np.maximum(worst[:-1, :], dv)
    worst[:, 1:] = np.maximum(worst[:, 1:], dh)
    worst[:, :-1] = np.maximum(worst[:, :-1], dh)
    return -worst / elev.cell_size


def elevation_environment(elev: ElevationField, kernel_r, seed: int, r_max: float = 1.0,
                          noise_reward: float = 0.0, noise_safety: float = 0.0
                          ) -> Tuple[GridWorld, EnvironmentTruth]:
    """Grid world whose safety is the slope field and whose reward is a GP draw."""
    world = elev.world()
    safety = slope_safety_from_elevation(elev).T
    rng = np.random.default_rng(seed)
    reward = rescale_reward(draw_gp_field(world, kernel_r, rng), r_max)
    env = EnvironmentTruth(reward=reward, safety=safety, r_max=r_max, seed=seed,
                           noise_reward=noise_reward, noise_safety=noise_safety)
    return world, env


def environment_records(env: EnvironmentTruth, world: GridWorld):
    """Rows ``(x, y, reward, safety)`` in state-index order."""
    for i, (x, y) in enumerate(world.cells):
        yield int(x), int(y), float(env.reward_flat[i]), float(env.safety_flat[i])


def write_environment_csv(env: EnvironmentTruth, world: GridWorld, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["x", "y", "reward", "safety"])
    for x, y, r, g in environment_records(env, world):
        w.writerow([x, y, repr(r), repr(g)])

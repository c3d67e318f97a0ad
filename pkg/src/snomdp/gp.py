"""Exact Gaussian-process beliefs over grid states.

:class:`GaussianProcess` follows the scikit-learn estimator protocol
(``fit``/``partial_fit``/``predict`` and ``get_params``), so it can be cloned
and inspected like any other regressor. Inputs are physical coordinates.

Repeated observations at one location are kept in the archive but are folded
into a single sufficient statistic before factorizing: ``n`` readings with
noise variance ``s2`` carry exactly the information of their mean observed
with noise variance ``s2 / n``. The factorized system therefore has one row
per *distinct* location, which keeps long runs with thousands of readings
cheap without changing the posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array

from .exceptions import ConfigurationError, CovarianceError

NOISELESS_JITTER = 1e-10
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

KERNEL_FAMILIES = ("rbf", "matern52")


@dataclass(frozen=True)
class Kernel:
    """Stationary covariance function on physical coordinates."""

    family: str = "rbf"
    lengthscale: float = 1.0
    prior_variance: float = 1.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.family!r}")
        if not (self.lengthscale > 0 and self.prior_variance > 0):
            raise ConfigurationError("kernel lengthscale and prior variance must be positive")

    def of_distance(self, d):
        d = np.asarray(d, dtype=float)
        r = d / self.lengthscale
        if self.family == "rbf":
            return self.prior_variance * np.exp(-0.5 * r * r)
        s5 = math.sqrt(5.0) * r
        return self.prior_variance * (1.0 + s5 + 5.0 * r * r / 3.0) * np.exp(-s5)

    def __call__(self, A, B=None) -> np.ndarray:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = A if B is None else np.atleast_2d(np.asarray(B, dtype=float))
        return self.of_distance(cdist(A, B))

    def to_dict(self) -> dict:
        return {"family": self.family, "lengthscale": float(self.lengthscale),
                "prior_variance": float(self.prior_variance)}


def kernel_eval(k: Kernel, s, t) -> float:
    """Covariance between two points given as physical coordinate vectors."""
    d = math.dist(np.ravel(s).tolist(), np.ravel(t).tolist())
    return float(k.of_distance(d))


class GaussianProcess(RegressorMixin, BaseEstimator):
    """Zero-mean GP regressor with a fixed kernel and Gaussian noise.

    Parameters
    ----------
    kernel : Kernel
        Prior covariance. Defaults to a unit RBF.
    noise_variance : float
        Observation noise variance. ``0`` means noiseless; a jitter of
        ``1e-10`` is then added to every observation.
    """

    def __init__(self, kernel=None, noise_variance=0.0):
        self.kernel = kernel
        self.noise_variance = noise_variance

    # -- fitting --------------------------------------------------------

    def _kernel(self) -> Kernel:
        return self.kernel if self.kernel is not None else Kernel()

    def fit(self, X, y):
        for attr in ("X_obs_", "y_obs_"):
            if hasattr(self, attr):
                delattr(self, attr)
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        """Append observations to the archive."""
        if self.noise_variance < 0:
            raise ConfigurationError("noise_variance must be nonnegative")
        X = check_array(X, ensure_min_samples=0)
        y = np.asarray(y, dtype=float).ravel()
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        if not hasattr(self, "X_obs_"):
            self.X_obs_ = np.empty((0, X.shape[1]))
            self.y_obs_ = np.empty(0)
            self._reset_stats()
        self.X_obs_ = np.vstack([self.X_obs_, X])
        self.y_obs_ = np.concatenate([self.y_obs_, y])
        for x, v in zip(map(tuple, X), y):
            j = self._slot.get(x)
            if j is None:
                j = self._slot[x] = len(self._points)
                self._points.append(x)
                self._counts.append(0)
                self._sums.append(0.0)
            self._counts[j] += 1
            self._sums[j] += v
        self._factor = None
        return self

    def _reset_stats(self):
        self._slot = {}
        self._points = []
        self._counts = []
        self._sums = []
        self._factor = None

    @property
    def n_observations(self) -> int:
        return len(self.y_obs_) if hasattr(self, "y_obs_") else 0

    @property
    def n_locations(self) -> int:
        """Number of distinct observed locations."""
        return len(self._points) if hasattr(self, "_points") else 0

    def _factorize(self):
        if self._factor is not None:
            return self._factor
        P = np.array(self._points, dtype=float)
        n = np.array(self._counts, dtype=float)
        ybar = np.array(self._sums) / n
        base = self.noise_variance if self.noise_variance > 0 else NOISELESS_JITTER
        K = self._kernel()(P)
        K[np.diag_indices_from(K)] += base / n
        for extra in (0.0,) + JITTER_LADDER:
            try:
                chol = np.linalg.cholesky(K + extra * np.eye(len(K)) if extra else K)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise CovarianceError("observation covariance is ill-conditioned")
        alpha = cho_solve((chol, True), ybar)
        self._factor = (P, chol, alpha)
        return self._factor

    # -- prediction -----------------------------------------------------

    def predict(self, X, return_std=False):
        X = check_array(X)
        k = self._kernel()
        if self.n_observations == 0:
            mean = np.zeros(len(X))
            std = np.full(len(X), math.sqrt(k.prior_variance))
            return (mean, std) if return_std else mean
        P, chol, alpha = self._factorize()
        Ks = k(P, X)
        mean = Ks.T @ alpha
        if not return_std:
            return mean
        v = solve_triangular(chol, Ks, lower=True)
        var = k.prior_variance - np.einsum("ij,ij->j", v, v)
        return mean, np.sqrt(np.maximum(var, 0.0))


GpModel = GaussianProcess


def add_observation(gp: GaussianProcess, s, y: float) -> GaussianProcess:
    """Append one observation ``y`` at coordinate ``s`` (mutates and returns ``gp``)."""
    return gp.partial_fit(np.atleast_2d(np.asarray(s, dtype=float)), [y])


def posterior(gp: GaussianProcess, states):
    """Posterior ``(mean, std)`` arrays at the given coordinates."""
    return gp.predict(np.atleast_2d(np.asarray(states, dtype=float)), return_std=True)


# --------------------------------------------------------------------------
# confidence schedules
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfidenceSchedule:
    """Confidence scaling ``beta_t`` (safety) or ``alpha_t`` (reward).

    In ``fixed`` mode every call returns ``fixed_value``. In ``theoretical``
    mode the value is ``B + sigma * sqrt(2 (Gamma_{t-1} + 1 + log(1/Delta)))``
    with ``Gamma`` read from ``info_gain`` (index ``t - 1``; the last entry is
    reused past the end, an empty sequence means zero).

    ``scale_is_squared`` controls how the value multiplies a posterior
    standard deviation: by default the value *is* the multiplier; when set,
    the multiplier is its square root.
    """

    mode: str = "fixed"
    fixed_value: float = 2.0
    rkhs_bound: float = 1.0
    noise_scale: float = 1.0
    failure_probability: float = 0.05
    info_gain: Sequence[float] = field(default_factory=tuple)
    scale_is_squared: bool = False

    def __post_init__(self):
        if self.mode not in ("fixed", "theoretical"):
            raise ConfigurationError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "fixed" and not self.fixed_value > 0:
            raise ConfigurationError("fixed confidence value must be positive")
        if self.mode == "theoretical":
            _check_delta(self.failure_probability)
        object.__setattr__(self, "info_gain", tuple(float(g) for g in self.info_gain))

    def multiplier(self, t: int, info_gain=None) -> float:
        value = confidence_scale(self, t, info_gain)
        return math.sqrt(value) if self.scale_is_squared else value


def _check_delta(delta):
    if not 0 < delta < 1:
        raise ConfigurationError("failure probability must lie in (0, 1)")


def confidence_scale(sched: ConfidenceSchedule, t: int, info_gain=None) -> float:
    """``beta_t`` / ``alpha_t`` for step ``t >= 1``.

    ``info_gain`` overrides ``Gamma_{t-1}`` in theoretical mode.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if sched.mode == "fixed":
        return float(sched.fixed_value)
    _check_delta(sched.failure_probability)
    if info_gain is None:
        seq = sched.info_gain
        info_gain = seq[min(t - 1, len(seq) - 1)] if seq else 0.0
    return sched.rkhs_bound + sched.noise_scale * math.sqrt(
        2.0 * (info_gain + 1.0 + math.log(1.0 / sched.failure_probability)))


def info_gain_estimate(gp: GaussianProcess, candidate_states, budget=None) -> float:
    """Greedy lower estimate of the maximal information gain.

    Starting from the prior, repeatedly pick the candidate with the largest
    posterior variance (conditioned on earlier picks) and accumulate
    ``0.5 * log(1 + var / noise)``. Picks are without replacement; ``budget``
    defaults to the number of candidates.
    """
    noise = gp.noise_variance
    if not noise > 0:
        raise ConfigurationError("information gain needs a positive noise variance")
    X = np.atleast_2d(np.asarray(candidate_states, dtype=float))
    if len(candidate_states) == 0:
        return 0.0
    n = len(X)
    budget = n if budget is None else min(int(budget), n)
    cov = gp._kernel()(X)
    free = np.ones(n, dtype=bool)
    total = 0.0
    for _ in range(budget):
        var = np.where(free, np.diag(cov), -np.inf)
        j = int(np.argmax(var))
        vj = max(float(cov[j, j]), 0.0)
        total += 0.5 * math.log1p(vj / noise)
        c = cov[:, j].copy()
        cov = cov - np.outer(c, c) / (vj + noise)
        free[j] = False
    return total

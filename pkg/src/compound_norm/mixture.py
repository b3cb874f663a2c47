"""Running Gaussian-mixture statistics and moving-average EM.

A :class:`MixtureState` holds ``M`` diagonal Gaussians over ``D`` channels.
Every batch contributes temporary estimates (E-step responsibilities, then
weighted moments) which are blended into the running values with a momentum
factor. By default the momentum multiplies the *old* value, so ``lam=0.1``
keeps 10% of the history and takes 90% from the current batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, Rng, ShapeError, as_matrix

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
STARVATION_THRESHOLD = 1e-12


class DegeneratePriorError(ValueError):
    """All mixture priors are zero, so responsibilities are undefined."""


@dataclass
class MixtureState:
    tau: np.ndarray  # (M,)
    mu: np.ndarray  # (M, D)
    var: np.ndarray  # (M, D)
    eps: float = 1e-5
    lambda_c: float = 0.1
    lambda_s: float = 0.1
    # when set, the momentum weights the new batch value instead of the old one
    momentum_on_new: bool = False
    starvation_events: int = field(default=0, compare=False)

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=DTYPE).copy()
        self.mu = as_matrix(self.mu).copy()
        self.var = as_matrix(self.var).copy()
        m = self.tau.shape[0]
        if m < 1 or self.mu.shape[0] != m or self.var.shape != self.mu.shape:
            raise ShapeError(f"inconsistent mixture shapes tau={self.tau.shape} mu={self.mu.shape} var={self.var.shape}")

    @property
    def M(self) -> int:
        return self.tau.shape[0]

    @property
    def D(self) -> int:
        return self.mu.shape[1]

    def copy(self) -> "MixtureState":
        return MixtureState(
            self.tau, self.mu, self.var, self.eps, self.lambda_c, self.lambda_s,
            self.momentum_on_new, self.starvation_events,
        )

    def blend(self, old, new, lam: float):
        """Moving average ``lam*old + (1-lam)*new`` (roles swapped if ``momentum_on_new``)."""
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {lam}")
        if self.momentum_on_new:
            lam = 1.0 - lam
        return lam * old + (1.0 - lam) * new

    def to_dict(self) -> dict:
        return {
            "tau": self.tau.tolist(),
            "mu": self.mu.tolist(),
            "var": self.var.tolist(),
            "eps": self.eps,
            "lambda_c": self.lambda_c,
            "lambda_s": self.lambda_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureState":
        return cls(
            np.asarray(d["tau"], dtype=DTYPE),
            np.asarray(d["mu"], dtype=DTYPE),
            np.asarray(d["var"], dtype=DTYPE),
            eps=float(d["eps"]),
            lambda_c=float(d["lambda_c"]),
            lambda_s=float(d["lambda_s"]),
        )


@dataclass
class TempStats:
    """Per-batch EM estimates. ``starved[j]`` marks components whose moments were not updated."""

    tau: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    starved: np.ndarray


def init_mixture(M: int, D: int, rng: Rng | None = None, mean_jitter: float = 0.0, *,
                 eps: float = 1e-5, lambda_c: float = 0.1, lambda_s: float = 0.1,
                 momentum_on_new: bool = False) -> MixtureState:
    """Uniform priors, unit variances and (optionally jittered) zero means."""
    if M < 1 or D < 1:
        raise ValueError(f"need M >= 1 and D >= 1, got M={M}, D={D}")
    if mean_jitter < 0:
        raise ValueError("mean_jitter must be non-negative")
    tau = np.full(M, 1.0 / M)
    var = np.ones((M, D))
    if mean_jitter > 0:
        if rng is None:
            raise ValueError("a random stream is required when mean_jitter > 0")
        mu = rng.uniform(-mean_jitter, mean_jitter, size=(M, D))
    else:
        mu = np.zeros((M, D))
    return MixtureState(tau, mu, var, eps, lambda_c, lambda_s, momentum_on_new)


def log_pdf(x, mu, var, eps: float) -> float:
    """Log density of a diagonal Gaussian with variances floored by ``eps``.

    The normalizing constant uses the feature dimension D.
    """
    x = np.asarray(x, dtype=DTYPE)
    mu = np.asarray(mu, dtype=DTYPE)
    var = np.asarray(var, dtype=DTYPE)
    if not (x.shape == mu.shape == var.shape):
        raise ShapeError(f"log_pdf: shapes differ x={x.shape} mu={mu.shape} var={var.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
        raise ValueError("log_pdf: non-finite input")
    v = var + eps
    if np.any(v <= 0):
        raise ValueError("log_pdf: variance plus eps must be positive")
    diff = x - mu
    return float(-0.5 * np.sum(diff * diff / v + np.log(v) + LOG_2PI))


def log_densities(x, state: MixtureState) -> np.ndarray:
    """``N x M`` matrix of per-point, per-component log densities."""
    x = as_matrix(x)
    if x.shape[0] != state.D:
        raise ShapeError(f"batch has {x.shape[0]} channels, mixture expects {state.D}")
    if not np.all(np.isfinite(x)):
        raise ValueError("log_densities: non-finite input")
    v = state.var + state.eps  # (M, D)
    diff = x.T[:, None, :] - state.mu[None, :, :]  # (N, M, D)
    quad = np.sum(diff * diff / v[None], axis=2)
    log_norm = np.sum(np.log(v), axis=1) + state.D * LOG_2PI
    return -0.5 * (quad + log_norm[None, :])


def responsibilities(x, state: MixtureState) -> np.ndarray:
    """Posterior component probabilities ``w`` (``N x M``), rows summing to one."""
    if np.all(state.tau <= 0):
        raise DegeneratePriorError("all mixture priors are zero")
    with np.errstate(divide="ignore"):
        log_tau = np.log(state.tau)
    logits = log_densities(x, state) + log_tau[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w


def em_temporary_stats(x, w) -> TempStats:
    """Weighted priors, means and biased variances for one batch."""
    x = as_matrix(x)
    w = as_matrix(w)
    n = x.shape[1]
    if w.shape[0] != n:
        raise ShapeError(f"responsibilities have {w.shape[0]} rows for {n} points")
    if n == 0:
        raise ValueError("em_temporary_stats: empty batch")
    m = w.shape[1]
    mass = w.sum(axis=0)  # (M,)
    tau = mass / n
    starved = mass < STARVATION_THRESHOLD
    mu = np.zeros((m, x.shape[0]))
    var = np.zeros((m, x.shape[0]))
    for j in range(m):
        if starved[j]:
            continue
        mu[j] = (x @ w[:, j]) / mass[j]
        diff = x - mu[j][:, None]
        var[j] = ((diff * diff) @ w[:, j]) / mass[j]
    return TempStats(tau, mu, var, starved)


def accumulate_em(state: MixtureState, temp: TempStats, lam: float | None = None) -> MixtureState:
    """Blend EM temporaries into ``state`` in place; starved components keep their moments."""
    lam = state.lambda_c if lam is None else lam
    state.tau = state.blend(state.tau, temp.tau, lam)
    for j in range(state.M):
        if temp.starved[j]:
            state.starvation_events += 1
            logger.debug("component %d starved (mass %.3g); moments carried forward", j, temp.tau[j])
            continue
        state.mu[j] = state.blend(state.mu[j], temp.mu[j], lam)
        state.var[j] = state.blend(state.var[j], temp.var[j], lam)
    return state


def accumulate_split(state: MixtureState, j: int, mu_s, var_s, lam: float | None = None) -> MixtureState:
    """Blend one group's plain batch moments into component ``j``; priors are untouched."""
    lam = state.lambda_s if lam is None else lam
    if not 0 <= j < state.M:
        raise IndexError(f"component {j} out of range for M={state.M}")
    state.mu[j] = state.blend(state.mu[j], np.asarray(mu_s, dtype=DTYPE), lam)
    state.var[j] = state.blend(state.var[j], np.asarray(var_s, dtype=DTYPE), lam)
    return state

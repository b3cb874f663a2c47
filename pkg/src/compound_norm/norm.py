"""Plain, compound and split batch normalization with manual backward passes.

All three layers normalize with the running statistics held in a
:class:`~compound_norm.mixture.MixtureState` *before* the current batch is
folded in; the batch only updates those statistics afterwards. Because of
that ordering no gradient flows through batch statistics, and responsibilities
are treated as constants in backward (stop-gradient), so each backward pass is
the exact derivative of a per-point affine map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mixture import (
    MixtureState,
    accumulate_em,
    accumulate_split,
    em_temporary_stats,
    responsibilities,
)
from .numerics import DTYPE, ShapeError, as_matrix, colwise_mean_var

TRAIN = "train"
EVAL = "eval"


class CacheError(RuntimeError):
    """Backward was called without a fresh training-mode cache."""


@dataclass
class AffineParams:
    gamma: np.ndarray  # (M, D)
    beta: np.ndarray  # (M, D)
    grad_gamma: np.ndarray = None
    grad_beta: np.ndarray = None

    def __post_init__(self):
        self.gamma = as_matrix(self.gamma).copy()
        self.beta = as_matrix(self.beta).copy()
        if self.gamma.shape != self.beta.shape:
            raise ShapeError(f"gamma {self.gamma.shape} and beta {self.beta.shape} differ")
        if self.grad_gamma is None:
            self.grad_gamma = np.zeros_like(self.gamma)
        if self.grad_beta is None:
            self.grad_beta = np.zeros_like(self.beta)

    @classmethod
    def identity(cls, M: int, D: int) -> "AffineParams":
        return cls(np.ones((M, D)), np.zeros((M, D)))

    def zero_grad(self):
        self.grad_gamma[...] = 0.0
        self.grad_beta[...] = 0.0

    def copy(self) -> "AffineParams":
        return AffineParams(self.gamma, self.beta, self.grad_gamma.copy(), self.grad_beta.copy())


@dataclass
class NormLayerCache:
    x: np.ndarray  # (D, N) input snapshot
    xhat: np.ndarray  # (M, D, N) per-component standardized features
    w: np.ndarray  # (N, M) responsibilities or one-hot group indicator
    inv_std: np.ndarray  # (M, D)
    kind: str
    mode: str = TRAIN
    consumed: bool = field(default=False, repr=False)


def _check_mode(mode: str):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _check_shapes(x, state: MixtureState, affine: AffineParams):
    if x.shape[0] != state.D:
        raise ShapeError(f"batch has {x.shape[0]} channels, layer expects {state.D}")
    if affine.gamma.shape != (state.M, state.D):
        raise ShapeError(f"affine shape {affine.gamma.shape} does not match mixture ({state.M}, {state.D})")


def standardize(x, state: MixtureState) -> tuple[np.ndarray, np.ndarray]:
    """Standardize ``x`` against every component: returns ``xhat`` (M, D, N) and ``inv_std`` (M, D)."""
    inv_std = 1.0 / np.sqrt(state.var + state.eps)
    xhat = (x[None, :, :] - state.mu[:, :, None]) * inv_std[:, :, None]
    return xhat, inv_std


def _combine(xhat, w, affine: AffineParams) -> np.ndarray:
    # y_i = sum_j w_ij (gamma_j * xhat_j,i + beta_j)
    branch = affine.gamma[:, :, None] * xhat + affine.beta[:, :, None]
    return np.einsum("mdn,nm->dn", branch, w)


def bn_forward(x, state: MixtureState, affine: AffineParams, mode: str = TRAIN,
               momentum: float | None = None):
    """Single-Gaussian batch normalization.

    ``momentum`` defaults to ``state.lambda_c``. In training mode the batch
    mean and biased variance are blended into the running statistics after
    the output has been computed from the previous running values.
    """
    _check_mode(mode)
    x = as_matrix(x)
    if state.M != 1:
        raise ShapeError(f"bn_forward needs a single-component state, got M={state.M}")
    _check_shapes(x, state, affine)
    inv_std = 1.0 / np.sqrt(state.var[0] + state.eps)
    xhat = (x - state.mu[0][:, None]) * inv_std[:, None]
    y = affine.gamma[0][:, None] * xhat + affine.beta[0][:, None]
    if mode == EVAL:
        return y, None
    mean, var = colwise_mean_var(x)
    lam = state.lambda_c if momentum is None else momentum
    state.mu[0] = state.blend(state.mu[0], mean, lam)
    state.var[0] = state.blend(state.var[0], var, lam)
    cache = NormLayerCache(x.copy(), xhat[None], np.ones((x.shape[1], 1)), inv_std[None].copy(), "bn")
    return y, cache


def cbn_forward(x, state: MixtureState, affine: AffineParams, mode: str = TRAIN,
                weights: np.ndarray | None = None):
    """Compound batch normalization.

    Standardize against each component, weight the per-component affine
    outputs by responsibilities computed from the pre-update statistics, and
    (training only) run one moving-average EM step. ``weights`` overrides the
    responsibilities; it exists so that finite-difference checks can hold them
    fixed.
    """
    _check_mode(mode)
    x = as_matrix(x)
    _check_shapes(x, state, affine)
    xhat, inv_std = standardize(x, state)
    w = responsibilities(x, state) if weights is None else as_matrix(weights)
    y = _combine(xhat, w, affine)
    if mode == EVAL:
        return y, None
    accumulate_em(state, em_temporary_stats(x, w))
    return y, NormLayerCache(x.copy(), xhat, w, inv_std, "cbn")


def cbn_backward(grad_y, cache: NormLayerCache | None, affine: AffineParams) -> np.ndarray:
    """Gradient w.r.t. the input; accumulates ``affine.grad_gamma`` / ``grad_beta``.

    Statistics and ``cache.w`` are constants here.
    """
    if cache is None or cache.mode != TRAIN:
        raise CacheError("backward needs the cache of a training-mode forward")
    if cache.consumed:
        raise CacheError("cache was already consumed by a previous backward")
    grad_y = as_matrix(grad_y)
    if grad_y.shape != cache.x.shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} does not match forward input {cache.x.shape}")
    cache.consumed = True
    w = cache.w
    scale = affine.gamma * cache.inv_std  # (M, D)
    grad_x = grad_y * (scale.T @ w.T)
    affine.grad_gamma += np.einsum("dn,mdn,nm->md", grad_y, cache.xhat, w)
    affine.grad_beta += (grad_y @ w).T
    return grad_x


bn_backward = cbn_backward


def sbn_forward(x, labels, partition, state: MixtureState, affine: AffineParams, mode: str = TRAIN):
    """Split batch normalization: each point uses the component of its label's class group.

    In training mode every non-empty group's plain batch moments update its
    component's mean and variance with ``state.lambda_s``.
    """
    _check_mode(mode)
    x = as_matrix(x)
    _check_shapes(x, state, affine)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[1],):
        raise ShapeError(f"expected {x.shape[1]} labels, got shape {labels.shape}")
    if partition.M != state.M:
        raise ShapeError(f"partition has {partition.M} groups, mixture has {state.M} components")
    groups = partition.group_of(labels)
    w = np.zeros((x.shape[1], state.M), dtype=DTYPE)
    w[np.arange(x.shape[1]), groups] = 1.0
    xhat, inv_std = standardize(x, state)
    y = _combine(xhat, w, affine)
    if mode == EVAL:
        return y, None
    for j in range(state.M):
        members = groups == j
        if not members.any():
            continue
        mean, var = colwise_mean_var(x[:, members])
        accumulate_split(state, j, mean, var)
    return y, NormLayerCache(x.copy(), xhat, w, inv_std, "sbn")


sbn_backward = cbn_backward


"""Dense-array helpers shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Feature batches
follow the channel-major convention: a ``D x N`` array with one column per
point.
"""

from __future__ import annotations

import hashlib

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


class EmptyBatchError(ValueError):
    """Raised when a reduction is requested over zero points."""


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` with a shape check that names both operands."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def colwise_mean_var(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean and biased (divide-by-N) variance of a ``D x N`` batch."""
    x = as_matrix(x)
    n = x.shape[1]
    if n == 0:
        raise EmptyBatchError("colwise_mean_var: batch has no points")
    mean = x.sum(axis=1) / n
    centered = x - mean[:, None]
    var = (centered * centered).sum(axis=1) / n
    return mean, var


def flatten_nchw(x) -> np.ndarray:
    """Reshape a ``B x D x H x W`` activation into a ``D x (B*H*W)`` batch."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D activation, got shape {x.shape}")
    b, d, h, w = x.shape
    return x.transpose(1, 0, 2, 3).reshape(d, b * h * w)


def unflatten_nchw(x, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Inverse of :func:`flatten_nchw`."""
    b, d, h, w = shape
    x = as_matrix(x)
    if x.shape != (d, b * h * w):
        raise ShapeError(f"cannot unflatten {x.shape} into {shape}")
    return x.reshape(d, b, h, w).transpose(1, 0, 2, 3)


def broadcast_labels(labels, spatial: int) -> np.ndarray:
    """Repeat per-image labels over ``spatial = H*W`` positions, matching :func:`flatten_nchw`."""
    return np.repeat(np.asarray(labels), spatial)


class Rng:
    """Seeded random stream that can be split into independent labelled substreams.

    Two ``Rng`` objects with the same seed produce identical draws, and
    ``rng.split("augment")`` always yields the same child stream for the same
    parent seed, regardless of how much the parent has been consumed.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, label: str) -> "Rng":
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        word = int.from_bytes(digest[:4], "little")
        return Rng(self.seed, self._key + (word,))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def random(self, size=None):
        return self.generator.random(size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

"""Synthetic long-tailed datasets, class partitions, augmentation and subgroup masks.

Class labels are 0-based throughout: class ``0`` is the most frequent.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, Rng

MAGIC = b"CNLD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIQd")  # magic, version, K, D, seed, separation

MANY_SHOT_MIN = 100  # strictly more than this many training samples
FEW_SHOT_MAX = 20  # strictly fewer than this many training samples


class DatasetFormatError(ValueError):
    """A dataset container could not be parsed."""


def longtail_counts(K: int, n_max: int, rho: float) -> np.ndarray:
    """Exponentially decaying per-class counts ``round(n_max * rho**(-i/(K-1)))``, at least 1."""
    if K < 2:
        raise ValueError("need at least two classes")
    if rho < 1:
        raise ValueError("imbalance ratio must be >= 1")
    i = np.arange(K)
    counts = np.rint(n_max * rho ** (-i / (K - 1))).astype(np.int64)
    return np.maximum(counts, 1)


class ClassPartition:
    """``M`` disjoint, contiguous blocks of class ids covering ``0..K-1``."""

    def __init__(self, groups: list[np.ndarray], K: int):
        self.groups = [np.asarray(g, dtype=np.int64) for g in groups]
        self.K = K
        self._lookup = np.full(K, -1, dtype=np.int64)
        for j, g in enumerate(self.groups):
            self._lookup[g] = j

    @property
    def M(self) -> int:
        return len(self.groups)

    def group_of(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            bad = labels[(labels < 0) | (labels >= self.K)][0]
            raise KeyError(f"label {bad} is not in any class group (K={self.K})")
        return self._lookup[labels]

    def __repr__(self):
        return f"ClassPartition({[g.tolist() for g in self.groups]})"


def partition_classes(K: int, M: int) -> ClassPartition:
    """Split classes by serial number into ``M`` contiguous groups; the first ``K % M`` get one extra."""
    if not 1 <= M <= K:
        raise ValueError(f"need 1 <= M <= K, got M={M}, K={K}")
    base, extra = divmod(K, M)
    groups, start = [], 0
    for j in range(M):
        size = base + (1 if j < extra else 0)
        groups.append(np.arange(start, start + size))
        start += size
    return ClassPartition(groups, K)


@dataclass
class Dataset:
    x_train: np.ndarray  # (N, D)
    y_train: np.ndarray  # (N,)
    x_test: np.ndarray
    y_test: np.ndarray
    K: int
    seed: int = 0
    separation: float = 0.0

    @property
    def D(self) -> int:
        return self.x_train.shape[1]

    @property
    def train_counts(self) -> np.ndarray:
        return np.bincount(self.y_train, minlength=self.K)

    @property
    def test_counts(self) -> np.ndarray:
        return np.bincount(self.y_test, minlength=self.K)


def synth_clusters(K: int, D: int, counts, separation: float, seed: int,
                   test_per_class: int = 100) -> Dataset:
    """Unit-variance Gaussian class clusters with means on a sphere of radius ``separation``.

    Training counts follow ``counts``; the test split is balanced.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (K,):
        raise ValueError(f"expected {K} class counts, got {counts.shape}")
    rng = Rng(seed)
    centers = rng.split("centers").normal(size=(K, D))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(stream: Rng, per_class):
        labels = np.repeat(np.arange(K), per_class)
        x = centers[labels] + stream.normal(size=(labels.size, D))
        return x, labels

    x_train, y_train = draw(rng.split("train"), counts)
    x_test, y_test = draw(rng.split("test"), np.full(K, test_per_class))
    return Dataset(x_train, y_train, x_test, y_test, K, seed, float(separation))


@dataclass(frozen=True)
class AugmentParams:
    noise: float = 0.0
    scale_jitter: float = 0.0
    dropout: float = 0.0


WEAK = AugmentParams(noise=0.1, scale_jitter=0.1)
STRONG = AugmentParams(noise=0.5, scale_jitter=0.3, dropout=0.2)


def augment(x, params: AugmentParams, rng: Rng) -> np.ndarray:
    """Feature-space distortion: per-feature scale jitter, additive noise, random dropout.

    Works on a single vector or a ``B x D`` batch.
    """
    x = np.asarray(x, dtype=DTYPE)
    out = x * (1.0 + rng.uniform(-params.scale_jitter, params.scale_jitter, size=x.shape))
    out = out + rng.normal(0.0, params.noise, size=x.shape)
    if params.dropout > 0:
        keep = rng.random(size=x.shape) >= params.dropout
        out = out * keep
    return out


def subgroup_masks(counts) -> dict[str, np.ndarray]:
    """Class ids in the many (>100), medium (20..100) and few (<20) shot bands."""
    counts = np.asarray(counts)
    ids = np.arange(len(counts))
    return {
        "many": ids[counts > MANY_SHOT_MIN],
        "medium": ids[(counts >= FEW_SHOT_MAX) & (counts <= MANY_SHOT_MIN)],
        "few": ids[counts < FEW_SHOT_MAX],
    }


def dataset_to_bytes(ds: Dataset) -> bytes:
    """Binary container: header, per-class counts, then each split's features and labels.

    Layout (little-endian): ``magic, version:u32, K:u32, D:u32, seed:u64,
    separation:f64``, train counts ``K x u32``, test counts ``K x u32``, train
    features ``N x D f64`` (class-sorted rows), train labels ``N x i32``, then
    the same two blocks for the test split.
    """
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.K, ds.D, ds.seed, ds.separation))
    buf.write(ds.train_counts.astype("<u4").tobytes())
    buf.write(ds.test_counts.astype("<u4").tobytes())
    for x, y in ((ds.x_train, ds.y_train), (ds.x_test, ds.y_test)):
        buf.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
        buf.write(np.asarray(y, dtype="<i4").tobytes())
    return buf.getvalue()


def dataset_from_bytes(raw: bytes) -> Dataset:
    try:
        magic, version, K, D, seed, separation = _HEADER.unpack_from(raw, 0)
    except struct.error as exc:
        raise DatasetFormatError("truncated header") from exc
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    off = _HEADER.size
    try:
        train_counts = np.frombuffer(raw, "<u4", K, off).astype(np.int64)
        off += 4 * K
        test_counts = np.frombuffer(raw, "<u4", K, off).astype(np.int64)
        off += 4 * K
        splits = []
        for n in (int(train_counts.sum()), int(test_counts.sum())):
            x = np.frombuffer(raw, "<f8", n * D, off).reshape(n, D).astype(DTYPE)
            off += 8 * n * D
            y = np.frombuffer(raw, "<i4", n, off).astype(np.int64)
            off += 4 * n
            splits.append((x, y))
    except ValueError as exc:
        raise DatasetFormatError(f"truncated payload: {exc}") from exc
    if off != len(raw):
        raise DatasetFormatError(f"{len(raw) - off} trailing bytes")
    (x_tr, y_tr), (x_te, y_te) = splits
    return Dataset(x_tr, y_tr, x_te, y_te, K, seed, separation)


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as f:
        f.write(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read())


def export_csv(ds: Dataset, path) -> None:
    """One row per point: split, label, then the features."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["split", "label"] + [f"f{d}" for d in range(ds.D)])
        for split, x, y in (("train", ds.x_train, ds.y_train), ("test", ds.x_test, ds.y_test)):
            for row, label in zip(x, y):
                writer.writerow([split, int(label)] + [repr(float(v)) for v in row])

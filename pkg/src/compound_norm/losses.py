"""Balanced softmax cross-entropy and stop-gradient cosine consistency.

Both losses return their gradients explicitly. Class indices are 0-based.
"""

from __future__ import annotations

import numpy as np

from .numerics import DTYPE


class ZeroNormError(ValueError):
    """A logits vector with zero norm was passed to the cosine loss."""


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def balanced_softmax_ce(o, counts, y: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of ``softmax(o + log n)`` at label ``y``; returns ``(loss, grad_o)``."""
    o = np.asarray(o, dtype=DTYPE)
    counts = np.asarray(counts, dtype=DTYPE)
    if not np.all(np.isfinite(o)):
        raise ValueError("balanced_softmax_ce: non-finite logits")
    if np.any(counts < 1):
        raise ValueError("class counts must all be >= 1")
    if not 0 <= y < o.shape[0]:
        raise IndexError(f"label {y} out of range for {o.shape[0]} classes")
    logp = _log_softmax(o + np.log(counts))
    grad = np.exp(logp)
    grad[y] -= 1.0
    return float(-logp[y]), grad


def balanced_softmax_ce_batch(logits, counts, labels, sample_weights=None) -> tuple[float, np.ndarray]:
    """Weighted mean of :func:`balanced_softmax_ce` over a ``B x K`` batch.

    With ``sample_weights`` the loss is ``sum(w_i L_i) / sum(w_i)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    counts = np.asarray(counts, dtype=DTYPE)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(logits)):
        raise ValueError("balanced_softmax_ce_batch: non-finite logits")
    b = logits.shape[0]
    weights = np.ones(b) if sample_weights is None else np.asarray(sample_weights, dtype=DTYPE)
    weights = weights / weights.sum()
    logp = _log_softmax(logits + np.log(counts)[None, :])
    rows = np.arange(b)
    loss = float(-(weights * logp[rows, labels]).sum())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad * weights[:, None]


def cosine_similarity(a, b) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    return float(a @ b / (na * nb))


def _cosine_grad_a(a, b) -> np.ndarray:
    # d/da [a.b / (|a||b|)] = b/(|a||b|) - (a.b) a / (|a|^3 |b|)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    return b / (na * nb) - (a @ b) * a / (na ** 3 * nb)


def cosine_consistency(oc_strg, os_weak_detached, os_strg, oc_weak_detached):
    """``-S(oc_strg, os_weak) - S(os_strg, oc_weak)`` with the weak arguments detached.

    Returns ``(loss, grad_oc_strg, grad_os_strg)``; the detached arguments get
    no gradient.
    """
    oc_strg, os_weak, os_strg, oc_weak = (np.asarray(v, dtype=DTYPE) for v in
                                          (oc_strg, os_weak_detached, os_strg, oc_weak_detached))
    loss = -cosine_similarity(oc_strg, os_weak) - cosine_similarity(os_strg, oc_weak)
    return loss, -_cosine_grad_a(oc_strg, os_weak), -_cosine_grad_a(os_strg, oc_weak)


def _cosine_rows(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    sim = (a * b).sum(axis=1) / (na * nb)
    grad = b / (na * nb)[:, None] - (sim / (na * na))[:, None] * a
    return sim, grad


def cosine_consistency_batch(oc_strg, os_weak, os_strg, oc_weak):
    """Batch mean of :func:`cosine_consistency` over ``B x K`` logits."""
    oc_strg, os_weak, os_strg, oc_weak = (np.asarray(v, dtype=DTYPE) for v in (oc_strg, os_weak, os_strg, oc_weak))
    b = oc_strg.shape[0]
    s1, g1 = _cosine_rows(oc_strg, os_weak)
    s2, g2 = _cosine_rows(os_strg, oc_weak)
    return float(-(s1 + s2).sum() / b), -g1 / b, -g2 / b

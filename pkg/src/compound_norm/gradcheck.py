"""Central finite-difference checks of every hand-written backward pass.

Each check draws a random instance from a seeded stream, evaluates the
analytic gradient, and compares it entry by entry against central differences
of the corresponding *forward* function. Statistics and responsibilities are
held fixed in the forward replays, which is the function the backward passes
differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import norm as N
from .data import partition_classes
from .losses import balanced_softmax_ce, cosine_consistency
from .mixture import MixtureState
from .model import COMPOUND, DualPathModel, NetworkSpec, backward_dual
from .numerics import Rng

FD_STEP = 1e-5
REL_TOL = 1e-6
ABS_TOL = 1e-8


@dataclass
class CheckResult:
    name: str
    instances: int
    max_abs_err: float
    max_rel_err: float
    passed: bool


def central_difference(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` (perturbed in place, then restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f()
        flat[k] = orig - step
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * step)
    return grad


def compare(analytic, numeric, rel_tol=REL_TOL, abs_tol=ABS_TOL) -> tuple[float, float, bool]:
    """Errors and pass flag under ``|a - n| <= max(rel_tol * max(|a|, |n|), abs_tol)``."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bound = np.maximum(rel_tol * scale, abs_tol)
    rel = np.where(scale > 0, err / np.where(scale > 0, scale, 1.0), 0.0)
    return float(err.max(initial=0.0)), float(rel.max(initial=0.0)), bool(np.all(err <= bound))


def _random_state(rng: Rng, M: int, D: int) -> MixtureState:
    tau = rng.uniform(0.2, 1.0, size=M)
    return MixtureState(tau / tau.sum(), rng.normal(0.0, 0.5, size=(M, D)), rng.uniform(0.5, 2.0, size=(M, D)))


def _random_affine(rng: Rng, M: int, D: int) -> N.AffineParams:
    return N.AffineParams(rng.uniform(0.5, 1.5, size=(M, D)), rng.normal(0.0, 0.3, size=(M, D)))


def _norm_instance(rng: Rng, path: str, rel_tol, abs_tol):
    M = int(rng.choice([1, 2, 4]))
    D = int(rng.integers(1, 5))
    n = int(rng.integers(M, M + 6))
    x = rng.normal(size=(D, n))
    state = _random_state(rng, M, D)
    affine = _random_affine(rng, M, D)
    probe = rng.normal(size=(D, n))  # scalar objective is <probe, y>
    labels = partition = None
    if path == "sbn":
        partition = partition_classes(max(M, 3), M)
        labels = rng.integers(0, partition.K, size=n)

    def forward(mode, weights=None):
        if path == "cbn":
            return N.cbn_forward(x, state.copy() if mode == N.TRAIN else state, affine, mode, weights=weights)
        return N.sbn_forward(x, labels, partition, state.copy() if mode == N.TRAIN else state, affine, mode)

    _, cache = forward(N.TRAIN)
    work = affine.copy()
    work.zero_grad()
    grad_x = N.cbn_backward(probe, cache, work)

    def objective():
        y, _ = forward(N.EVAL, cache.w)
        return float(np.sum(probe * y))

    worst = (0.0, 0.0, True)
    for analytic, target in ((grad_x, x), (work.grad_gamma, affine.gamma), (work.grad_beta, affine.beta)):
        a, r, ok = compare(analytic, central_difference(objective, target), rel_tol, abs_tol)
        worst = (max(worst[0], a), max(worst[1], r), worst[2] and ok)
    return worst


def _softmax_instance(rng: Rng, rel_tol, abs_tol):
    K = int(rng.integers(2, 7))
    o = rng.normal(0.0, 2.0, size=K)
    counts = rng.integers(1, 200, size=K)
    y = int(rng.integers(K))
    _, g = balanced_softmax_ce(o, counts, y)
    num = central_difference(lambda: balanced_softmax_ce(o, counts, y)[0], o)
    return compare(g, num, rel_tol, abs_tol)


def _cosine_instance(rng: Rng, rel_tol, abs_tol):
    K = int(rng.integers(2, 7))
    oc_s, os_w, os_s, oc_w = (rng.normal(size=K) for _ in range(4))
    _, g_c, g_s = cosine_consistency(oc_s, os_w, os_s, oc_w)
    loss = lambda: cosine_consistency(oc_s, os_w, os_s, oc_w)[0]  # noqa: E731
    a1, r1, ok1 = compare(g_c, central_difference(loss, oc_s), rel_tol, abs_tol)
    a2, r2, ok2 = compare(g_s, central_difference(loss, os_s), rel_tol, abs_tol)
    return max(a1, a2), max(r1, r2), ok1 and ok2


def _dual_instance(rng: Rng, rel_tol, abs_tol, depth: int | None = None):
    depth = int(rng.integers(1, 4)) if depth is None else depth
    K = 4
    M = int(rng.choice([1, 2]))
    spec = NetworkSpec(input_dim=3, hidden=tuple(int(rng.integers(2, 5)) for _ in range(depth)), K=K,
                       norm_kind=COMPOUND, M=M, mean_jitter=0.3)
    model = DualPathModel(spec, rng.split("model"))
    for nl in model.norms:
        nl.affine.gamma[...] = rng.uniform(0.5, 1.5, size=nl.affine.gamma.shape)
        nl.affine.beta[...] = rng.normal(0.0, 0.3, size=nl.affine.beta.shape)
    batch = 8
    x = rng.normal(size=(batch, 3))
    labels = rng.integers(0, K, size=batch)
    partition = partition_classes(K, M)
    probe_c = rng.normal(size=(batch, K))
    probe_s = rng.normal(size=(batch, K))
    snapshot = [nl.state.copy() for nl in model.norms]

    def restore():
        for nl, st in zip(model.norms, snapshot):
            nl.state = st.copy()

    restore()
    _, cache_c = model.forward(x, "cbn", N.TRAIN)
    restore()
    _, cache_s = model.forward(x, "sbn", N.TRAIN, labels, partition)
    restore()
    frozen = cache_c.frozen_weights()
    model.zero_grad()
    backward_dual(model, probe_c, probe_s, cache_c, cache_s)

    def objective():
        oc, _ = model.forward(x, "cbn", N.EVAL, frozen=frozen)
        os_, _ = model.forward(x, "sbn", N.EVAL, labels, partition)
        return float(np.sum(probe_c * oc) + np.sum(probe_s * os_))

    worst = (0.0, 0.0, True)
    for _, value, grad in model.parameters():
        a, r, ok = compare(grad.copy(), central_difference(objective, value), rel_tol, abs_tol)
        worst = (max(worst[0], a), max(worst[1], r), worst[2] and ok)
    return worst


CHECKS = {
    "cbn_backward": lambda rng, rt, at: _norm_instance(rng, "cbn", rt, at),
    "sbn_backward": lambda rng, rt, at: _norm_instance(rng, "sbn", rt, at),
    "balanced_softmax_ce": _softmax_instance,
    "cosine_consistency": _cosine_instance,
    "backward_dual": _dual_instance,
}


def run_checks(seed: int = 0, instances: int = 20, rel_tol: float = REL_TOL,
               abs_tol: float = ABS_TOL) -> list[CheckResult]:
    root = Rng(seed)
    results = []
    for name, check in CHECKS.items():
        stream = root.split(name)
        max_a, max_r, passed = 0.0, 0.0, True
        for i in range(instances):
            a, r, ok = check(stream.split(str(i)), rel_tol, abs_tol)
            max_a, max_r, passed = max(max_a, a), max(max_r, r), passed and ok
        results.append(CheckResult(name, instances, max_a, max_r, passed))
    return results

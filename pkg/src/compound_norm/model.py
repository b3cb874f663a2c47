"""MLP backbone with pluggable normalization, routed through CBN or SBN.

Both routings share every weight, every :class:`MixtureState` and every
:class:`AffineParams`; only the normalization call differs. Activations are
kept channel-major (``D x B``) inside the network; the public API takes
``B x input_dim`` batches and returns ``B x K`` logits.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import norm as N
from .mixture import MixtureState, init_mixture
from .numerics import DTYPE, Rng, ShapeError

PLAIN = "plain"
COMPOUND = "compound"


@dataclass
class NetworkSpec:
    input_dim: int
    hidden: tuple[int, ...]
    K: int
    norm_kind: str | tuple[str, ...] = COMPOUND
    M: int = 4
    eps: float = 1e-5
    lambda_bn: float = 0.1
    lambda_c: float = 0.1
    lambda_s: float = 0.1
    mean_jitter: float = 0.0
    momentum_on_new: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden:
            raise ValueError("need at least one hidden layer")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.K < 2:
            raise ValueError("need at least two classes")
        kinds = (self.norm_kind,) * len(self.hidden) if isinstance(self.norm_kind, str) else tuple(self.norm_kind)
        if len(kinds) != len(self.hidden) or any(k not in (PLAIN, COMPOUND) for k in kinds):
            raise ValueError(f"bad norm_kind {self.norm_kind!r}")
        self.norm_kind = kinds if len(set(kinds)) > 1 else kinds[0]

    def kinds(self) -> tuple[str, ...]:
        if isinstance(self.norm_kind, str):
            return (self.norm_kind,) * len(self.hidden)
        return tuple(self.norm_kind)


@dataclass
class NormLayer:
    kind: str
    state: MixtureState
    affine: N.AffineParams

    def forward(self, x, path, mode, labels=None, partition=None, weights=None):
        if self.kind == PLAIN:
            return N.bn_forward(x, self.state, self.affine, mode)
        if path == "cbn":
            return N.cbn_forward(x, self.state, self.affine, mode, weights=weights)
        if labels is None or partition is None:
            raise ValueError("the SBN path needs labels and a class partition")
        return N.sbn_forward(x, labels, partition, self.state, self.affine, mode)


@dataclass
class LayerCache:
    h_in: np.ndarray  # (in, B) input to the linear map
    norm: N.NormLayerCache
    mask: np.ndarray  # (D, B) rectifier gate


@dataclass
class ForwardCache:
    path: str
    x: np.ndarray
    layers: list[LayerCache] = field(default_factory=list)
    h_last: np.ndarray | None = None

    def frozen_weights(self) -> list[np.ndarray]:
        """Responsibilities used at each norm site, for replaying the forward with them fixed."""
        return [lc.norm.w for lc in self.layers]


class DualPathModel:
    def __init__(self, spec: NetworkSpec, rng: Rng):
        self.spec = spec
        self.weights: list[np.ndarray] = []
        self.norms: list[NormLayer] = []
        fan_in = spec.input_dim
        for l, (width, kind) in enumerate(zip(spec.hidden, spec.kinds())):
            self.weights.append(rng.split(f"weight{l}").normal(0.0, np.sqrt(2.0 / fan_in), size=(width, fan_in)))
            m = 1 if kind == PLAIN else spec.M
            lam = spec.lambda_bn if kind == PLAIN else spec.lambda_c
            state = init_mixture(m, width, rng.split(f"mixture{l}"), spec.mean_jitter if m > 1 else 0.0,
                                 eps=spec.eps, lambda_c=lam, lambda_s=spec.lambda_s,
                                 momentum_on_new=spec.momentum_on_new)
            self.norms.append(NormLayer(kind, state, N.AffineParams.identity(m, width)))
            fan_in = width
        self.head_weight = rng.split("head").normal(0.0, np.sqrt(1.0 / fan_in), size=(spec.K, fan_in))
        self.head_bias = np.zeros(spec.K)
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_head_weight = np.zeros_like(self.head_weight)
        self.grad_head_bias = np.zeros_like(self.head_bias)

    # parameter bookkeeping

    def parameters(self):
        """``(name, value, grad)`` triples for every trainable array, in a fixed order."""
        out = []
        for l, (w, g, nl) in enumerate(zip(self.weights, self.grad_weights, self.norms)):
            out.append((f"layer{l}.weight", w, g))
            out.append((f"layer{l}.gamma", nl.affine.gamma, nl.affine.grad_gamma))
            out.append((f"layer{l}.beta", nl.affine.beta, nl.affine.grad_beta))
        out.append(("head.weight", self.head_weight, self.grad_head_weight))
        out.append(("head.bias", self.head_bias, self.grad_head_bias))
        return out

    def statistics(self):
        out = []
        for l, nl in enumerate(self.norms):
            out += [(f"layer{l}.tau", nl.state.tau), (f"layer{l}.mu", nl.state.mu), (f"layer{l}.var", nl.state.var)]
        return out

    def zero_grad(self):
        for _, _, g in self.parameters():
            g[...] = 0.0

    @property
    def starvation_events(self) -> int:
        return sum(nl.state.starvation_events for nl in self.norms)

    # forward / backward

    def forward(self, batch, path: str = "cbn", mode: str = N.TRAIN, labels=None, partition=None,
                frozen: list[np.ndarray] | None = None):
        """Logits ``B x K`` and a cache (``None`` in eval mode).

        ``frozen`` supplies per-layer responsibilities for the CBN path; it is
        used by finite-difference checks to hold the stop-gradient quantities
        fixed.
        """
        if path not in ("cbn", "sbn"):
            raise ValueError(f"unknown path {path!r}")
        batch = np.asarray(batch, dtype=DTYPE)
        if batch.ndim != 2 or batch.shape[1] != self.spec.input_dim:
            raise ShapeError(f"expected a B x {self.spec.input_dim} batch, got {batch.shape}")
        if labels is not None:
            labels = np.asarray(labels)
        cache = ForwardCache(path, batch)
        h = batch.T
        for l, (w, nl) in enumerate(zip(self.weights, self.norms)):
            z = w @ h
            y, ncache = nl.forward(z, path, mode, labels, partition, None if frozen is None else frozen[l])
            mask = y > 0
            cache.layers.append(LayerCache(h, ncache, mask))
            h = y * mask
        cache.h_last = h
        logits = (self.head_weight @ h + self.head_bias[:, None]).T
        return logits, (cache if mode == N.TRAIN else None)

    def backward(self, grad_logits, cache: ForwardCache):
        """Accumulate parameter gradients for one forward's cache."""
        if cache is None:
            raise N.CacheError("backward needs the cache of a training-mode forward")
        g = np.asarray(grad_logits, dtype=DTYPE).T  # (K, B)
        if g.shape[1] != cache.x.shape[0]:
            raise ShapeError(f"gradient batch {g.shape[1]} does not match forward batch {cache.x.shape[0]}")
        self.grad_head_weight += g @ cache.h_last.T
        self.grad_head_bias += g.sum(axis=1)
        g = self.head_weight.T @ g
        for l in reversed(range(len(self.weights))):
            lc = cache.layers[l]
            g = N.cbn_backward(g * lc.mask, lc.norm, self.norms[l].affine)
            self.grad_weights[l] += g @ lc.h_in.T
            g = self.weights[l].T @ g

    def predict(self, batch) -> np.ndarray:
        """Evaluation logits through the CBN path; never mutates statistics."""
        logits, _ = self.forward(batch, "cbn", N.EVAL)
        return logits


def backward_dual(model: DualPathModel, grad_oc, grad_os, cache_c: ForwardCache, cache_s: ForwardCache | None):
    """Backpropagate gradients on the CBN and SBN strong-branch logits; contributions add."""
    model.backward(grad_oc, cache_c)
    if cache_s is not None and grad_os is not None:
        model.backward(grad_os, cache_s)


def save_checkpoint(model: DualPathModel, path, step: int = 0, extra: dict | None = None) -> None:
    """Write ``path`` (JSON manifest) and ``path + '.bin'`` (little-endian float64 blocks).

    ``extra`` entries are copied into the manifest verbatim.
    """
    blocks, offset = [], 0
    arrays = [(n, v) for n, v, _ in model.parameters()] + model.statistics()
    blob_path = str(path) + ".bin"
    with open(blob_path, "wb") as f:
        for name, value in arrays:
            data = np.ascontiguousarray(value, dtype="<f8").tobytes()
            f.write(data)
            blocks.append({"name": name, "shape": list(value.shape), "offset": offset})
            offset += len(data)
    manifest = {
        "spec": asdict(model.spec),
        "step": step,
        "starvation_events": model.starvation_events,
        "blob": os.path.basename(blob_path),
        "blocks": blocks,
    }
    manifest.update(extra or {})
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)


def load_checkpoint(path) -> tuple[DualPathModel, dict]:
    with open(path) as f:
        manifest = json.load(f)
    spec_d = manifest["spec"]
    if isinstance(spec_d["norm_kind"], list):
        spec_d["norm_kind"] = tuple(spec_d["norm_kind"])
    model = DualPathModel(NetworkSpec(**spec_d), Rng(0))
    with open(os.path.join(os.path.dirname(os.path.abspath(path)), manifest["blob"]), "rb") as f:
        raw = f.read()
    targets = {n: v for n, v, _ in model.parameters()}
    targets.update(dict(model.statistics()))
    for block in manifest["blocks"]:
        dest = targets[block["name"]]
        count = int(np.prod(block["shape"])) if block["shape"] else 1
        dest[...] = np.frombuffer(raw, "<f8", count, block["offset"]).reshape(block["shape"])
    return model, manifest

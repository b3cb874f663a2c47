"""Dual-path training loop, cosine-annealed SGD, decoupled fine-tuning and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from .losses import balanced_softmax_ce_batch, cosine_consistency_batch
from .model import COMPOUND, PLAIN, DualPathModel, NetworkSpec, backward_dual
from .norm import EVAL, TRAIN
from .numerics import Rng

logger = logging.getLogger(__name__)

RECORD_FIELDS = ["epoch", "stage", "lr", "loss_cls", "loss_sim", "top1", "many", "medium", "few",
                 "starvation_events"]


class NonFiniteLossError(FloatingPointError):
    """A training step produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.05
    lr_min: float = 0.0
    lambda_bn: float = 0.1
    lambda_c: float = 0.1
    lambda_s: float = 0.1
    M: int = 4
    norm: str = "cbn"  # "bn" or "cbn"
    sbn: bool = True
    w_cls: float = 1.0
    w_sim: float = 1.0
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    eps: float = 1e-5
    mean_jitter: float = 0.1
    momentum_on_new: bool = False
    sgd_momentum: float = 0.0
    nesterov: bool = False
    weight_decay: float = 0.0
    decouple: bool = False
    decouple_fraction: float = 0.2
    resample: bool = False
    reweight: bool = False
    sbn_cls_loss: bool = False
    weak: D.AugmentParams = field(default_factory=lambda: D.WEAK)
    strong: D.AugmentParams = field(default_factory=lambda: D.STRONG)

    def __post_init__(self):
        if self.norm not in ("bn", "cbn"):
            raise ValueError(f"norm must be 'bn' or 'cbn', got {self.norm!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.M < 1:
            raise ValueError("epochs, batch_size and M must be positive")
        if not 0.0 <= self.decouple_fraction <= 1.0:
            raise ValueError("decouple_fraction must lie in [0, 1]")
        for name in ("lambda_bn", "lambda_c", "lambda_s"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.weak, dict):
            self.weak = D.AugmentParams(**self.weak)
        if isinstance(self.strong, dict):
            self.strong = D.AugmentParams(**self.strong)

    @property
    def mixture_count(self) -> int:
        return 1 if self.norm == "bn" else self.M

    def network_spec(self, input_dim: int, K: int) -> NetworkSpec:
        return NetworkSpec(
            input_dim=input_dim, hidden=self.hidden, K=K,
            norm_kind=PLAIN if self.norm == "bn" else COMPOUND, M=self.mixture_count, eps=self.eps,
            lambda_bn=self.lambda_bn, lambda_c=self.lambda_c, lambda_s=self.lambda_s,
            mean_jitter=self.mean_jitter, momentum_on_new=self.momentum_on_new,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class SGD:
    """Plain SGD over ``(name, value, grad)`` triples with optional momentum and weight decay.

    The learning rate follows :func:`cosine_lr` over ``total_steps``.
    """

    def __init__(self, params, lr: float, total_steps: int, lr_min: float = 0.0, momentum: float = 0.0,
                 nesterov: bool = False, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr_max = lr
        self.lr_min = lr_min
        self.total_steps = max(int(total_steps), 0)
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.step_count = 0
        self.velocity = {name: np.zeros_like(v) for name, v, _ in self.params}

    @property
    def lr(self) -> float:
        return cosine_lr(min(self.step_count, self.total_steps), self.total_steps, self.lr_max, self.lr_min)

    def step(self) -> float:
        lr = self.lr
        for name, value, grad in self.params:
            g = grad + self.weight_decay * value if self.weight_decay else grad
            if self.momentum:
                buf = self.velocity[name]
                buf *= self.momentum
                buf += g
                g = g + self.momentum * buf if self.nesterov else buf
            value -= lr * g
        self.step_count += 1
        return lr


def _check_finite(**values):
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteLossError(f"non-finite {name}")


def _batches(n: int, batch_size: int, order: np.ndarray):
    if batch_size > n:
        logger.warning("batch size %d exceeds dataset size %d; using %d", batch_size, n, n)
        batch_size = n
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_step(model: DualPathModel, xb, yb, partition, config: TrainConfig, counts, optimizer: SGD,
               rng: Rng) -> tuple[float, float, float]:
    """One minibatch of dual-path training; returns ``(loss_cls, loss_sim, lr)``.

    Order: weak view through CBN then SBN, strong view through CBN then SBN,
    losses, backward over the two strong-branch outputs, SGD step. With
    ``config.sbn`` off the SBN outputs are the CBN outputs.
    """
    weak = D.augment(xb, config.weak, rng)
    oc_weak, _ = model.forward(weak, "cbn", TRAIN)
    os_weak = model.forward(weak, "sbn", TRAIN, yb, partition)[0] if config.sbn else oc_weak
    strong = D.augment(xb, config.strong, rng)
    oc_strg, cache_c = model.forward(strong, "cbn", TRAIN)
    if config.sbn:
        os_strg, cache_s = model.forward(strong, "sbn", TRAIN, yb, partition)
    else:
        os_strg, cache_s = oc_strg, None

    loss_cls, grad_oc = balanced_softmax_ce_batch(oc_strg, counts, yb)
    grad_oc = config.w_cls * grad_oc
    grad_os = np.zeros_like(os_strg)
    if config.sbn and config.sbn_cls_loss:
        loss_s, g = balanced_softmax_ce_batch(os_strg, counts, yb)
        loss_cls += loss_s
        grad_os += config.w_cls * g
    loss_sim, g_c, g_s = cosine_consistency_batch(oc_strg, os_weak, os_strg, oc_weak)
    grad_oc += config.w_sim * g_c
    if config.sbn:
        grad_os += config.w_sim * g_s
    else:
        grad_oc += config.w_sim * g_s
    _check_finite(loss_cls=loss_cls, loss_sim=loss_sim, grad_oc=grad_oc, grad_os=grad_os)

    model.zero_grad()
    backward_dual(model, grad_oc, grad_os if config.sbn else None, cache_c, cache_s)
    for name, _, grad in model.parameters():
        _check_finite(**{name: grad})
    lr = optimizer.step()
    return loss_cls, loss_sim, lr


def train_epoch(model: DualPathModel, dataset: D.Dataset, partition, config: TrainConfig, rng: Rng,
                optimizer: SGD, epoch: int = 0, on_step=None) -> dict:
    """Shuffle, run :func:`train_step` over every minibatch, then evaluate; returns one record row.

    ``on_step(loss_cls, loss_sim, lr)`` is called after every optimizer step.
    """
    counts = dataset.train_counts
    order = rng.split("shuffle").permutation(len(dataset.y_train))
    aug_rng = rng.split("augment")
    losses_cls, losses_sim, lr = [], [], optimizer.lr
    for idx in _batches(len(order), config.batch_size, order):
        lc, ls, lr = train_step(model, dataset.x_train[idx], dataset.y_train[idx], partition, config, counts,
                                optimizer, aug_rng)
        losses_cls.append(lc)
        losses_sim.append(ls)
        if on_step:
            on_step(lc, ls, lr)
    metrics = evaluate(model, dataset.x_test, dataset.y_test, counts)
    return {
        "epoch": epoch, "stage": "representation", "lr": lr,
        "loss_cls": float(np.mean(losses_cls)), "loss_sim": float(np.mean(losses_sim)),
        **metrics, "starvation_events": model.starvation_events,
    }


def evaluate(model: DualPathModel, x_test, y_test, train_counts) -> dict:
    """Top-1 accuracy (percent) overall and on the many/medium/few shot class bands.

    A band with no classes is reported as ``None``.
    """
    pred = np.argmax(model.predict(x_test), axis=1)
    return accuracy_report(pred, y_test, train_counts)


def accuracy_report(pred, y_test, train_counts) -> dict:
    pred = np.asarray(pred)
    y_test = np.asarray(y_test)
    correct = pred == y_test
    out = {"top1": 100.0 * float(correct.mean())}
    for band, classes in D.subgroup_masks(train_counts).items():
        sel = np.isin(y_test, classes)
        out[band] = 100.0 * float(correct[sel].mean()) if sel.any() else None
    return out


def inverse_frequency_weights(counts) -> np.ndarray:
    """Per-class weights proportional to ``1/n``, normalized to sum to one."""
    inv = 1.0 / np.asarray(counts, dtype=float)
    return inv / inv.sum()


def class_balanced_indices(labels, K: int, size: int, rng: Rng) -> np.ndarray:
    """Sample a class uniformly, then an instance of it uniformly, ``size`` times."""
    labels = np.asarray(labels)
    members = [np.flatnonzero(labels == k) for k in range(K)]
    present = np.array([k for k in range(K) if len(members[k])])
    classes = present[rng.integers(len(present), size=size)]
    picks = rng.random(size)
    out = np.empty(size, dtype=np.int64)
    for k in present:
        sel = classes == k
        out[sel] = members[k][(picks[sel] * len(members[k])).astype(np.int64)]
    return out


def decoupled_finetune(model: DualPathModel, dataset: D.Dataset, config: TrainConfig, rng: Rng,
                       epochs: int, first_epoch: int = 0) -> list[dict]:
    """Retrain only the classifier head on frozen CBN features (statistics fixed).

    ``config.resample`` draws class-balanced minibatches; ``config.reweight``
    weights the loss by normalized inverse class frequency.
    """
    if epochs <= 0:
        return []
    counts = dataset.train_counts
    n = len(dataset.y_train)
    steps_per_epoch = math.ceil(n / min(config.batch_size, n))
    head = [("head.weight", model.head_weight, model.grad_head_weight),
            ("head.bias", model.head_bias, model.grad_head_bias)]
    opt = SGD(head, config.lr, epochs * steps_per_epoch, config.lr_min, config.sgd_momentum, config.nesterov,
              config.weight_decay)
    class_w = inverse_frequency_weights(counts) if config.reweight else None
    rows = []
    for e in range(epochs):
        erng = rng.split(f"finetune{e}")
        if config.resample:
            order = class_balanced_indices(dataset.y_train, dataset.K, n, erng.split("resample"))
        else:
            order = erng.split("shuffle").permutation(n)
        aug = erng.split("augment")
        losses, lr = [], opt.lr
        for idx in _batches(n, config.batch_size, order):
            xb = D.augment(dataset.x_train[idx], config.weak, aug)
            yb = dataset.y_train[idx]
            feats = _features(model, xb)
            logits = (model.head_weight @ feats + model.head_bias[:, None]).T
            loss, g = balanced_softmax_ce_batch(logits, counts, yb, None if class_w is None else class_w[yb])
            _check_finite(loss=loss, grad=g)
            model.grad_head_weight[...] = g.T @ feats.T
            model.grad_head_bias[...] = g.sum(axis=0)
            lr = opt.step()
            losses.append(loss)
        rows.append({
            "epoch": first_epoch + e, "stage": "classifier", "lr": lr,
            "loss_cls": float(np.mean(losses)), "loss_sim": None,
            **evaluate(model, dataset.x_test, dataset.y_test, counts),
            "starvation_events": model.starvation_events,
        })
    return rows


def _features(model: DualPathModel, xb) -> np.ndarray:
    """Penultimate activations (``width x B``) through the CBN path in eval mode."""
    h = np.asarray(xb).T
    for w, nl in zip(model.weights, model.norms):
        y, _ = nl.forward(w @ h, "cbn", EVAL)
        h = np.maximum(y, 0.0)
    return h


def build_model(config: TrainConfig, dataset: D.Dataset) -> DualPathModel:
    return DualPathModel(config.network_spec(dataset.D, dataset.K), Rng(config.seed).split("model"))


def run_training(dataset: D.Dataset, config: TrainConfig, on_row=None,
                 on_step=None) -> tuple[DualPathModel, list[dict]]:
    """Full run: representation stage, then the optional decoupled classifier stage.

    Produces exactly ``config.epochs`` record rows; ``on_row`` is called with each.
    """
    rng = Rng(config.seed)
    model = build_model(config, dataset)
    partition = D.partition_classes(dataset.K, config.mixture_count)
    ft_epochs = int(round(config.decouple_fraction * config.epochs)) if config.decouple else 0
    rep_epochs = config.epochs - ft_epochs
    n = len(dataset.y_train)
    steps_per_epoch = math.ceil(n / min(config.batch_size, n))
    opt = SGD(model.parameters(), config.lr, rep_epochs * steps_per_epoch, config.lr_min, config.sgd_momentum,
              config.nesterov, config.weight_decay)
    rows = []
    for e in range(rep_epochs):
        row = train_epoch(model, dataset, partition, config, rng.split(f"epoch{e}"), opt, e, on_step)
        rows.append(row)
        if on_row:
            on_row(row)
    for row in decoupled_finetune(model, dataset, config, rng.split("finetune"), ft_epochs, rep_epochs):
        rows.append(row)
        if on_row:
            on_row(row)
    return model, rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RecordWriter:
    """Streams record rows to an RFC-4180 CSV file, one row per epoch."""

    def __init__(self, path):
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(RECORD_FIELDS)

    def __call__(self, row: dict):
        self._w.writerow([_fmt(row.get(k)) for k in RECORD_FIELDS])
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def summarize(rows: list[dict]) -> dict:
    final = rows[-1] if rows else {}
    return {"epochs": len(rows), "final": final}


def write_summary(rows: list[dict], path) -> None:
    with open(path, "w") as f:
        json.dump(summarize(rows), f, indent=2)

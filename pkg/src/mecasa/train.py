"""Adam, the training loop, cross-validation and accuracy reporting."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import check_partition, fold_arrays, kfold_partitions

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


class NonFiniteGradientError(TrainingAborted):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class DivergenceError(TrainingAborted):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


# -- optimiser ----------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam update of ``params`` (``(name, Tensor)`` pairs) in place.

    All gradients are checked before anything is modified, so an abort leaves
    parameters and state untouched.
    """
    params = list(params)
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for (name, p), g in zip(params, grads):
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for (name, p), g in zip(params, grads):
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in self.params]
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        T.zero_grad(p for _, p in self.params)


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    shuffle: bool = True
    log_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")

    def to_dict(self):
        return dict(vars(self))


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_acc: float


def _as_inputs(x):
    return tuple(x) if isinstance(x, (tuple, list)) else (x,)


def _take(inputs, idx):
    return tuple(a[idx] for a in inputs)


def predict_proba(model, inputs, batch_size=256):
    inputs = _as_inputs(inputs)
    n = len(inputs[0])
    out = []
    with T.no_grad():
        for s in range(0, n, batch_size):
            logits = model.logits(*(a[s : s + batch_size] for a in inputs))
            out.append(T.softmax(logits, axis=1).data)
    return np.concatenate(out) if out else np.zeros((0, 2))


def accuracy(model, inputs, labels, batch_size=256):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_proba(model, inputs, batch_size).argmax(axis=1) == labels))


def confusion_matrix(y_true, y_pred, num_classes=2):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _snapshot(model):
    return [p.data.copy() for _, p in model.named_parameters()]


def _restore(model, snap):
    for (_, p), s in zip(model.named_parameters(), snap):
        p.data[...] = s


def train_model(model, train, val=None, cfg=None, on_epoch=None):
    """Minibatch Adam on cross-entropy; keeps the best-validation parameters.

    ``train`` and ``val`` are ``(inputs, labels)`` where ``inputs`` is an array
    or a tuple of arrays fed positionally to ``model.logits``. ``on_epoch``
    receives one metrics dict per epoch.
    """
    cfg = cfg or TrainConfig()
    x_tr, y_tr = _as_inputs(train[0]), np.asarray(train[1])
    n = len(y_tr)
    if n == 0:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    named = model.named_parameters()
    opt = Adam(named, lr=cfg.lr)
    history = []
    best = (-1.0, 0, _snapshot(model))
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss = T.cross_entropy_loss(model.logits(*_take(x_tr, idx)), y_tr[idx])
            lv = loss.item()
            if not math.isfinite(lv):
                raise DivergenceError(epoch, lv)
            opt.zero_grad()
            T.backward(loss, inputs=[p for _, p in named])
            opt.step()
            total += lv * len(idx)
        record = {"epoch": epoch, "train_loss": total / n}
        if val is not None and len(val[1]):
            record["val_acc"] = accuracy(model, _as_inputs(val[0]), val[1])
            if record["val_acc"] > best[0]:
                best = (record["val_acc"], epoch, _snapshot(model))
        else:
            best = (float("nan"), epoch, None)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d loss %.4f val %s", epoch, record["train_loss"], record.get("val_acc"))
    opt.zero_grad()
    if best[2] is not None:
        _restore(model, best[2])
    return TrainResult(history, best[1], best[0])


# -- reporting ----------------------------------------------------------------


def confidence_interval(accs):
    """Mean and normal-approximation 95% half-width, 1.96 * sample std / sqrt(k)."""
    a = np.asarray(accs, dtype=np.float64)
    if a.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    return float(a.mean()), float(1.96 * a.std(ddof=1) / math.sqrt(a.size))


@dataclass
class MetricsReport:
    fold_accuracies: list
    mean: float
    ci_half_width: float
    confusion: list
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_folds(cls, accs, confusion, runtime_s=0.0, extra=None):
        mean, hw = confidence_interval(accs)
        return cls([float(a) for a in accs], mean, hw, np.asarray(confusion).tolist(), runtime_s, dict(extra or {}))

    def to_dict(self, include_runtime=False):
        d = {
            "fold_accuracies": self.fold_accuracies,
            "mean": self.mean,
            "ci_half_width": self.ci_half_width,
            "confusion": self.confusion,
            **self.extra,
        }
        if include_runtime:
            d["runtime_s"] = self.runtime_s
        return d

    def summary(self):
        return f"{100 * self.mean:.2f} ± {100 * self.ci_half_width:.2f}"


def cross_validate(
    model_factory, dataset, k=5, cfg=None, seed=0, val_fraction=0.15,
    on_fold=None, on_epoch=None, partitions=None,
):
    """Stratified k-fold CV; per-channel standardization uses each fold's train part.

    ``model_factory(fold)`` builds a fresh model. ``on_fold(fold, model,
    parts, stats, test_acc)`` sees each trained model, e.g. to checkpoint it.
    ``partitions`` overrides the fold construction with stored
    ``{"train", "val", "test"}`` index sets.
    """
    cfg = cfg or TrainConfig()
    t0 = time.perf_counter()
    if partitions is None:
        partitions = kfold_partitions(dataset.labels, k, seed, val_fraction)
    k = len(partitions)
    check_partition([p["test"] for p in partitions], len(dataset), dataset.labels)
    accs, cm = [], np.zeros((2, 2), dtype=np.int64)
    for i, parts in enumerate(partitions):
        check_partition(list(parts.values()), len(dataset))
        arrays, stats = fold_arrays(dataset, parts)
        model = model_factory(i)
        fold_cfg = TrainConfig(**{**cfg.to_dict(), "seed": cfg.seed + i})
        epoch_cb = (lambda rec, i=i: on_epoch({"fold": i, **rec})) if on_epoch else None
        train_model(model, arrays["train"], arrays["val"], fold_cfg, on_epoch=epoch_cb)
        x_te, y_te = arrays["test"]
        pred = predict_proba(model, x_te).argmax(axis=1)
        acc = float(np.mean(pred == y_te))
        cm += confusion_matrix(y_te, pred)
        accs.append(acc)
        log.info("fold %d/%d test accuracy %.4f", i + 1, k, acc)
        if on_fold is not None:
            on_fold(i, model, parts, stats, acc)
    return MetricsReport.from_folds(accs, cm, time.perf_counter() - t0)

"""Late fusion of EEG and fNIRS backbone features.

Features taken before each backbone's classification head are concatenated
(EEG first) and passed through fc1 -> ReLU -> fc2 -> softmax. Backbones stay
frozen; only the fusion head is trained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import LinearParams
from .tensor import ShapeError, Tensor
from .train import TrainConfig, train_model


@dataclass(frozen=True)
class FusionConfig:
    d_eeg: int
    d_fnirs: int
    hidden: int = 64
    num_classes: int = 2

    def __post_init__(self):
        if min(self.d_eeg, self.d_fnirs, self.hidden, self.num_classes) < 1:
            raise ValueError(f"fusion dimensions must be >= 1: {self}")

    @property
    def in_dim(self):
        return self.d_eeg + self.d_fnirs

    def to_dict(self):
        return {"d_eeg": self.d_eeg, "d_fnirs": self.d_fnirs, "hidden": self.hidden, "num_classes": self.num_classes}


@dataclass
class FusionParams:
    fc1: LinearParams
    fc2: LinearParams
    config: FusionConfig = field(default=None, metadata={"static": True})

    def named_parameters(self):
        return list(T.named_tensors(self))

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def init_fusion(config, seed=0):
    rng = np.random.default_rng(seed)

    def lin(dout, din):
        b = 1.0 / math.sqrt(din)
        return LinearParams(
            Tensor(rng.uniform(-b, b, (dout, din)), requires_grad=True),
            Tensor(np.zeros(dout), requires_grad=True),
        )

    return FusionParams(lin(config.hidden, config.in_dim), lin(config.num_classes, config.hidden), config)


def fuse_logits(f_eeg, f_fnirs, params):
    f_eeg, f_fnirs = T.as_tensor(f_eeg), T.as_tensor(f_fnirs)
    if f_eeg.ndim != 2 or f_fnirs.ndim != 2:
        raise ShapeError(f"fusion inputs must be (B, d), got {f_eeg.shape} and {f_fnirs.shape}")
    if f_eeg.shape[0] != f_fnirs.shape[0]:
        raise ShapeError(f"batch mismatch: {f_eeg.shape[0]} EEG vs {f_fnirs.shape[0]} fNIRS rows")
    cfg = params.config
    if cfg is not None and (f_eeg.shape[1] != cfg.d_eeg or f_fnirs.shape[1] != cfg.d_fnirs):
        raise ShapeError(
            f"feature dims ({f_eeg.shape[1]}, {f_fnirs.shape[1]}) do not match config ({cfg.d_eeg}, {cfg.d_fnirs})"
        )
    h = T.relu(T.linear(T.concat([f_eeg, f_fnirs], axis=1), params.fc1.weight, params.fc1.bias))
    return T.linear(h, params.fc2.weight, params.fc2.bias)


def fuse_forward(f_eeg, f_fnirs, params):
    """Class probabilities, shape (B, num_classes)."""
    return T.softmax(fuse_logits(f_eeg, f_fnirs, params), axis=1)


class FusionNet:
    """Fusion head plus per-feature standardization fitted on training features."""

    def __init__(self, config, params=None, seed=0, feature_stats=None):
        self.config = config
        self.params = params if params is not None else init_fusion(config, seed)
        if feature_stats is None:
            feature_stats = (np.zeros(config.in_dim), np.ones(config.in_dim))
        self.feature_stats = tuple(np.asarray(s, dtype=np.float64) for s in feature_stats)

    def named_parameters(self):
        return self.params.named_parameters()

    def _normalise(self, f_eeg, f_fnirs):
        mean, std = self.feature_stats
        d = self.config.d_eeg
        return (np.asarray(f_eeg) - mean[:d]) / std[:d], (np.asarray(f_fnirs) - mean[d:]) / std[d:]

    def logits(self, f_eeg, f_fnirs):
        return fuse_logits(*self._normalise(f_eeg, f_fnirs), self.params)

    def predict_proba(self, f_eeg, f_fnirs):
        with T.no_grad():
            return fuse_forward(*self._normalise(f_eeg, f_fnirs), self.params).data


def feature_stats(f_eeg, f_fnirs):
    f = np.concatenate([np.asarray(f_eeg), np.asarray(f_fnirs)], axis=1)
    return f.mean(axis=0), np.maximum(f.std(axis=0), 1e-8)


def train_fusion(train, val=None, config=None, cfg=None, seed=0, hidden=64):
    """Train a fusion head on cached features.

    ``train``/``val`` are ``((f_eeg, f_fnirs), labels)``. Returns the trained
    :class:`FusionNet` and the training result.
    """
    (f_eeg, f_fnirs), y = train
    if len(y) == 0:
        raise ValueError("fusion training set is empty")
    config = config or FusionConfig(f_eeg.shape[1], f_fnirs.shape[1], hidden)
    net = FusionNet(config, seed=seed, feature_stats=feature_stats(f_eeg, f_fnirs))
    result = train_model(net, ((f_eeg, f_fnirs), y), val, cfg or TrainConfig(seed=seed))
    return net, result

"""Checkpoints and feature caches on top of the tensor container."""
from __future__ import annotations

import numpy as np

from .backbone import BackboneConfig, MecasaNet, init_backbone
from .fusion import FusionConfig, FusionNet, init_fusion
from .io import FormatError, read_container, write_container

_NORM = ("norm.mean", "norm.std")


def _load_into(named, tensors, path):
    for name, p in named:
        if name not in tensors:
            raise FormatError(f"{path}: checkpoint lacks parameter {name}")
        if tensors[name].shape != p.shape:
            raise FormatError(f"{path}: {name} has shape {tensors[name].shape}, model expects {p.shape}")
        p.data[...] = tensors[name]


def save_backbone(path, net, stats=None, meta=None):
    """Parameters in declared order, then optional input standardization stats."""
    tensors = [(n, p.data) for n, p in net.named_parameters()]
    if stats is not None:
        tensors += list(zip(_NORM, stats))
    write_container(path, {"kind": "backbone", "config": net.config.to_dict(), "meta": meta or {}}, tensors)


def load_backbone(path):
    """Returns ``(net, stats or None, meta)``."""
    header, tensors = read_container(path)
    if header.get("kind") != "backbone":
        raise FormatError(f"{path}: not a backbone checkpoint")
    config = BackboneConfig.from_dict(header["config"])
    net = MecasaNet(config, init_backbone(config, seed=0))
    _load_into(net.named_parameters(), tensors, path)
    stats = (tensors[_NORM[0]], tensors[_NORM[1]]) if _NORM[0] in tensors else None
    return net, stats, header.get("meta", {})


def save_fusion(path, net, meta=None):
    tensors = [(n, p.data) for n, p in net.named_parameters()]
    tensors += [("features.mean", net.feature_stats[0]), ("features.std", net.feature_stats[1])]
    write_container(path, {"kind": "fusion", "config": net.config.to_dict(), "meta": meta or {}}, tensors)


def load_fusion(path):
    header, tensors = read_container(path)
    if header.get("kind") != "fusion":
        raise FormatError(f"{path}: not a fusion checkpoint")
    config = FusionConfig(**header["config"])
    net = FusionNet(config, init_fusion(config), feature_stats=(tensors["features.mean"], tensors["features.std"]))
    _load_into(net.named_parameters(), tensors, path)
    return net, header.get("meta", {})


def save_features(path, features, labels, modality, split):
    features = np.asarray(features)
    header = {
        "kind": "features",
        "modality": modality,
        "split": split,
        "n_epochs": int(features.shape[0]),
        "feature_dim": int(features.shape[1]),
    }
    write_container(path, header, [("features", features), ("labels", np.asarray(labels))])


def load_features(path):
    header, t = read_container(path)
    if header.get("kind") != "features":
        raise FormatError(f"{path}: not a feature cache")
    return t["features"], t["labels"].astype(np.int64), header

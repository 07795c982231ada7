"""Raw recording format, epoch datasets and stratified splits."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import read_container, read_json, write_container, write_json
from .signal import (
    Modality,
    SignalRecording,
    channel_stats,
    epoch_signal,
    preprocess_eeg,
    preprocess_fnirs,
    standardize,
)

log = logging.getLogger(__name__)

PAYLOAD_DTYPE = "float32"
BYTE_ORDER = "little"


class ManifestError(ValueError):
    pass


def _np_dtype():
    return np.dtype("<f4")


# -- raw recordings -----------------------------------------------------------


def save_recording(rec, root, name):
    """Write ``manifests/<name>.json`` and ``payloads/<name>.bin`` under ``root``."""
    root = Path(root)
    payload_rel = f"payloads/{name}.bin"
    (root / "payloads").mkdir(parents=True, exist_ok=True)
    (root / payload_rel).write_bytes(rec.data.astype(_np_dtype()).tobytes(order="C"))
    manifest = {
        "subject_id": rec.subject_id,
        "session_id": rec.session_id,
        "modality": rec.modality.value,
        "fs": rec.fs,
        "n_channels": rec.n_channels,
        "n_samples": rec.n_samples,
        "dtype": PAYLOAD_DTYPE,
        "byte_order": BYTE_ORDER,
        "labels": [iv.to_list() for iv in rec.intervals],
        "payload": payload_rel,
        "channel_names": list(rec.channel_names),
    }
    if rec.wavelengths is not None:
        manifest["wavelengths"] = [float(w) for w in rec.wavelengths]
    if rec.sites is not None:
        manifest["sites"] = list(rec.sites)
    write_json(root / "manifests" / f"{name}.json", manifest)
    return root / "manifests" / f"{name}.json"


def load_recording(manifest_path):
    """Load and strictly validate one recording; errors name the file."""
    manifest_path = Path(manifest_path)
    try:
        m = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"{manifest_path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from None

    def bad(msg):
        return ManifestError(f"{manifest_path}: {msg}")

    required = ("modality", "fs", "n_channels", "n_samples", "dtype", "byte_order", "labels", "payload")
    missing = [k for k in required if k not in m]
    if missing:
        raise bad(f"missing fields {missing}")
    try:
        modality = Modality(m["modality"])
    except ValueError:
        raise bad(f"unknown modality {m['modality']!r}") from None
    fs = float(m["fs"])
    if not fs > 0:
        raise bad(f"fs must be positive, got {m['fs']}")
    C, S = int(m["n_channels"]), int(m["n_samples"])
    if C < 1 or S < 1:
        raise bad(f"declared shape {C}x{S} is empty")
    if m["dtype"] != PAYLOAD_DTYPE or m["byte_order"] != BYTE_ORDER:
        raise bad(f"unsupported payload encoding {m['dtype']}/{m['byte_order']}")
    root = manifest_path.parent.parent
    payload_path = root / m["payload"]
    if not payload_path.exists():
        raise bad(f"payload {payload_path} not found")
    raw = payload_path.read_bytes()
    expected = C * S * _np_dtype().itemsize
    if len(raw) != expected:
        raise bad(f"payload length mismatch: {len(raw)} bytes, expected {expected} for {C}x{S} {PAYLOAD_DTYPE}")
    data = np.frombuffer(raw, dtype=_np_dtype()).reshape(C, S).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise bad("payload contains NaN or Inf")
    duration = S / fs
    for item in m["labels"]:
        start, end = float(item[0]), float(item[1])
        if not (0 <= start < end <= duration + 1e-9):
            raise bad(f"label interval [{start}, {end}] outside [0, {duration}]")
    try:
        return SignalRecording(
            data=data,
            fs=fs,
            modality=modality,
            channel_names=m.get("channel_names"),
            wavelengths=m.get("wavelengths"),
            sites=m.get("sites"),
            intervals=m["labels"],
            subject_id=m.get("subject_id", "sub-00"),
            session_id=m.get("session_id", "ses-00"),
        )
    except ValueError as exc:
        raise bad(str(exc)) from None


def list_manifests(root, modality=None):
    paths = sorted((Path(root) / "manifests").glob("*.json"))
    if modality is None:
        return paths
    wanted = {"eeg": {Modality.EEG.value}, "fnirs": {Modality.FNIRS_RAW.value}}.get(modality, {modality})
    return [p for p in paths if json.loads(p.read_text()).get("modality") in wanted]


def validate_root(root):
    """Load every manifest under ``root``; return a list of error strings."""
    root = Path(root)
    if not (root / "manifests").is_dir():
        return [f"{root}: no manifests/ directory"]
    problems = []
    paths = list_manifests(root)
    if not paths:
        problems.append(f"{root}/manifests: no manifests found")
    for p in paths:
        try:
            load_recording(p)
        except (ManifestError, ValueError) as exc:
            problems.append(str(exc))
    return problems


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.70, 0.15, 0.15)
    k: int = None
    seed: int = 0

    def __post_init__(self):
        if self.k is not None:
            if self.k < 2:
                raise ValueError(f"k-fold needs k >= 2, got {self.k}")
        else:
            if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
                raise ValueError(f"ratios must be three non-negative numbers, got {self.ratios}")
            if abs(sum(self.ratios) - 1.0) > 1e-9:
                raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")


def _classes(labels):
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size == 0:
        raise ValueError("cannot split an empty dataset")
    return labels, classes


def stratified_holdout(labels, ratios=(0.70, 0.15, 0.15), seed=0):
    """Per-class shuffled train/val/test index arrays (each sorted)."""
    labels, classes = _classes(labels)
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_tr = int(round(len(idx) * ratios[0]))
        n_va = int(round(len(idx) * ratios[1]))
        n_va = min(n_va, len(idx) - n_tr)
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr : n_tr + n_va])
        parts[2].append(idx[n_tr + n_va :])
    return {name: np.sort(np.concatenate(p)) for name, p in zip(("train", "val", "test"), parts)}


def stratified_kfold(labels, k=5, seed=0):
    """List of k sorted test-index arrays; each class is dealt evenly across folds."""
    labels, classes = _classes(labels)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ValueError(f"class {c} has {len(idx)} epochs, fewer than {k} folds")
        for f, chunk in enumerate(np.array_split(rng.permutation(idx), k)):
            folds[f].append(chunk)
    return [np.sort(np.concatenate(f)) for f in folds]


def kfold_partitions(labels, k=5, seed=0, val_fraction=0.15):
    """Per fold: test = that fold, val = stratified share of the remainder, train = rest."""
    labels = np.asarray(labels)
    out = []
    for i, test in enumerate(stratified_kfold(labels, k, seed)):
        rest = np.setdiff1d(np.arange(len(labels)), test)
        inner = stratified_holdout(labels[rest], (1 - val_fraction, val_fraction, 0.0), seed + 1000 + i)
        out.append({"train": rest[inner["train"]], "val": rest[inner["val"]], "test": test})
    return out


def check_partition(parts, n, labels=None, tol=0.02):
    """Raise if index sets overlap, fail to cover ``range(n)`` or drift off the class ratio."""
    allidx = np.concatenate([np.asarray(p) for p in parts])
    if len(allidx) != len(np.unique(allidx)):
        raise AssertionError("split leakage: index sets overlap")
    if len(allidx) != n or not np.array_equal(np.sort(allidx), np.arange(n)):
        raise AssertionError("split does not cover the dataset")
    if labels is not None:
        labels = np.asarray(labels)
        glob = labels.mean()
        for p in parts:
            if len(p) and abs(labels[p].mean() - glob) > tol:
                raise AssertionError(f"class ratio {labels[p].mean():.3f} deviates from global {glob:.3f}")


# -- epoch datasets -----------------------------------------------------------


@dataclass
class EpochDataset:
    """Epoch array (n, 1, C, T), labels, provenance keys and split indices."""

    epochs: np.ndarray
    labels: np.ndarray
    keys: np.ndarray  # (n, 3): recording, interval, window index
    modality: str
    representation: str = None
    fs: float = None
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        if not (len(self.epochs) == len(self.labels) == len(self.keys)):
            raise ValueError("epochs, labels and keys disagree in length")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.epochs.shape[2:])

    @property
    def name(self):
        return self.modality if self.representation is None else f"{self.modality}_{self.representation}"


def stratified_split(ds, spec):
    """Attach split indices to ``ds``: ``train/val/test`` or ``folds``."""
    if spec.k is None:
        ds.splits = {k: v.tolist() for k, v in stratified_holdout(ds.labels, spec.ratios, spec.seed).items()}
        check_partition([np.asarray(v, dtype=np.int64) for v in ds.splits.values()], len(ds), ds.labels)
    else:
        folds = stratified_kfold(ds.labels, spec.k, spec.seed)
        check_partition(folds, len(ds), ds.labels)
        ds.splits = {"folds": [f.tolist() for f in folds]}
    return ds


def build_epoch_dataset(recordings, modality, representation=None, prep=None, window_s=None, step_s=None):
    """Run the preprocessing chain on each recording and epoch it."""
    xs, ys, keys = [], [], []
    fs = None
    for r_idx, rec in enumerate(recordings):
        if modality == "eeg":
            out = preprocess_eeg(rec, prep)
        elif modality == "fnirs":
            out = preprocess_fnirs(rec, representation, prep)
        else:
            raise ValueError(f"unknown modality {modality!r}")
        fs = out.fs
        w = window_s if window_s is not None else (prep.window_s if prep else 1.0)
        s = step_s if step_s is not None else (prep.step_s if prep else 0.5)
        for ep in epoch_signal(out, window_s=w, step_s=s):
            xs.append(ep.data)
            ys.append(ep.label)
            keys.append((r_idx, ep.trial_id, ep.window_index))
    if not xs:
        raise ValueError("no epochs produced")
    return EpochDataset(np.stack(xs), ys, keys, modality, representation if modality == "fnirs" else None, fs)


def save_epoch_dataset(ds, path):
    header = {
        "kind": "epochs",
        "modality": ds.modality,
        "representation": ds.representation,
        "fs": ds.fs,
        "n_epochs": len(ds),
    }
    write_container(path, header, [("epochs", ds.epochs), ("labels", ds.labels), ("keys", ds.keys)])


def load_epoch_dataset(path):
    header, t = read_container(path)
    if header.get("kind") != "epochs":
        raise ValueError(f"{path}: not an epoch store")
    return EpochDataset(t["epochs"], t["labels"], t["keys"], header["modality"], header["representation"], header["fs"])


def dataset_filename(modality, representation=None):
    return f"{modality}.epochs" if modality == "eeg" else f"fnirs_{representation}.epochs"


def load_splits(prep_dir):
    return read_json(Path(prep_dir) / "splits.json")


def fold_arrays(ds, parts):
    """Standardize with the train-part statistics; returns {split: (x, y)} and the stats."""
    train = np.asarray(parts["train"], dtype=np.int64)
    stats = channel_stats(ds.epochs[train])
    out = {}
    for name, idx in parts.items():
        idx = np.asarray(idx, dtype=np.int64)
        out[name] = (standardize(ds.epochs[idx], stats), ds.labels[idx])
    return out, stats

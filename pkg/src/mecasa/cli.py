"""``mecasa`` command line: synth, validate, preprocess, train, fuse, ablate, bench.

Settings resolve as command-line flags over config file (TOML or JSON) over
built-in defaults. A config file may hold flat keys and/or a table named
after the subcommand; the table wins over flat keys. Every report echoes
the effective settings. Log level comes from ``MECASA_LOG_LEVEL``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import TABLE2_DIMS, BackboneConfig, MecasaNet, parse_dims, shape_audit
from .bench import bench_attention, bench_kernels, format_attention, format_kernels
from .checkpoint import load_backbone, save_backbone, save_features, save_fusion
from .data import (
    build_epoch_dataset,
    check_partition,
    dataset_filename,
    kfold_partitions,
    list_manifests,
    load_epoch_dataset,
    load_recording,
    save_epoch_dataset,
    stratified_holdout,
    validate_root,
)
from .fusion import train_fusion
from .io import read_json, write_json
from .signal import REPRESENTATIONS, PrepConfig, channel_stats, standardize
from .synth import synth_hybrid_dataset, write_synth
from .train import MetricsReport, TrainConfig, confusion_matrix, cross_validate, predict_proba

log = logging.getLogger("mecasa")

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class CliError(Exception):
    """User-facing failure; message printed, exit code 2."""


DEFAULTS = {
    "synth": {"trials": 200, "snr": 2.0, "seed": 0, "trials_per_recording": 10},
    "validate": {},
    "preprocess": {"modality": "all", "repr": "all", "seed": 0, "folds": 5, "val_fraction": 0.15},
    "train": {
        "modality": "eeg", "repr": None, "dims": "64-128", "blocks": "2,2", "mlp_ratio": 2.0,
        "epochs": 100, "batch_size": 16, "lr": 1e-4, "seed": 0,
    },
    "fuse": {"hidden": 64, "epochs": 100, "batch_size": 16, "lr": 1e-4, "seed": 0},
    "ablate": {
        "grid": "both", "modality": "eeg", "repr": None, "dims": "64-128", "blocks": "2,2",
        "mlp_ratio": 2.0, "epochs": 100, "batch_size": 16, "lr": 1e-4, "seed": 0,
    },
    "bench": {"n": "256,512,1024,2048,4096,8192", "d": 64, "reps": 20, "kernels": False, "seed": 0},
}

# Keys that never enter reports (machine-specific paths of outputs).
_UNECHOED = {"out", "config"}


# -- configuration ------------------------------------------------------------


def load_config_file(path, command):
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    text = path.read_text()
    try:
        raw = tomllib.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot parse config {path}: {exc}") from None
    flat = {k.replace("-", "_"): v for k, v in raw.items() if not isinstance(v, dict) or k == "prep"}
    section = raw.get(command, {})
    flat.update({k.replace("-", "_"): v for k, v in section.items()})
    return flat


def resolve_config(command, args):
    """defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS.get(command, {}))
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "func") and v is not None}
    if flags.get("config"):
        cfg.update(load_config_file(flags["config"], command))
    cfg.update(flags)
    return cfg


def echoed(cfg):
    return {k: v for k, v in sorted(cfg.items()) if k not in _UNECHOED}


def _out_dir(cfg):
    if not cfg.get("out"):
        raise CliError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_dir(path, what):
    if path is None:
        raise CliError(f"{what} is required")
    path = Path(path)
    if not path.is_dir():
        raise CliError(f"missing {what}: {path}")
    return path


def _train_config(cfg):
    return TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]), seed=int(cfg["seed"]))


def _backbone_config(ds, cfg):
    h, w = ds.input_shape
    blocks = tuple(int(b) for b in str(cfg["blocks"]).split(","))
    config = BackboneConfig(h, w, parse_dims(cfg["dims"]), blocks, float(cfg["mlp_ratio"]))
    shape_audit(config)
    return config


def _check_modality(cfg):
    modality = cfg["modality"]
    if modality not in ("eeg", "fnirs"):
        raise CliError(f"modality must be eeg or fnirs, got {modality!r}")
    rep = cfg.get("repr")
    if modality == "eeg":
        if rep is not None:
            raise CliError(f"--repr applies to fnirs only, got repr={rep!r} with modality eeg")
        return modality, None
    rep = rep or "od128"
    if rep not in REPRESENTATIONS:
        raise CliError(f"fNIRS representation must be one of {REPRESENTATIONS}, got {rep!r}")
    return modality, rep


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg):
    out = _out_dir(cfg)
    ds = synth_hybrid_dataset(int(cfg["trials"]), int(cfg["seed"]), float(cfg["snr"]), int(cfg["trials_per_recording"]))
    write_synth(ds, out)
    info = {"recordings": len(ds.eeg), "config": echoed(cfg)}
    write_json(out / "synth.json", info)
    print(f"wrote {len(ds.eeg)} EEG and {len(ds.fnirs)} fNIRS recordings to {out}")
    return 0


def cmd_validate(cfg):
    root = _need_dir(cfg.get("root"), "dataset root")
    problems = validate_root(root)
    for p in problems:
        print(f"INVALID {p}")
    n = len(list_manifests(root))
    print(f"{n} manifests checked, {len(problems)} problems")
    return 1 if problems else 0


def _requested_sets(cfg):
    modality = cfg["modality"]
    reprs = REPRESENTATIONS if cfg["repr"] == "all" else (cfg["repr"],)
    if cfg["repr"] != "all" and cfg["repr"] not in REPRESENTATIONS:
        raise CliError(f"fNIRS representation must be one of {REPRESENTATIONS} or all")
    sets = []
    if modality in ("eeg", "all"):
        sets.append(("eeg", None))
    if modality in ("fnirs", "all"):
        sets.extend(("fnirs", r) for r in reprs)
    if not sets:
        raise CliError(f"modality must be eeg, fnirs or all, got {modality!r}")
    return sets


def cmd_preprocess(cfg):
    root = _need_dir(cfg.get("root"), "raw dataset root")
    out = _out_dir(cfg)
    problems = validate_root(root)
    if problems:
        for p in problems:
            print(f"INVALID {p}", file=sys.stderr)
        return 1
    prep = PrepConfig.from_dict(cfg["prep"]) if "prep" in cfg else PrepConfig()
    recordings = {}
    keys = None
    summary = {}
    for modality, rep in _requested_sets(cfg):
        if modality not in recordings:
            recs = [load_recording(p) for p in list_manifests(root, modality)]
            if not recs:
                raise CliError(f"no {modality} recordings under {root}")
            recordings[modality] = recs
        ds = build_epoch_dataset(recordings[modality], modality, rep, prep)
        if keys is None:
            keys, labels = ds.keys, ds.labels
        elif not (np.array_equal(keys, ds.keys) and np.array_equal(labels, ds.labels)):
            raise CliError(f"{ds.name}: epoch order differs from other modalities; cannot share splits")
        save_epoch_dataset(ds, out / dataset_filename(modality, rep))
        summary[ds.name] = {"epochs": len(ds), "shape": [1, *ds.input_shape], "fs": ds.fs}
        print(f"{ds.name}: {len(ds)} epochs of shape {(1, *ds.input_shape)}")
    seed, k = int(cfg["seed"]), int(cfg["folds"])
    holdout = stratified_holdout(labels, seed=seed)
    folds = kfold_partitions(labels, k, seed, float(cfg["val_fraction"]))
    check_partition(list(holdout.values()), len(labels), labels)
    for f in folds:
        check_partition(list(f.values()), len(labels))
    write_json(out / "splits.json", {
        "seed": seed,
        "k": k,
        "holdout": {n: v.tolist() for n, v in holdout.items()},
        "folds": [{n: v.tolist() for n, v in f.items()} for f in folds],
    })
    write_json(out / "preprocess.json", {"datasets": summary, "prep": prep.to_dict(), "config": echoed(cfg)})
    return 0


def _load_prepared(data_dir, modality, rep):
    path = data_dir / dataset_filename(modality, rep)
    if not path.exists():
        raise CliError(f"missing artifact: {path} (run `mecasa preprocess` first)")
    ds = load_epoch_dataset(path)
    splits = read_json(data_dir / "splits.json")
    parts = [{n: np.asarray(v, dtype=np.int64) for n, v in f.items()} for f in splits["folds"]]
    return ds, parts


def run_training(cfg, data_dir, out=None, metrics_file=None):
    """Cross-validate one (modality, representation, dims) cell; returns the report dict."""
    modality, rep = _check_modality(cfg)
    ds, parts = _load_prepared(data_dir, modality, rep)
    config = _backbone_config(ds, cfg)
    tcfg = _train_config(cfg)

    def on_fold(i, model, fold_parts, stats, acc):
        if out is not None:
            save_backbone(out / "checkpoints" / f"fold{i}.ckpt", model, stats,
                          {"modality": modality, "repr": rep, "fold": i, "test_acc": acc})

    def on_epoch(rec):
        if metrics_file is not None:
            metrics_file.write(json.dumps(rec, sort_keys=True) + "\n")
            metrics_file.flush()

    report = cross_validate(
        lambda i: MecasaNet(config, seed=int(cfg["seed"]) + i), ds, cfg=tcfg,
        on_fold=on_fold, on_epoch=on_epoch, partitions=parts,
    )
    report.extra = {
        "dataset": ds.name,
        "input_shape": [1, *ds.input_shape],
        "backbone": config.to_dict(),
        "config": echoed(cfg),
    }
    return report


def cmd_train(cfg):
    data_dir = _need_dir(cfg.get("data"), "preprocessed data directory")
    out = _out_dir(cfg)
    with open(out / "metrics.jsonl", "w") as mf:
        report = run_training(cfg, data_dir, out, mf)
    write_json(out / "report.json", report.to_dict())
    write_json(out / "timing.json", {"runtime_s": report.runtime_s})
    print(f"{report.extra['dataset']} dims {cfg['dims']}: accuracy {report.summary()} %")
    return 0


def _fold_features(run_dir, fold, data_dir, parts):
    ckpt = run_dir / "checkpoints" / f"fold{fold}.ckpt"
    if not ckpt.exists():
        raise CliError(f"missing artifact: {ckpt}")
    net, stats, meta = load_backbone(ckpt)
    ds, _ = _load_prepared(data_dir, meta["modality"], meta.get("repr"))
    if stats is None:
        stats = channel_stats(ds.epochs[parts["train"]])
    feats = {name: net.features(standardize(ds.epochs[idx], stats)) for name, idx in parts.items()}
    return feats, ds.labels, meta


def cmd_fuse(cfg):
    data_dir = _need_dir(cfg.get("data"), "preprocessed data directory")
    eeg_run = _need_dir(cfg.get("eeg_run"), "EEG run directory")
    fnirs_run = _need_dir(cfg.get("fnirs_run"), "fNIRS run directory")
    out = _out_dir(cfg)
    splits = read_json(data_dir / "splits.json")
    parts_all = [{n: np.asarray(v, dtype=np.int64) for n, v in f.items()} for f in splits["folds"]]
    unimodal = {"eeg": read_json(eeg_run / "report.json"), "fnirs": read_json(fnirs_run / "report.json")}
    tcfg = _train_config(cfg)
    t0 = time.perf_counter()
    accs, cm = [], np.zeros((2, 2), dtype=np.int64)
    for i, parts in enumerate(parts_all):
        fe, labels, me = _fold_features(eeg_run, i, data_dir, parts)
        ff, labels_f, mf = _fold_features(fnirs_run, i, data_dir, parts)
        if me["modality"] != "eeg" or mf["modality"] != "fnirs":
            raise CliError("--eeg-run and --fnirs-run must hold EEG and fNIRS checkpoints respectively")
        if not np.array_equal(labels, labels_f):
            raise CliError("EEG and fNIRS epoch labels disagree; datasets were not preprocessed together")
        for name, idx in parts.items():
            save_features(out / "features" / f"eeg_fold{i}_{name}.feat", fe[name], labels[idx], "eeg", name)
            save_features(out / "features" / f"fnirs_fold{i}_{name}.feat", ff[name], labels[idx], "fnirs", name)
        y = {name: labels[idx] for name, idx in parts.items()}
        fold_cfg = TrainConfig(**{**tcfg.to_dict(), "seed": tcfg.seed + i})
        net, _ = train_fusion(
            ((fe["train"], ff["train"]), y["train"]), ((fe["val"], ff["val"]), y["val"]),
            cfg=fold_cfg, seed=tcfg.seed + i, hidden=int(cfg["hidden"]),
        )
        pred = predict_proba(net, (fe["test"], ff["test"])).argmax(axis=1)
        accs.append(float(np.mean(pred == y["test"])))
        cm += confusion_matrix(y["test"], pred)
        save_fusion(out / "checkpoints" / f"fold{i}.ckpt", net, {"fold": i, "test_acc": accs[-1]})
    report = MetricsReport.from_folds(accs, cm, time.perf_counter() - t0)
    best_uni = max(unimodal["eeg"]["mean"], unimodal["fnirs"]["mean"])
    report.extra = {
        "unimodal": {m: {"mean": r["mean"], "ci_half_width": r["ci_half_width"], "dataset": r.get("dataset")}
                     for m, r in unimodal.items()},
        "fused_minus_best_unimodal": report.mean - best_uni,
        "config": echoed(cfg),
    }
    write_json(out / "report.json", report.to_dict())
    write_json(out / "timing.json", {"runtime_s": report.runtime_s})
    print(f"EEG {100 * unimodal['eeg']['mean']:.2f} %, fNIRS {100 * unimodal['fnirs']['mean']:.2f} %, "
          f"fused {report.summary()} %")
    return 0


# -- ablation -----------------------------------------------------------------


def ablation_cells(grid, cfg):
    """Cells as ``(table, row label, cell settings)``."""
    cells = []
    if grid in ("dims", "both"):
        modality = cfg["modality"] if cfg["modality"] in ("eeg", "fnirs") else "eeg"
        rep = (cfg.get("repr") or "od128") if modality == "fnirs" else None
        for dims in TABLE2_DIMS:
            cells.append(("dims", dims, {**cfg, "modality": modality, "repr": rep, "dims": dims}))
    if grid in ("repr", "both"):
        for rep in REPRESENTATIONS:
            cells.append(("repr", rep.upper(), {**cfg, "modality": "fnirs", "repr": rep}))
    if not cells:
        raise CliError(f"grid must be dims, repr or both, got {grid!r}")
    return cells


def run_ablation(cells, runner):
    """Run every cell; a failing cell becomes a FAILED row without stopping the rest."""
    tables = {}
    for table, label, cell_cfg in cells:
        try:
            report = runner(cell_cfg)
            row = {"row": label, "status": "ok", "mean": report.mean, "ci_half_width": report.ci_half_width,
                   "fold_accuracies": report.fold_accuracies}
        except Exception as exc:  # noqa: BLE001 - isolation is the point
            log.error("cell %s/%s failed: %s", table, label, exc)
            row = {"row": label, "status": "FAILED", "error": f"{type(exc).__name__}: {exc}"}
        tables.setdefault(table, []).append(row)
    return tables


def format_tables(tables, cfg):
    titles = {
        "dims": f"Embedding dims ablation ({cfg.get('modality', 'eeg')})",
        "repr": f"fNIRS representation ablation (dims {cfg.get('dims')})",
    }
    heads = {"dims": "Embedding Dims", "repr": "Representation"}
    lines = []
    for name, rows in tables.items():
        lines.append(titles[name])
        lines.append(f"{heads[name]:<16} {'Accuracy (%)':>18}")
        for r in rows:
            cell = f"{100 * r['mean']:.2f} ± {100 * r['ci_half_width']:.2f}" if r["status"] == "ok" else "FAILED"
            lines.append(f"{r['row']:<16} {cell:>18}")
        lines.append("")
    return "\n".join(lines)


def cmd_ablate(cfg):
    data_dir = _need_dir(cfg.get("data"), "preprocessed data directory")
    out = _out_dir(cfg)
    tables = run_ablation(ablation_cells(cfg["grid"], cfg), lambda c: run_training(c, data_dir))
    text = format_tables(tables, cfg)
    write_json(out / "ablation.json", {"tables": tables, "config": echoed(cfg)})
    (out / "ablation.txt").write_text(text)
    print(text)
    failed = sum(r["status"] != "ok" for rows in tables.values() for r in rows)
    return 1 if failed else 0


def cmd_bench(cfg):
    out = _out_dir(cfg)
    tokens = [int(n) for n in str(cfg["n"]).split(",")]
    report = bench_attention(tokens, int(cfg["d"]), int(cfg["reps"]), int(cfg["seed"]))
    text = format_attention(report)
    result = {"attention": report, "config": echoed(cfg)}
    if cfg["kernels"]:
        kreport = bench_kernels(reps=int(cfg["reps"]))
        result["kernels"] = kreport
        text += "\n\n" + format_kernels(kreport)
    write_json(out / "bench.json", result)
    (out / "bench.txt").write_text(text + "\n")
    print(text)
    return 0


# -- argument parsing ---------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="TOML or JSON file with settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _add_model(p):
    p.add_argument("--modality", choices=("eeg", "fnirs"))
    p.add_argument("--repr", choices=REPRESENTATIONS, help="fNIRS representation")
    p.add_argument("--dims", help="stage dims, e.g. 64-128")
    p.add_argument("--blocks", help="blocks per stage, e.g. 2,2")
    p.add_argument("--mlp-ratio", dest="mlp_ratio", type=float)


def _add_training(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="mecasa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mecasa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic hybrid EEG/fNIRS raw dataset")
    _add_common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--snr", type=float)
    p.add_argument("--trials-per-recording", dest="trials_per_recording", type=int)

    p = sub.add_parser("validate", help="check every manifest and payload under a dataset root")
    p.add_argument("--root")
    p.add_argument("--config")

    p = sub.add_parser("preprocess", help="filter, resample, epoch and split a raw dataset")
    _add_common(p)
    p.add_argument("--root", help="raw dataset root")
    p.add_argument("--modality", choices=("eeg", "fnirs", "all"))
    p.add_argument("--repr", choices=(*REPRESENTATIONS, "all"))
    p.add_argument("--folds", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)

    p = sub.add_parser("train", help="cross-validate a unimodal MECASA model")
    _add_common(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--data", help="preprocessed data directory")

    p = sub.add_parser("fuse", help="train fusion heads on frozen EEG and fNIRS backbones")
    _add_common(p)
    _add_training(p)
    p.add_argument("--data", help="preprocessed data directory")
    p.add_argument("--eeg-run", dest="eeg_run")
    p.add_argument("--fnirs-run", dest="fnirs_run")
    p.add_argument("--hidden", type=int)

    p = sub.add_parser("ablate", help="embedding-dims and fNIRS-representation ablation tables")
    _add_common(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--data", help="preprocessed data directory")
    p.add_argument("--grid", choices=("dims", "repr", "both"))

    p = sub.add_parser("bench", help="attention scaling benchmark")
    _add_common(p)
    p.add_argument("--n", help="comma-separated token counts")
    p.add_argument("--d", type=int, help="channel dimension")
    p.add_argument("--reps", type=int)
    p.add_argument("--kernels", action="store_const", const=True, help="also compare kernel backends")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "validate": cmd_validate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("MECASA_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except (CliError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

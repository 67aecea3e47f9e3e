"""Command-line entry point: train, evaluate, robustness, synth, export-curves."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .container import ContainerError
from .data import CorruptionSpec, DataError, Dataset, SynthConfig, corrupt_labels, synth_generate
from .metrics import format_table, metrics_report, roc_points, task_metrics, write_metrics_csv
from .model import ConfigError, ShapeError, load_checkpoint, predict
from .numeric import NumericError
from .train import (
    CHECKPOINT_FILE,
    CONFIG_FILE,
    RECORD_FILE,
    RunRecord,
    dump_config,
    load_config,
    load_dataset,
    prepare_dataset,
    resolve_config,
    train_model,
)

log = logging.getLogger("softsense")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "SOFTSENSE_SEED"


def _seeds_from_env(cfg: dict) -> dict:
    raw = os.environ.get(SEED_ENV)
    if raw:
        try:
            cfg["seeds"] = [int(s) for s in raw.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer or comma-separated integers, got {raw!r}") from None
    return cfg


def _run_config(args) -> dict:
    cfg = load_config(args.config)
    if getattr(args, "schedule_per_batch", False):
        cfg["schedule"]["per_batch"] = True
    if getattr(args, "output_dir", None):
        cfg["output_dir"] = args.output_dir
    cfg = _seeds_from_env(cfg)
    # round trip through the resolver so every override is validated too
    return resolve_config(cfg)


def _seed_dirs(out: Path, seeds: list) -> list:
    return [out] if len(seeds) == 1 else [out / f"seed-{s}" for s in seeds]


def cmd_train(args) -> int:
    cfg = _run_config(args)
    ds = prepare_dataset(cfg)
    out = Path(cfg["output_dir"])
    per_seed = []
    for seed, run_dir in zip(cfg["seeds"], _seed_dirs(out, cfg["seeds"])):
        _, record = train_model(cfg, ds, seed, out_dir=run_dir)
        per_seed.append(record.task_metrics())
        print(f"seed {seed}: {record.early_stop['epochs_run']} epochs, best epoch "
              f"{record.early_stop['best_epoch']}, mean AUROC {_num(record.task_metrics().mean_auroc())}")
    report = metrics_report(per_seed)
    if len(per_seed) > 1:
        (out / "summary.json").write_text(
            json.dumps({"seeds": cfg["seeds"], "metrics": report.to_dict()}, indent=2, sort_keys=True),
            encoding="utf-8",
        )
    print(format_table(report if len(per_seed) > 1 else per_seed[0]))
    return EXIT_OK


def _num(v):
    return "--" if v is None else f"{v:.4f}"


def cmd_evaluate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = Dataset.load(args.data)
    X, y, m = ds.subset(args.split)
    if X.shape[1:] != (state.config.timesteps, state.config.input_features):
        raise ShapeError(
            f"dataset samples are {list(X.shape[1:])}, checkpoint expects "
            f"[{state.config.timesteps}, {state.config.input_features}]"
        )
    if y.shape[1] != state.config.num_tasks:
        raise ShapeError(f"dataset has {y.shape[1]} tasks, checkpoint expects {state.config.num_tasks}")
    scores = predict(state, X) if len(X) else np.zeros((0, state.config.num_tasks))
    metrics = task_metrics(scores, y, m, args.threshold)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"metrics-{args.split}.csv"
    write_metrics_csv(metrics, out)
    print(format_table(metrics))
    print(f"wrote {out}")
    return EXIT_OK


def robustness_grid(cfg: dict, out_dir: Path | None = None) -> dict:
    """Train every (fraction, loss mode, seed) cell; returns the nested result dict."""
    base = load_dataset(cfg)
    rob = cfg["robustness"]
    task = cfg["corruption"]["task"] if cfg["corruption"] else None
    cells = []
    for p in rob["fractions"]:
        for mode in rob["loss_modes"]:
            for seed in cfg["seeds"]:
                spec = CorruptionSpec(p, task, seed)
                # each cell records its own corruption so the run can be replayed alone
                cell_cfg = dict(cfg, corruption=spec.to_dict(), loss=dict(cfg["loss"], mode=mode))
                run_dir = None if out_dir is None else out_dir / f"p{p:g}-{mode}-seed{seed}"
                _, rec = train_model(cell_cfg, corrupt_labels(base, spec), seed, mode, out_dir=run_dir)
                tm = rec.task_metrics()
                r = tm.recall[task] if task is not None else tm.mean_recall()
                cells.append({"fraction": p, "loss_mode": mode, "seed": seed, "recall": r,
                              "recall_per_task": tm.recall, "auroc_per_task": tm.auroc})
                log.info("p=%g %s seed %d: recall %s", p, mode, seed, r)
    return {"task": task, "cells": cells}


def _grid_table(result: dict, fractions, modes) -> tuple[list, list]:
    head = ["fraction"] + list(modes)
    rows = []
    for p in fractions:
        row = [f"{p:g}"]
        for mode in modes:
            vals = [c["recall"] for c in result["cells"]
                    if c["fraction"] == p and c["loss_mode"] == mode and c["recall"] is not None]
            row.append("--" if not vals else f"{np.mean(vals):.3f}±{np.std(vals):.3f}")
        rows.append(row)
    return head, rows


def cmd_robustness(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(dump_config(cfg), encoding="utf-8")
    result = robustness_grid(cfg, out)
    (out / "robustness.json").write_text(json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
    head, rows = _grid_table(result, cfg["robustness"]["fractions"], cfg["robustness"]["loss_modes"])
    with open(out / "robustness.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        w.writerows(rows)
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    for r in [head] + rows:
        print("  ".join(c.rjust(wd) for c, wd in zip(r, widths)))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        cfg = SynthConfig(**spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from None
    ds = synth_generate(cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds.save(args.out)
    print(ds.summary())
    return EXIT_OK


def cmd_export_curves(args) -> int:
    run = Path(args.run)
    if not (run / RECORD_FILE).exists():
        raise DataError(f"{run}: no {RECORD_FILE} in run directory")
    record = RunRecord.load(run / RECORD_FILE)
    out = Path(args.out) if args.out else run / "curves"
    out.mkdir(parents=True, exist_ok=True)
    fields = ["epoch", "train_loss", "val_loss", "lr", "mean_weight"]
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for e in record.epochs:
            w.writerow([e["epoch"]] + [repr(float(e[k])) for k in fields[1:]])

    cfg = resolve_config(json.loads((run / CONFIG_FILE).read_text(encoding="utf-8")))
    state = load_checkpoint(run / CHECKPOINT_FILE)
    X, y, m = prepare_dataset(cfg).subset(record.eval_split)
    scores = predict(state, X)
    for j in range(y.shape[1]):
        keep = m[:, j] > 0
        with open(out / f"roc-task{j + 1}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            if keep.any() and 0 < y[keep, j].sum() < keep.sum():
                for f, t, th in zip(*roc_points(scores[keep, j], y[keep, j])):
                    w.writerow([repr(float(th)), repr(float(f)), repr(float(t))])
    print(f"wrote curves for {y.shape[1]} tasks to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softsense", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model per configured seed")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir")
    t.add_argument("--schedule-per-batch", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="per-task AUROC and recall of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset cache file")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", help="metrics CSV path")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("robustness", help="label-corruption grid over fractions and loss modes")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir")
    r.add_argument("--schedule-per-batch", action="store_true")
    r.set_defaults(func=cmd_robustness)

    s = sub.add_parser("synth", help="write a synthetic dataset cache")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("export-curves", help="loss/lr and ROC CSVs for a finished run")
    c.add_argument("--run", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_export_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContainerError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

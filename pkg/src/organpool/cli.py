"""Command-line entry point.

Subcommands: synth, train, calibrate, eval, ablate, report, gradcheck,
export-maps.  Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .calibration import CalibrationTable, apply_calibration, fit_calibration
from .errors import ConfigError, DataError, NumericError
from .experiment import (ExperimentConfig, checkpoint_split_logits, config_from_dict,
                         export_weight_maps, gradcheck_modes, merge_run_reports,
                         run_ablation, run_experiment)
from .metrics import evaluate_labels, report_to_csv, report_to_json, report_to_text
from .synth import SynthSpec, synth_generate


def _read_config_dict(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return raw


def _parse_scalars(text: str) -> tuple[str, ...]:
    if text in ("", "none"):
        return ()
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _experiment_config(args) -> ExperimentConfig:
    raw = _read_config_dict(args.config) if args.config else {}
    if args.dataset is not None:
        raw["dataset"] = args.dataset
    if args.out is not None:
        raw["out_dir"] = args.out
    if getattr(args, "mode", None) is not None:
        raw["mode"] = args.mode
    if getattr(args, "region", None) is not None:
        raw["region"] = args.region
    if getattr(args, "scalars", None) is not None:
        raw["scalar_set"] = list(_parse_scalars(args.scalars))
    if args.seed is not None:
        raw.setdefault("optim", {})["seed"] = args.seed
    if "dataset" not in raw:
        raise ConfigError("a dataset is required (--dataset or config file)")
    if "out_dir" not in raw:
        raise ConfigError("an output directory is required (--out or config file)")
    return config_from_dict(raw)


def _cmd_synth(args) -> int:
    fields = {name: getattr(args, attr)
              for name, attr in (("n_train", "n_train"), ("n_val", "n_val"),
                                 ("n_test", "n_test"), ("d", "d"),
                                 ("signal", "signal"), ("distractor", "distractor"),
                                 ("missing_rate", "missing_rate"), ("seed", "seed"))
              if getattr(args, attr) is not None}
    spec = SynthSpec(**fields)
    manifest = synth_generate(spec, args.out)
    print(f"wrote dataset: {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = _experiment_config(args)
    artifacts = run_experiment(cfg)
    macro = artifacts.test_report.macro.get("auroc")
    shown = "undefined" if macro is None else f"{macro:.4f}"
    print(f"run complete: {artifacts.out_dir}")
    print(f"test macro auroc [{cfg.mode}]: {shown}")
    return 0


def _cmd_calibrate(args) -> int:
    logits, targets, schema, _ = checkpoint_split_logits(args.checkpoint, args.dataset,
                                                         args.split)
    table = fit_calibration(logits, targets, schema.labels,
                            max_iter=args.max_iter, min_count=args.min_count)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "calibration.json")
    table.save(path)
    print(f"wrote calibration table: {path}")
    return 0


def _cmd_eval(args) -> int:
    logits, targets, schema, meta = checkpoint_split_logits(args.checkpoint,
                                                            args.dataset, args.split)
    table = CalibrationTable.load(args.calibration)
    if tuple(table.labels) != schema.labels:
        raise ConfigError("calibration table labels do not match the dataset schema")
    probs, _ = apply_calibration(logits, table)
    report = evaluate_labels(probs, targets, list(schema.labels), table.thresholds)
    os.makedirs(args.out, exist_ok=True)
    base = os.path.join(args.out, f"{args.split}_metrics")
    with open(base + ".json", "w", encoding="utf-8") as f:
        f.write(report_to_json(report) + "\n")
    title = f"{args.split} metrics [{meta.get('osf_head', '')}]".rstrip(" []")
    with open(base + ".txt", "w", encoding="utf-8") as f:
        f.write(report_to_text(report, title=title))
    with open(os.path.join(args.out, "per_class.csv"), "w", encoding="utf-8") as f:
        f.write(report_to_csv(report))
    macro = report.macro.get("auroc")
    print(f"{args.split} macro auroc: "
          f"{'undefined' if macro is None else f'{macro:.4f}'}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _experiment_config(args)
    scalar_sets = ()
    if args.scalar_sets:
        scalar_sets = tuple(_parse_scalars(part)
                            for part in args.scalar_sets.split(";") if part.strip())
    artifacts = run_ablation(cfg, ladder=not args.no_ladder,
                             regions=args.regions, scalar_sets=scalar_sets)
    print(f"ablation complete: {len(artifacts)} runs under {cfg.out_dir}")
    ladder_txt = os.path.join(cfg.out_dir, "reports", "ladder.txt")
    with open(ladder_txt, "r", encoding="utf-8") as f:
        print(f.read(), end="")
    return 0


def _cmd_report(args) -> int:
    paths = merge_run_reports(args.runs, args.out)
    print(f"wrote merged ladder table: {paths['txt']}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = gradcheck_modes(seed=args.seed if args.seed is not None else 25,
                            draws=args.draws)
    for name, err in worst.items():
        print(f"{name}: max rel err {err:.3e} ok")
    return 0


def _cmd_export_maps(args) -> int:
    paths = export_weight_maps(args.checkpoint, args.dataset, args.study, args.out)
    print(f"wrote {len(paths)} weight maps under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="organpool",
        description="Organ-aware CT study classification: data synthesis, "
                    "training, calibration, evaluation and ablations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-signal synthetic dataset")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-train", dest="n_train", type=int, default=None)
    p.add_argument("--n-val", dest="n_val", type=int, default=None)
    p.add_argument("--n-test", dest="n_test", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--signal", type=float, default=None)
    p.add_argument("--distractor", type=float, default=None)
    p.add_argument("--missing-rate", dest="missing_rate", type=float, default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="run the full train/calibrate/eval pipeline")
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("--dataset", default=None, help="dataset dir or manifest path")
    p.add_argument("--out", default=None, help="run output directory")
    p.add_argument("--mode", default=None,
                   choices=("gap", "global", "masked", "masked_osf"))
    p.add_argument("--region", default=None, choices=("mask", "bbox"))
    p.add_argument("--scalars", default=None,
                   help="comma-separated subset of volume,hu,border")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("calibrate", help="fit a calibration table from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=200)
    p.add_argument("--min-count", dest="min_count", type=int, default=64)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("eval", help="frozen evaluation of a checkpoint + calibration")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the mode ladder and optional ablations")
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--region", default=None, choices=("mask", "bbox"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-ladder", dest="no_ladder", action="store_true")
    p.add_argument("--regions", action="store_true",
                   help="also run masked with region=mask vs region=bbox")
    p.add_argument("--scalar-sets", dest="scalar_sets", default=None,
                   help="semicolon-separated scalar subsets, e.g. 'volume;hu'")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="merge run reports into a ladder table")
    p.add_argument("runs", nargs="+", help="run directories to merge")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of all heads")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--draws", type=int, default=3)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-maps", help="export per-organ pooling weight maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--study", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_maps)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

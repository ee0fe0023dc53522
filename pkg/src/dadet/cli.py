"""Command-line front-end for dataset generation, training and experiments.

Subcommands: generate, train, evaluate, ablate, sweep, dump-features,
dump-heatmaps.  Exit codes: 0 success, 1 usage or configuration error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, synthdata
from .evaluation import write_eval_csv
from .harness import ConfigError, ExperimentConfig
from .netarch import load_checkpoint
from .synthdata import CLASS_NAMES, generate_pair_dataset, load_split, write_dataset
from .trainer import run_training

USAGE_ERROR = 1
RUNTIME_ERROR = 2


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = harness.config_from_yaml(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = harness.override_seed(cfg, args.seed)
    return cfg


def _out_dir(args, must_be_fresh: bool = False) -> Path:
    out = Path(args.out)
    if must_be_fresh and out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(
            f"output directory {out} is not empty; pass --force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, must_be_fresh=True)
    source, target, target_test = generate_pair_dataset(
        cfg.scene, cfg.n_source, cfg.n_target, cfg.n_target_test
    )
    write_dataset(out, cfg.scene, source, target, target_test)
    print(f"wrote {len(source)} source / {len(target)} target / "
          f"{len(target_test)} target-test samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    source = load_split(args.data, "source")
    target = load_split(args.data, "target")
    model, reports = run_training(cfg.train, source, target, out_dir=out)
    print(f"trained {cfg.train.total_steps} steps; "
          f"final objective {reports[-1].total:.4f}; checkpoint in {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    thresholds = tuple(float(t) for t in args.thresholds.split(",")) \
        if args.thresholds else cfg.thresholds
    model, extra = load_checkpoint(args.checkpoint)
    samples = load_split(args.data, args.split)
    result = harness.evaluate_model(model, samples, thresholds)
    out = _out_dir(args)
    csv_path = out / "eval.csv"
    write_eval_csv(csv_path, result, CLASS_NAMES,
                   config={"experiment": cfg.as_dict(), "checkpoint": extra})
    for thr in thresholds:
        print(f"mAP@{thr:g} = {result.map_at(thr):.4f}")
    print(f"wrote {csv_path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    source = load_split(args.data, "source")
    target = load_split(args.data, "target")
    test = load_split(args.data, "target_test")
    grid = harness.default_ablation_grid(cfg.train.loss)
    rows = harness.run_ablation(cfg, grid, source, target, test)
    out = _out_dir(args)
    csv_path = out / "ablation.csv"
    harness.write_ablation_csv(csv_path, rows, config=cfg.as_dict())
    for row in rows:
        status = f"mAP {row.map_value:.4f}" if row.map_value is not None else row.error
        print(f"{row.label:55s} {status}")
    print(f"wrote {csv_path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ConfigError("--values must list at least one value")
    source = load_split(args.data, "source")
    target = load_split(args.data, "target")
    test = load_split(args.data, "target_test")
    rows = harness.run_sweep(cfg, args.param, values, source, target, test)
    out = _out_dir(args)
    csv_path = out / f"sweep_{args.param}.csv"
    harness.write_sweep_csv(csv_path, rows, config=cfg.as_dict())
    for row in rows:
        status = f"mAP {row['map']:.4f}" if row["map"] is not None else row["error"]
        print(f"{args.param}={row['value']}: {status}")
    print(f"wrote {csv_path}")
    return 0


def cmd_dump_features(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    source = load_split(args.data, "source")
    target = load_split(args.data, args.target_split)
    out = _out_dir(args)
    path = out / "features.csv"
    harness.dump_features(model, source, target, args.per_domain, path,
                          config={"checkpoint": extra})
    print(f"wrote {path}")
    return 0


def cmd_dump_heatmaps(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    samples = load_split(args.data, args.split)[: args.limit]
    out = _out_dir(args)
    written = harness.dump_heatmaps(model, samples, out, config={"checkpoint": extra})
    print(f"wrote {len(written)} heatmaps to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dadet",
        description="Desk-scale domain-adaptive detection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data: bool = False, checkpoint: bool = False):
        p.add_argument("--config", type=str, default=None, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override scene+train seed")
        p.add_argument("--out", type=str, required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite non-empty output")
        if data:
            p.add_argument("--data", type=str, required=True, help="dataset directory")
        if checkpoint:
            p.add_argument("--checkpoint", type=str, required=True)

    p = sub.add_parser("generate", help="materialize the synthetic two-domain dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model on a generated dataset")
    common(p, data=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    common(p, data=True, checkpoint=True)
    p.add_argument("--split", type=str, default="target_test",
                   choices=synthdata.SPLIT_DIRS)
    p.add_argument("--thresholds", type=str, default=None,
                   help="comma-separated IoU thresholds, e.g. 0.3,0.5,0.7")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the toggle/level-kind ablation grid")
    common(p, data=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep K, lambda or gamma")
    common(p, data=True)
    p.add_argument("--param", type=str, required=True, choices=harness.SWEEP_PARAMS)
    p.add_argument("--values", type=str, required=True,
                   help="comma-separated values, e.g. 2,3,4")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-features", help="export pooled backbone features")
    common(p, data=True, checkpoint=True)
    p.add_argument("--per-domain", type=int, default=10)
    p.add_argument("--target-split", type=str, default="target",
                   choices=("target", "target_test"))
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("dump-heatmaps", help="export last-tap activation heatmaps")
    common(p, data=True, checkpoint=True)
    p.add_argument("--split", type=str, default="target_test",
                   choices=synthdata.SPLIT_DIRS)
    p.add_argument("--limit", type=int, default=8)
    p.set_defaults(func=cmd_dump_heatmaps)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else USAGE_ERROR
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())

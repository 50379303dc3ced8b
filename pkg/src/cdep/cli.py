"""Command line interface.

Subcommands: build-data, train, sweep, eval, bench. Settings resolve in
layers: dataset/method presets, then the config file, then explicit flags.
Exit codes: 0 success, 2 configuration problem, 3 data problem.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, ExperimentConfig, load_config_file, preset
from .data import DataError
from .storage import ContainerError
from .train import TrainError

_FLAG_FIELDS = [
    ("--dataset", "dataset", str, "decoy_mnist, color_mnist, or compas"),
    ("--method", "method", str, "vanilla, cdep, or rrr"),
    ("--arch", "arch", str, "cnn or mlp"),
    ("--lambda", "lambda_", float, "explanation penalty weight"),
    ("--optimizer", "optimizer", str, "adam or sgd"),
    ("--lr", "lr", float, "learning rate"),
    ("--momentum", "momentum", float, "sgd momentum"),
    ("--weight-decay", "weight_decay", float, "L2 weight decay"),
    ("--epochs", "epochs", int, "training epochs"),
    ("--batch-size", "batch_size", int, "minibatch size"),
    ("--data-seed", "data_seed", int, "dataset construction seed"),
    ("--train-subsample", "train_subsample", int, "cap on training samples"),
    ("--score-mode", "score_mode", str, "logit or softmax"),
    ("--k-pixels", "k_pixels", int, "pixel groups per batch"),
    ("--boost-margin", "boost_margin", float, "hinge margin for boost targets"),
    ("--early-stop-patience", "early_stop_patience", int,
     "epochs without val-loss improvement before stopping (0 disables)"),
    ("--frozen-prefix", "frozen_prefix", int, "leading layers to freeze"),
    ("--data-root", "data_root", str, "dataset cache directory"),
    ("--compas-csv", "compas_csv", str, "path to the recidivism CSV"),
    ("--out-dir", "out_dir", str, "run output directory"),
]


def _add_common(p, seed_required=False):
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--seed", type=int, required=seed_required,
                   help="run seed (fixes every random stream)")
    for flag, dest, typ, help_text in _FLAG_FIELDS:
        p.add_argument(flag, dest=dest, type=typ, default=None, help=help_text)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cdep",
        description="Train small networks with explanation-penalized losses.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("build-data", help="build and cache datasets")
    _add_common(p)
    p = sub.add_parser("train", help="run one training configuration")
    _add_common(p, seed_required=True)
    p = sub.add_parser("sweep", help="train over a lambda grid")
    _add_common(p)
    p.add_argument("--grid", required=True,
                   help="comma-separated lambda values")
    p = sub.add_parser("eval", help="recompute metrics for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("bench", help="timing and memory table")
    _add_common(p)
    p.add_argument("--bench-epochs", type=int, default=1)
    return parser


def resolve_config(args) -> ExperimentConfig:
    file_cfg = None
    if args.config:
        file_cfg = load_config_file(args.config)
    dataset = args.dataset or (file_cfg.dataset if file_cfg else "decoy_mnist")
    method = args.method or (file_cfg.method if file_cfg else "vanilla")
    cfg = preset(dataset, method)
    if args.config:
        cfg = load_config_file(args.config, base=cfg)
    for _, dest, _, _ in _FLAG_FIELDS:
        value = getattr(args, dest, None)
        if value is not None:
            setattr(cfg, dest, value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.resolved()


def cmd_build_data(cfg) -> int:
    from .data import get_mnist, load_compas, make_biased_tabular, save_dataset
    from .train import build_run_data

    os.makedirs(cfg.data_root, exist_ok=True)
    data = build_run_data(cfg)
    for name, ds in (("train", data.train), ("val", data.val),
                     ("test", data.test)):
        path = os.path.join(cfg.data_root, f"{cfg.dataset}_{name}.bin")
        save_dataset(path, ds)
        print(f"wrote {path} ({len(ds)} samples)")
    print(f"source: {data.source}")
    return 0


def cmd_train(cfg) -> int:
    from .train import train

    manifest = train(cfg)
    print(json.dumps({"out_dir": cfg.out_dir,
                      "best_val_accuracy": manifest["best_val_accuracy"],
                      "final_test_accuracy": manifest["final_test_accuracy"],
                      "epochs_run": manifest["epochs_run"]}, indent=2))
    return 0


def cmd_sweep(cfg, grid_text) -> int:
    from .train import sweep

    try:
        grid = [float(v) for v in grid_text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad sweep grid: {grid_text!r}") from None
    summary = sweep(cfg, grid)
    print(json.dumps({"best": summary["best"], "table": summary["table"]},
                     indent=2))
    return 0


def cmd_eval(cfg, checkpoint) -> int:
    from .train import evaluate_checkpoint

    out = evaluate_checkpoint(checkpoint, cfg)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_bench(cfg, bench_epochs) -> int:
    from .bench import bench

    summary = bench(cfg, epochs=bench_epochs)
    print(json.dumps({"rows": summary["rows"],
                      "memory_slope": summary["memory_slope"]}, indent=2))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "build-data":
            return cmd_build_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.grid)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "bench":
            return cmd_bench(cfg, args.bench_epochs)
        raise ConfigError(f"unknown command: {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ContainerError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())

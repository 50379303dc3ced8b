"""Training runs: seeded streams, the step loop, run artifacts, sweeps.

A run directory receives manifest.json (resolved config, seed streams,
conventions in effect, per-epoch wall time and peak memory), metrics.csv
(one row per epoch per split), the best-validation checkpoint, and a pair
of diagnostic figures. Reruns with the same config and seed produce
byte-identical metrics.csv files.

Randomness is split into named streams spawned from the run seed (init,
shuffle, dropout, pixels) so that, for example, pixel-target sampling does
not perturb initialization. Dataset construction uses the separate
data_seed, keeping the data identical across methods and run seeds.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from . import figures
from .config import ConfigError, ExperimentConfig, check_sweep_grid
from .data import (DataError, get_mnist, load_compas, make_biased_tabular,
                   make_color_mnist, make_decoy_mnist, pixel_distribution,
                   race_columns)
from .layers import (Dropout, build_compas_mlp, build_mnist_cnn, build_mnist_mlp,
                     forward, init_params, load_checkpoint, sample_dropout_masks,
                     save_checkpoint)
from .metrics import evaluate, predict_logits
from .objective import (CE_NORMALIZATION, EXPL_NORMALIZATION, cdep_loss,
                        make_boost_target, make_suppress_targets,
                        sample_pixel_targets)
from .optim import make_optimizer
from .rrr import AnnotationMask, rrr_loss

STREAM_NAMES = ("init", "shuffle", "dropout", "pixels")
CSV_COLUMNS = ("epoch", "split", "accuracy", "auc", "f1", "wcr_black",
               "wcr_white", "pred_err", "expl_err")


class TrainError(RuntimeError):
    """Raised when training cannot continue (non-finite loss)."""


def seed_streams(seed):
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(STREAM_NAMES))
    rngs = {name: np.random.default_rng(c)
            for name, c in zip(STREAM_NAMES, children)}
    return rngs


def stream_seed_int(seed, name):
    """Stable integer sub-seed for helpers that take plain ints."""
    idx = STREAM_NAMES.index(name)
    child = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))[idx]
    return int(child.generate_state(1)[0])


class RunData:
    """Datasets plus the penalty ingredients derived from them."""

    def __init__(self, train, val, test, pixdist=None, boost_columns=None,
                 source=""):
        self.train = train
        self.val = val
        self.test = test
        self.pixdist = pixdist
        self.boost_columns = boost_columns
        self.source = source


def build_run_data(cfg: ExperimentConfig) -> RunData:
    if cfg.dataset in ("decoy_mnist", "color_mnist"):
        base_train, base_test = get_mnist(cfg.data_root, seed=cfg.data_seed)
        n = len(base_train)
        if cfg.train_subsample:
            n = min(n, cfg.train_subsample)
        n_val = max(1, n // 10)
        train_part = base_train.subset(np.arange(0, n - n_val))
        val_part = base_train.subset(np.arange(n - n_val, n), split="val")
        if cfg.dataset == "decoy_mnist":
            train = make_decoy_mnist(train_part, "train", seed=cfg.data_seed + 1)
            val = make_decoy_mnist(val_part, "train", seed=cfg.data_seed + 2)
            test = make_decoy_mnist(base_test, "test", seed=cfg.data_seed + 3)
            return RunData(train, val, test, source="idx")
        train = make_color_mnist(train_part, phase="train")
        val = make_color_mnist(val_part, phase="train")
        val.split = "val"
        test = make_color_mnist(base_test, phase="test")
        return RunData(train, val, test, pixdist=pixel_distribution(train),
                       source="idx")
    if cfg.dataset == "compas":
        if cfg.compas_csv:
            (train, val, test), info = load_compas(cfg.compas_csv,
                                                   seed=cfg.data_seed)
            source = f"csv kept={info['kept']}"
        else:
            train, val, test = make_biased_tabular(seed=cfg.data_seed)
            source = "synthetic"
        cols = race_columns(train.feature_names)
        return RunData(train, val, test, boost_columns=cols, source=source)
    raise ConfigError(f"unknown dataset: {cfg.dataset!r}")


def build_network(cfg: ExperimentConfig, data: RunData):
    seed = stream_seed_int(cfg.seed, "init")
    if cfg.dataset == "compas":
        net = build_compas_mlp(data.train.inputs.shape[1])
    elif cfg.arch == "cnn":
        net = build_mnist_cnn(in_channels=data.train.inputs.shape[1])
    else:
        net = build_mnist_mlp(in_shape=data.train.inputs.shape[1:])
    net.frozen_prefix = cfg.frozen_prefix
    init_params(net, seed)
    return net


def batch_loss(cfg, net, data, x, y, masks, rngs, dropout_masks):
    """Dispatch one batch to the configured objective."""
    if cfg.method == "rrr":
        if cfg.dataset == "decoy_mnist":
            ann = AnnotationMask(masks)
        elif cfg.dataset == "compas":
            m = np.zeros(x.shape[1], dtype=bool)
            m[data.boost_columns] = True
            ann = AnnotationMask(m)
        else:
            raise ConfigError("rrr has no annotation source for this dataset")
        return rrr_loss(net, x, y, ann, cfg.lambda_, mode="train",
                        dropout_masks=dropout_masks)
    if cfg.method == "cdep" and cfg.lambda_ > 0:
        if cfg.dataset == "decoy_mnist":
            targets = make_suppress_targets(masks)
        elif cfg.dataset == "color_mnist":
            targets = sample_pixel_targets(data.pixdist, cfg.k_pixels,
                                           rngs["pixels"],
                                           channels=x.shape[1])
        else:
            targets = [make_boost_target(data.boost_columns, cfg.boost_margin,
                                         x.shape[1])]
    else:
        targets = []
    lam = cfg.lambda_ if cfg.method == "cdep" else 0.0
    return cdep_loss(net, x, y, targets, lam, score_mode=cfg.score_mode,
                     mode="train", dropout_masks=dropout_masks)


def eval_pred_err(net, dataset, batch_size=512):
    """Eval-mode mean cross-entropy of a split, off the graph."""
    logits = predict_logits(net, dataset.inputs, batch_size=batch_size)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(dataset)), dataset.labels].mean())


def _fmt(v):
    if v is None or v == "":
        return ""
    return f"{v:.10g}"


def _csv_row(epoch, split, report=None, accuracy=None, pred_err=None,
             expl_err=None):
    acc = accuracy if report is None else report.accuracy
    auc = None if report is None else report.auc
    f1 = None if report is None else report.f1
    wcr_b = None if report is None else report.wcr.get("black")
    wcr_w = None if report is None else report.wcr.get("white")
    return [str(epoch), split, _fmt(acc), _fmt(auc), _fmt(f1),
            _fmt(wcr_b), _fmt(wcr_w), _fmt(pred_err), _fmt(expl_err)]


def write_metrics_csv(path, rows):
    lines = [",".join(CSV_COLUMNS)]
    lines += [",".join(r) for r in rows]
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def train(cfg: ExperimentConfig, write_figures=True) -> dict:
    """Run one training configuration; returns the manifest dict."""
    cfg = cfg.resolved()
    os.makedirs(cfg.out_dir, exist_ok=True)
    rngs = seed_streams(cfg.seed)
    data = build_run_data(cfg)
    net = build_network(cfg, data)
    params = net.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay)
    has_dropout = any(isinstance(l, Dropout) for l in net.layers)
    n_train = len(data.train)
    ckpt_path = os.path.join(cfg.out_dir, "best.ckpt")
    rows, epoch_stats = [], []
    best_val_acc, best_val_loss, stale = -1.0, float("inf"), 0
    step = 0
    for epoch in range(cfg.epochs):
        ad.reset_peak_memory()
        t0 = time.perf_counter()
        perm = rngs["shuffle"].permutation(n_train)
        sums = {"pred": 0.0, "expl": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, n_train, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            x = data.train.inputs[idx]
            y = data.train.labels[idx]
            masks = (None if data.train.bias_masks is None
                     else data.train.bias_masks[idx])
            dm = (sample_dropout_masks(net, len(idx), rngs["dropout"])
                  if has_dropout else None)
            report = batch_loss(cfg, net, data, x, y, masks, rngs, dm)
            vals = report.floats()
            if not np.isfinite(vals["total"]):
                raise TrainError(f"non-finite loss at step {step} "
                                 f"(epoch {epoch}): {vals}")
            grads = ad.backward(report.total, wrt=params)
            opt.step(grads)
            sums["pred"] += vals["pred_err"]
            sums["expl"] += vals["expl_err"]
            sums["total"] += vals["total"]
            n_batches += 1
            step += 1
        epoch_time = time.perf_counter() - t0
        peak_mem = ad.memory_stats()["peak_bytes"]
        n_eval = min(cfg.eval_train_samples, n_train)
        train_eval = evaluate(net, data.train.subset(np.arange(n_eval)))
        val_eval = evaluate(net, data.val)
        test_eval = evaluate(net, data.test)
        val_loss = eval_pred_err(net, data.val)
        rows.append(_csv_row(epoch, "train", train_eval,
                             pred_err=sums["pred"] / n_batches,
                             expl_err=sums["expl"] / n_batches))
        rows.append(_csv_row(epoch, "val", val_eval, pred_err=val_loss))
        rows.append(_csv_row(epoch, "test", test_eval,
                             pred_err=eval_pred_err(net, data.test)))
        epoch_stats.append({"epoch": epoch, "seconds": epoch_time,
                            "peak_bytes": int(peak_mem),
                            "val_accuracy": val_eval.accuracy,
                            "test_accuracy": test_eval.accuracy})
        if val_eval.accuracy > best_val_acc:
            best_val_acc = val_eval.accuracy
            save_checkpoint(net, ckpt_path, seed=cfg.seed,
                            extra={"epoch": epoch, "dataset": cfg.dataset,
                                   "method": cfg.method})
        if val_loss < best_val_loss:
            best_val_loss = val_loss
            stale = 0
        else:
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                break
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    write_metrics_csv(metrics_path, rows)
    manifest = {
        "config": asdict(cfg),
        "version": _package_version(),
        "seed_streams": list(STREAM_NAMES),
        "data_source": data.source,
        "conventions": {
            "explanation_normalization": EXPL_NORMALIZATION,
            "ce_normalization": CE_NORMALIZATION,
            "score_mode": cfg.score_mode,
            "boost_margin": cfg.boost_margin,
            "k_pixels": cfg.k_pixels,
            "val_split": "last 10 percent of the training subsample",
            "weight_decay_form": "L2 term added to gradients",
        },
        "epochs_run": len(epoch_stats),
        "epoch_stats": epoch_stats,
        "best_val_accuracy": best_val_acc,
        "final_test_accuracy": epoch_stats[-1]["test_accuracy"],
        "paths": {"metrics": metrics_path, "checkpoint": ckpt_path},
    }
    with open(os.path.join(cfg.out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    if write_figures:
        figures.loss_curves(metrics_path,
                            os.path.join(cfg.out_dir, "loss_curves.png"))
        figures.sample_grid(data.train,
                            os.path.join(cfg.out_dir, "train_samples.png"))
        if data.pixdist is not None:
            figures.pixel_heatmap(data.pixdist,
                                  os.path.join(cfg.out_dir, "pixel_distribution.png"))
    return manifest


def sweep(cfg: ExperimentConfig, grid, write_figures=True) -> dict:
    """Train one run per lambda, select the best by validation accuracy.

    Ties go to the smaller lambda (the grid is processed in ascending
    order with a strict improvement rule).
    """
    grid = check_sweep_grid(grid)
    cfg = cfg.resolved()
    os.makedirs(cfg.out_dir, exist_ok=True)
    results, best = [], None
    for lam in grid:
        sub = ExperimentConfig(**{**asdict(cfg), "lambda_": lam,
                                  "out_dir": os.path.join(cfg.out_dir,
                                                          f"lam_{lam:g}")})
        manifest = train(sub, write_figures=write_figures)
        entry = {"lambda": lam,
                 "val_accuracy": manifest["best_val_accuracy"],
                 "test_accuracy": manifest["final_test_accuracy"],
                 "out_dir": sub.out_dir}
        results.append(entry)
        if best is None or entry["val_accuracy"] > best["val_accuracy"]:
            best = entry
    table_path = os.path.join(cfg.out_dir, "sweep.csv")
    with open(table_path, "w", newline="") as f:
        f.write("lambda,val_accuracy,test_accuracy\n")
        for r in results:
            f.write(f"{r['lambda']:.10g},{_fmt(r['val_accuracy'])},"
                    f"{_fmt(r['test_accuracy'])}\n")
    summary = {"grid": grid, "results": results, "best": best,
               "table": table_path}
    with open(os.path.join(cfg.out_dir, "sweep.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    if write_figures:
        figures.sweep_curve(table_path, os.path.join(cfg.out_dir, "sweep.png"))
    return summary


def evaluate_checkpoint(ckpt_path, cfg: ExperimentConfig) -> dict:
    """Recompute split metrics for a saved checkpoint on the config's data."""
    cfg = cfg.resolved()
    net, header = load_checkpoint(ckpt_path)
    data = build_run_data(cfg)
    out = {}
    for name, ds in (("train", data.train), ("val", data.val),
                     ("test", data.test)):
        out[name] = evaluate(net, ds).to_dict()
    out["checkpoint"] = {"path": ckpt_path, "seed": header.get("seed"),
                         "extra": header.get("extra", {})}
    return out


def _package_version():
    from . import __version__
    return __version__

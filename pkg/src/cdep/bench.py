"""Runtime and memory benchmarking, including the frozen-prefix path.

Measures wall-clock seconds per epoch and engine peak memory for each
method on identical data and settings. The frozen-prefix row caches both
the plain activations and the decomposition state at the frozen/trainable
boundary once, then trains only the suffix; its epoch time excludes the
one-time cache build (reported separately), since amortized reuse across
epochs is the point of freezing.

The memory-slope probe runs the same step loop over increasing batch
counts and reports the penalized-over-vanilla peak overhead per count; a
near-zero slope demonstrates the overhead does not accumulate with steps.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from . import figures
from .cd import CDState, cd_frozen_prefix, cd_run, FeatureGroup
from .config import ExperimentConfig
from .layers import Dropout, apply_layer, sample_dropout_masks, forward
from .objective import cross_entropy
from .optim import make_optimizer
from .train import batch_loss, build_network, build_run_data, seed_streams

DEFAULT_FROZEN_PREFIX = {"cnn": 7, "mlp": 3}  # boundary after the conv/first block


def _fresh(cfg, data):
    net = build_network(cfg, data)
    opt = make_optimizer(cfg.optimizer, net.parameters(), cfg.lr,
                         momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return net, opt


def _run_epoch(cfg, net, opt, data, rngs, n_batches=None):
    has_dropout = any(isinstance(l, Dropout) for l in net.layers)
    n = len(data.train)
    perm = rngs["shuffle"].permutation(n)
    done = 0
    for lo in range(0, n, cfg.batch_size):
        idx = perm[lo:lo + cfg.batch_size]
        x = data.train.inputs[idx]
        y = data.train.labels[idx]
        masks = (None if data.train.bias_masks is None
                 else data.train.bias_masks[idx])
        dm = (sample_dropout_masks(net, len(idx), rngs["dropout"])
              if has_dropout else None)
        report = batch_loss(cfg, net, data, x, y, masks, rngs, dm)
        grads = ad.backward(report.total, wrt=net.parameters())
        opt.step(grads)
        done += 1
        if n_batches is not None and done >= n_batches:
            break
    return done


def _run_prefix(net, x, depth):
    out = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    for i in range(depth):
        out = apply_layer(net.layers[i], out, mode="eval")
    return out


def build_frozen_cache(cfg, net, data, batch_size=256):
    """Boundary activations and decomposition states for the whole train set."""
    fp = net.frozen_prefix
    acts, betas, gammas = [], [], []
    with ad.no_grad():
        for lo in range(0, len(data.train), batch_size):
            x = data.train.inputs[lo:lo + batch_size]
            masks = data.train.bias_masks[lo:lo + batch_size]
            acts.append(_run_prefix(net, x, fp).data)
            st = cd_frozen_prefix(net, x, FeatureGroup(masks))
            betas.append(st.beta.data)
            gammas.append(st.gamma.data)
    return (np.concatenate(acts), np.concatenate(betas), np.concatenate(gammas))


def _run_frozen_epoch(cfg, net, opt, data, rngs, cache):
    acts, betas, gammas = cache
    fp = net.frozen_prefix
    n = len(data.train)
    perm = rngs["shuffle"].permutation(n)
    for lo in range(0, n, cfg.batch_size):
        idx = perm[lo:lo + cfg.batch_size]
        y = data.train.labels[idx]
        logits = forward(net, ad.Tensor(acts[idx]), start=fp)
        pred = cross_entropy(logits, y)
        state = CDState(ad.Tensor(betas[idx]), ad.Tensor(gammas[idx]))
        beta_logits = cd_run(net, state, start=fp).beta
        expl = beta_logits.abs().sum() / float(len(idx))
        total = pred + cfg.lambda_ * expl
        grads = ad.backward(total, wrt=net.parameters())
        opt.step(grads)


def bench(cfg: ExperimentConfig, epochs=1, batch_counts=(4, 8, 16)) -> dict:
    """Timing/memory table plus the overhead-vs-batch-count slope."""
    cfg = cfg.resolved()
    os.makedirs(cfg.out_dir, exist_ok=True)
    data = build_run_data(cfg)
    rows = []
    methods = ["vanilla", "cdep"]
    if cfg.arch == "mlp" and cfg.dataset in ("decoy_mnist", "compas"):
        methods.append("rrr")
    lam = cfg.lambda_ if cfg.lambda_ > 0 else 30.0
    for method in methods:
        sub = ExperimentConfig(**{**asdict(cfg), "method": method,
                                  "lambda_": 0.0 if method == "vanilla" else lam})
        net, opt = _fresh(sub, data)
        rngs = seed_streams(sub.seed)
        ad.reset_peak_memory()
        t0 = time.perf_counter()
        for _ in range(epochs):
            _run_epoch(sub, net, opt, data, rngs)
        seconds = (time.perf_counter() - t0) / epochs
        rows.append({"method": method, "seconds_per_epoch": seconds,
                     "peak_mb": ad.memory_stats()["peak_bytes"] / 1e6})
    cache_seconds = None
    if cfg.dataset == "decoy_mnist":
        sub = ExperimentConfig(**{**asdict(cfg), "method": "cdep",
                                  "lambda_": lam})
        net, _ = _fresh(sub, data)
        net.frozen_prefix = DEFAULT_FROZEN_PREFIX[cfg.arch]
        opt = make_optimizer(sub.optimizer, net.parameters(), sub.lr,
                             momentum=sub.momentum,
                             weight_decay=sub.weight_decay)
        rngs = seed_streams(sub.seed)
        t0 = time.perf_counter()
        cache = build_frozen_cache(sub, net, data)
        cache_seconds = time.perf_counter() - t0
        ad.reset_peak_memory()
        t0 = time.perf_counter()
        for _ in range(epochs):
            _run_frozen_epoch(sub, net, opt, data, rngs, cache)
        seconds = (time.perf_counter() - t0) / epochs
        rows.append({"method": "cdep_frozen", "seconds_per_epoch": seconds,
                     "peak_mb": ad.memory_stats()["peak_bytes"] / 1e6})
    slope_info = memory_slope(cfg, batch_counts, lam)
    table_path = os.path.join(cfg.out_dir, "bench.csv")
    with open(table_path, "w", newline="") as f:
        f.write("method,seconds_per_epoch,peak_mb\n")
        for r in rows:
            f.write(f"{r['method']},{r['seconds_per_epoch']:.6g},"
                    f"{r['peak_mb']:.6g}\n")
    summary = {"rows": rows, "cache_seconds": cache_seconds,
               "memory_slope": slope_info, "table": table_path}
    with open(os.path.join(cfg.out_dir, "bench.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    figures.bench_bars(table_path, os.path.join(cfg.out_dir, "bench.png"))
    return summary


def peak_after_steps(cfg: ExperimentConfig, method, n_batches, lam) -> int:
    """Engine peak bytes after n_batches training steps from scratch."""
    cfg = ExperimentConfig(**{**asdict(cfg.resolved()), "method": method,
                              "lambda_": 0.0 if method == "vanilla" else lam})
    data = build_run_data(cfg)
    net, opt = _fresh(cfg, data)
    rngs = seed_streams(cfg.seed)
    ad.reset_peak_memory()
    _run_epoch(cfg, net, opt, data, rngs, n_batches=n_batches)
    return ad.memory_stats()["peak_bytes"]


def memory_slope(cfg: ExperimentConfig, batch_counts, lam) -> dict:
    """Penalty peak-memory overhead at several batch counts plus a fit."""
    counts = sorted(batch_counts)
    overheads = []
    for k in counts:
        van = peak_after_steps(cfg, "vanilla", k, lam)
        pen = peak_after_steps(cfg, "cdep", k, lam)
        overheads.append(pen - van)
    slope = float(np.polyfit(counts, overheads, 1)[0]) if len(counts) > 1 else 0.0
    return {"batch_counts": list(counts),
            "overhead_bytes": [int(o) for o in overheads],
            "slope_bytes_per_batch": slope}

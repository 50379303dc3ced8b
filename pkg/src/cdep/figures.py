"""Figure rendering for run artifacts; every function writes a PNG file.

Uses the non-interactive backend so runs work headless. Inputs are the
delimited files the harness writes, keeping figures reproducible from
artifacts alone.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def loss_curves(metrics_csv, out_path):
    """Prediction/explanation loss and accuracy per epoch."""
    rows = _read_csv(metrics_csv)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for split in ("train", "val", "test"):
        sel = [r for r in rows if r["split"] == split]
        if not sel:
            continue
        epochs = [int(r["epoch"]) for r in sel]
        ax1.plot(epochs, [float(r["pred_err"]) for r in sel], label=split)
        ax2.plot(epochs, [float(r["accuracy"]) for r in sel], label=split)
    train_rows = [r for r in rows if r["split"] == "train" and r["expl_err"]]
    if train_rows and any(float(r["expl_err"]) != 0 for r in train_rows):
        ax1.plot([int(r["epoch"]) for r in train_rows],
                 [float(r["expl_err"]) for r in train_rows],
                 linestyle="--", label="expl (train)")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def sweep_curve(sweep_csv, out_path):
    """Validation/test accuracy against lambda (log x past zero)."""
    rows = _read_csv(sweep_csv)
    lams = [float(r["lambda"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("val_accuracy", "test_accuracy"):
        ax.plot(lams, [float(r[key]) for r in rows], marker="o",
                label=key.replace("_", " "))
    if all(l > 0 for l in lams):
        ax.set_xscale("log")
    ax.set_xlabel("lambda")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def bench_bars(bench_csv, out_path):
    """Seconds per epoch and peak memory per method."""
    rows = _read_csv(bench_csv)
    names = [r["method"] for r in rows]
    secs = [float(r["seconds_per_epoch"]) for r in rows]
    mems = [float(r["peak_mb"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(names, secs)
    ax1.set_ylabel("seconds / epoch")
    ax2.bar(names, mems)
    ax2.set_ylabel("peak memory (MB)")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def sample_grid(dataset, out_path, n=16):
    """A grid of input samples with labels; handles 1- and 3-channel images."""
    n = min(n, len(dataset))
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.6 * rows))
    axes = np.atleast_1d(axes).ravel()
    for i in range(n):
        img = dataset.inputs[i]
        ax = axes[i]
        if img.ndim == 3 and img.shape[0] in (1, 3):
            if img.shape[0] == 1:
                ax.imshow(img[0], cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(np.transpose(img, (1, 2, 0)))
        else:
            ax.imshow(np.atleast_2d(img), cmap="gray")
        ax.set_title(str(dataset.labels[i]), fontsize=8)
        ax.axis("off")
    for ax in axes[n:]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def pixel_heatmap(distribution, out_path):
    """Spatial sampling distribution used for single-pixel penalties."""
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(distribution, cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_title("pixel sampling distribution")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path

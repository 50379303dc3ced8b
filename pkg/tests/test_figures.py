"""Figure rendering writes valid PNG files from the delimited artifacts."""

import os

import numpy as np

from cdep import figures as F
from cdep.data import LabeledDataset

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    with open(path, "rb") as f:
        return f.read(8) == PNG_MAGIC


def test_loss_curves(tmp_path):
    csv_path = tmp_path / "metrics.csv"
    csv_path.write_text(
        "epoch,split,accuracy,auc,f1,wcr_black,wcr_white,pred_err,expl_err\n"
        "0,train,0.5,,0.4,,,2.1,0.3\n"
        "0,val,0.55,,0.5,,,2.0,\n"
        "0,test,0.45,,0.4,,,2.2,\n"
        "1,train,0.7,,0.6,,,1.5,0.2\n"
        "1,val,0.72,,0.7,,,1.4,\n"
        "1,test,0.6,,0.6,,,1.6,\n")
    out = str(tmp_path / "loss.png")
    assert F.loss_curves(str(csv_path), out) == out
    assert is_png(out)


def test_sweep_curve_with_and_without_zero(tmp_path):
    csv_path = tmp_path / "sweep.csv"
    csv_path.write_text("lambda,val_accuracy,test_accuracy\n"
                        "0,0.8,0.5\n1,0.82,0.7\n10,0.8,0.75\n")
    out = str(tmp_path / "sweep.png")
    F.sweep_curve(str(csv_path), out)
    assert is_png(out)
    csv_path.write_text("lambda,val_accuracy,test_accuracy\n"
                        "0.1,0.8,0.5\n1,0.82,0.7\n")
    F.sweep_curve(str(csv_path), str(tmp_path / "sweep_log.png"))
    assert is_png(str(tmp_path / "sweep_log.png"))


def test_bench_bars(tmp_path):
    csv_path = tmp_path / "bench.csv"
    csv_path.write_text("method,seconds_per_epoch,peak_mb\n"
                        "vanilla,1.5,20\ncdep,5.5,25\n")
    out = str(tmp_path / "bench.png")
    F.bench_bars(str(csv_path), out)
    assert is_png(out)


def test_sample_grid_gray_and_color(tmp_path):
    rng = np.random.default_rng(0)
    gray = LabeledDataset(rng.random((5, 1, 8, 8)),
                          np.arange(5), "train", n_classes=10)
    out = str(tmp_path / "gray.png")
    F.sample_grid(gray, out, n=5)
    assert is_png(out)
    color = LabeledDataset(rng.random((3, 3, 8, 8)),
                           np.arange(3), "train", n_classes=10)
    out = str(tmp_path / "color.png")
    F.sample_grid(color, out, n=16)  # n larger than the dataset
    assert is_png(out)


def test_pixel_heatmap(tmp_path):
    out = str(tmp_path / "pix.png")
    F.pixel_heatmap(np.random.default_rng(1).random((28, 28)), out)
    assert is_png(out)

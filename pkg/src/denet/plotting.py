"""Figures rendered next to the delimited outputs: a loss curve for
training runs and a predicted-versus-true scatter for count reports."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import InputValidationError
from .evaluation import CountReport

PathLike = Union[str, Path]


def plot_loss_curve(loss_csv_path: PathLike, png_path: PathLike) -> None:
    """Render the training loss CSV as a figure with one line per term."""
    steps, le, lc, lt = [], [], [], []
    with open(loss_csv_path) as f:
        reader = csv.DictReader(f)
        for row in reader:
            steps.append(int(row["step"]))
            le.append(float(row["loss_e"]))
            lc.append(float(row["loss_c"]))
            lt.append(float(row["loss_total"]))
    if not steps:
        raise InputValidationError(f"{loss_csv_path} has no loss rows to plot")

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, lt, label="total", lw=1.5)
    ax.plot(steps, le, label="pixel term", lw=1.0, alpha=0.8)
    ax.plot(steps, lc, label="count term", lw=1.0, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_count_report(report: CountReport, png_path: PathLike) -> None:
    """Scatter fused counts against ground truth with a y = x reference."""
    if not report.per_image:
        raise InputValidationError("count report has no per-image rows to plot")
    truth = [r.n_gt for r in report.per_image]
    fused = [r.c for r in report.per_image]
    detected = [r.n_d for r in report.per_image]

    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    lim = max(max(truth), max(fused), 1) * 1.1
    ax.plot([0, lim], [0, lim], "k--", lw=1, alpha=0.5)
    ax.scatter(truth, fused, s=36, label="fused count")
    ax.scatter(truth, detected, s=20, marker="x", alpha=0.7,
               label="detected part")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_xlabel("ground-truth count")
    ax.set_ylabel("estimated count")
    ax.set_title(f"MAE {report.mae:.2f}   MSE {report.mse:.2f}")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)

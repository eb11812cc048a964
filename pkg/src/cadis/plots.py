"""Render run figures next to the delimited metrics output."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _read_metrics(csv_path: Path) -> dict[str, list[float]]:
    with open(csv_path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        columns: dict[str, list[float]] = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for name, value in row.items():
                columns[name].append(float(value))
    return columns


def _finite(xs: list[float], ys: list[float]) -> tuple[list[float], list[float]]:
    pairs = [(x, y) for x, y in zip(xs, ys) if not math.isnan(y)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def render_run(run_dir) -> list[Path]:
    """Render accuracy / recall / clustering figures for a finished run.

    Reads ``metrics.csv`` in the run directory and writes PNGs into its
    ``figures`` subdirectory; returns the written paths.
    """
    run_dir = Path(run_dir)
    cols = _read_metrics(run_dir / "metrics.csv")
    fig_dir = run_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    rounds = cols["round"]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, cols["top1"], lw=1.2)
    ax.set_xlabel("communication round")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = fig_dir / "accuracy.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    recall_names = sorted(
        (c for c in cols if c.startswith("r") and c[1:].isdigit()),
        key=lambda c: int(c[1:]),
    )
    if recall_names:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in recall_names:
            ax.plot(rounds, cols[name], lw=0.9, label=f"class {name[1:]}")
        ax.set_xlabel("communication round")
        ax.set_ylabel("per-class recall")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        path = fig_dir / "recalls.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    rec_x, rec_y = _finite(rounds, cols.get("cluster_recovery", []))
    mse_x, mse_y = _finite(rounds, cols.get("qmatrix_mse", []))
    if rec_y or mse_y:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
        if rec_y:
            ax1.plot(rec_x, rec_y, lw=1.2, color="tab:green")
        ax1.set_xlabel("communication round")
        ax1.set_ylabel("cluster recovery (pairwise agreement)")
        ax1.set_ylim(-0.02, 1.02)
        ax1.grid(alpha=0.3)
        if mse_y:
            ax2.plot(mse_x, mse_y, lw=1.2, color="tab:red")
        ax2.set_xlabel("communication round")
        ax2.set_ylabel("Q-matrix MSE to ideal")
        ax2.grid(alpha=0.3)
        fig.tight_layout()
        path = fig_dir / "clustering.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, cols["mean_local_loss"], lw=1.2, color="tab:purple")
    ax.set_xlabel("communication round")
    ax.set_ylabel("mean local training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = fig_dir / "local_loss.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)
    return written

"""Render history and robustness-curve CSVs as SVG line charts.

Figures are a pure function of the CSV they plot: the SVG hash salt is
pinned and the date metadata dropped, so re-rendering the same data yields
identical bytes.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "snnc"

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .reporting import read_csv


def _save(fig, out_path):
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_eval_curves(csv_paths, out_path, title="Robustness") -> None:
    """One polyline per (attack, inference, sigma) series across the CSVs."""
    series: dict[str, tuple[list, list]] = {}
    for path in csv_paths:
        rows, _ = read_csv(path)
        for row in rows:
            label = f"{row['attack']} / {row['inference']} / σ={row['sigma']}"
            xs, ys = series.setdefault(label, ([], []))
            xs.append(float(row["eps"]))
            ys.append(float(row["accuracy"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(series):
        xs, ys = series[label]
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("perturbation budget ε (L∞)")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_path)


def plot_history(csv_path, out_path, title="Training history") -> None:
    """Loss on the left axis, accuracy and sigma on the right."""
    rows, _ = read_csv(csv_path)
    epochs = [int(r["epoch"]) for r in rows]
    losses = [float(r["loss"]) for r in rows]
    accs = [float(r["clean_acc"]) for r in rows]
    sigmas = [float(r["sigma"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, color="tab:blue", marker="o", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean train loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, accs, color="tab:green", marker="s", label="clean acc")
    ax2.plot(epochs, sigmas, color="tab:red", marker="^", linestyle="--",
             label="sigma")
    ax2.set_ylabel("accuracy / σ")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], fontsize=8)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, out_path)

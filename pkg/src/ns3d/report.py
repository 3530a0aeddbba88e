"""Rendering of report figures next to the delimited metric outputs."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def read_jsonl(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_loss_curve(records: list[dict], path: str, keys=("loss",), title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in records]
    for key in keys:
        vals = [r.get(key) for r in records]
        if any(v is not None for v in vals):
            ax.plot(steps, [v if v is not None else np.nan for v in vals], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_summary(per_shape: list[dict], path: str) -> None:
    keys = ("iou", "fscore", "accuracy", "chamfer")
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.2))
    for ax, key in zip(axes, keys):
        vals = [r[key] for r in per_shape if np.isfinite(r.get(key, np.nan))]
        if vals:
            ax.hist(vals, bins=min(20, max(3, len(vals) // 2)), color="#4878cf")
        ax.set_title(key)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep_fit(params, losses, fit, path: str) -> None:
    params = np.asarray(params, dtype=float)
    losses = np.asarray(losses, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(params, losses, color="#d65f5f", zorder=3, label="measured")
    xs = np.geomspace(params.min(), params.max(), 64)
    label = f"fit: {fit.coefficient:.3g} N^{fit.exponent:.3f}, R²={fit.r_squared:.3f}"
    ax.plot(xs, fit.predict(xs), color="#4878cf", label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("parameters N")
    ax.set_ylabel("test loss (nats/token)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

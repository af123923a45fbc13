"""PNG figures for the analysis and bench reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no version string or timestamp in the files, so reruns are byte-stable
_META = {"Software": None}

plt.rcParams.update(
    {
        "figure.dpi": 100,
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)


def plot_scale_attention(matrix: np.ndarray, path):
    L = matrix.shape[0]
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(matrix, cmap="viridis", vmin=0.0, vmax=max(float(matrix.max()), 1e-12))
    ticks = np.arange(L)
    ax.set_xticks(ticks, [str(t + 1) for t in ticks])
    ax.set_yticks(ticks, [str(t + 1) for t in ticks])
    ax.set_xlabel("key scale")
    ax.set_ylabel("query scale")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    _save(fig, path)


def plot_neighborhood_curve(curve, path):
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    for stage, masses in sorted(curve.per_stage.items()):
        ax.plot(curve.windows, masses, marker="o", lw=1, alpha=0.6, label=f"scale {stage}")
    if curve.mean:
        ax.plot(curve.windows, curve.mean, marker="s", lw=2, color="k", label="mean")
    ax.set_xlabel("window side")
    ax.set_ylabel("attention mass inside window")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_flops(reports, path):
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    names = [r.paradigm for r in reports]
    totals = [r.measured_total for r in reports]
    ax.bar(names, totals, color="0.4")
    ax.set_yscale("log")
    ax.set_ylabel("attention pair slots")
    for i, t in enumerate(totals):
        ax.annotate(f"{t:,}", (i, t), ha="center", va="bottom", fontsize=8)
    _save(fig, path)


def plot_losses(metrics: dict, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    steps = metrics["step"]
    ax.plot(steps, metrics["loss_total"], lw=1, color="k", label="total")
    stage_keys = sorted(k for k in metrics if k.startswith("loss_") and k != "loss_total")
    for key in stage_keys:
        ax.plot(steps, metrics[key], lw=0.8, alpha=0.6, label=key.replace("loss_", "scale "))
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy (nats)")
    ax.legend(frameon=False, fontsize=7)
    _save(fig, path)

"""Matplotlib figures for loss traces, FROC curves and ablation tables (written to files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": "icafpn"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_loss(trace: list[tuple[int, float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if trace:
        steps, losses = zip(*trace)
        ax.plot(steps, losses, lw=0.8, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_froc(curves: dict[str, tuple[list[float], list[float]]], path, max_fpi: float = 4.0) -> Path:
    """One line per named curve of (FPs per image, sensitivity) points."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, (fpi, sens) in curves.items():
        ax.plot(fpi, sens, lw=1.2, label=name)
    for x in (0.5, 1, 2, 4):
        ax.axvline(x, color="0.8", lw=0.6, zorder=0)
    ax.set_xlim(0, max_fpi)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("sensitivity")
    if len(curves) > 1:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_ablation(rows: list[dict], path, metrics=("AP", "AP50", "mFROC")) -> Path:
    """Grouped bars of median metrics per variant; failed rows are skipped."""
    rows = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * max(len(rows), 1), 3.6))
    width = 0.8 / len(metrics)
    for j, m in enumerate(metrics):
        xs = [i + (j - (len(metrics) - 1) / 2) * width for i in range(len(rows))]
        ax.bar(xs, [r[m] if r[m] is not None else 0.0 for r in rows], width, label=m)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["variant"] for r in rows], fontsize=8)
    ax.set_ylabel("median over seeds")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)

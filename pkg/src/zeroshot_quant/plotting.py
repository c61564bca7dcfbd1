"""Figures for comparison reports (written to files, never shown)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"figure.dpi": 110, "axes.grid": True, "grid.alpha": 0.3, "font.size": 9,
         "axes.spines.top": False, "axes.spines.right": False}


def _label(method, fold):
    return method if fold == "none" else f"{method} ({fold})"


def accuracy_bars(report, path):
    """Grouped bars of mean top-1 accuracy per config, with std error bars."""
    configs = [c["name"] for c in report.grid["configs"]]
    rows = []
    for c in report.cells:
        key = (c["method"], c["fold"])
        if not c["skipped"] and key not in rows:
            rows.append(key)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(configs) + 2) + 2.5, 3.6))
        width = 0.8 / max(1, len(rows))
        x = np.arange(len(configs))
        for i, (method, fold) in enumerate(rows):
            cells = [report.cell(method, name, fold) for name in configs]
            ax.bar(x + i * width - 0.4 + width / 2, [c["mean"] for c in cells], width,
                   yerr=[c["std"] for c in cells], capsize=2, label=_label(method, fold))
        ax.axhline(report.fp32_accuracy, color="k", ls="--", lw=1, label="FP32")
        ax.set_xticks(x)
        ax.set_xticklabels(configs)
        ax.set_ylabel("top-1 accuracy")
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=7, loc="upper left", bbox_to_anchor=(1.01, 1.0), frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def loss_histories(report, path):
    """Synthesis loss per iteration (first run of each method/fold)."""
    hist = report.extras.get("histories", {})
    if not hist:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        for (method, fold), values in sorted(hist.items()):
            ax.plot(np.arange(1, len(values) + 1), values, lw=1.2, label=_label(method, fold))
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def calibration_histograms(report, path):
    """Pixel-value histograms of each method's calibration batch (run 0)."""
    samples = report.extras.get("samples", {})
    if not samples:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        for (method, fold), data in sorted(samples.items()):
            ax.hist(np.ravel(data), bins=60, histtype="step", density=True,
                    label=_label(method, fold))
        ax.set_xlabel("input value")
        ax.set_ylabel("density")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def render_report(report, directory):
    """Write every figure into ``directory``; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = [accuracy_bars(report, directory / "accuracy.png"),
           loss_histories(report, directory / "loss_history.png"),
           calibration_histograms(report, directory / "calibration_data.png")]
    return [p for p in out if p is not None]

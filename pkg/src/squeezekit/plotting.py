"""Figures written next to the CSV reports.

Rendering goes through the Agg backend with fixed metadata so that the same
report always produces the same PNG bytes.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis_dse import MB, SweepResult  # noqa: E402
from .compression import CompressionReport  # noqa: E402

_LABELS = {"sr": "squeeze ratio (SR)", "pct3x3": "fraction of 3x3 expand filters (pct3x3)"}
_PNG_META = {"Software": None}

RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 9,
    "lines.linewidth": 1.5,
    "lines.markersize": 5,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "squeezekit",
}


def figure_path(csv_path) -> str:
    """``sweep.csv`` -> ``sweep.png``."""
    s = str(csv_path)
    return (s[:-4] if s.lower().endswith(".csv") else s) + ".png"


def plot_sweep(result: SweepResult, path) -> None:
    """Model size against the swept metaparameter; toy accuracy on a second axis if present."""
    xs = [r.value for r in result.rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.5, 3.6))
        ax.plot(xs, [r.size_bytes / MB for r in result.rows], "o-", color="tab:blue",
                label="model size")
        ax.set_xlabel(_LABELS.get(result.param, result.param))
        ax.set_ylabel("model size (MB, 32-bit)")
        accs = [r.toy_accuracy for r in result.rows]
        if any(a is not None for a in accs):
            ax2 = ax.twinx()
            ax2.plot([x for x, a in zip(xs, accs) if a is not None],
                     [a for a in accs if a is not None], "s--", color="tab:orange",
                     label="toy accuracy")
            ax2.set_ylabel("toy held-out accuracy")
            ax2.set_ylim(0, 1)
            ax2.grid(False)
        ax.set_title(f"{result.variant}: size vs {result.param}")
        fig.tight_layout()
        fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
        plt.close(fig)


def plot_compression(report: CompressionReport, path) -> None:
    """Per-layer dense vs compressed bytes (log scale)."""
    names = [layer.name for layer in report.layers if layer.name.endswith(".weight")]
    by_name = {layer.name: layer for layer in report.layers}
    dense = [4 * by_name[n].size for n in names]
    comp = [by_name[n].bytes for n in names]
    pos = range(len(names))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(9, 3.8))
        ax.bar([p - 0.2 for p in pos], dense, width=0.4, label="dense 32-bit")
        ax.bar([p + 0.2 for p in pos], comp, width=0.4, label="compressed")
        ax.set_yscale("log")
        ax.set_xticks(list(pos))
        ax.set_xticklabels([n[: -len(".weight")] for n in names], rotation=90, fontsize=7)
        ax.set_ylabel("bytes")
        ax.set_title(f"{report.compressed_mb:.3f} MB compressed, {report.ratio:.0f}x vs baseline")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
        plt.close(fig)

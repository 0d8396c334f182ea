"""Figures for an evaluation report, rendered to PNG files with the Agg backend."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalReport, roc_curve  # noqa: E402

log = logging.getLogger(__name__)


def _bar_groups(ax, groups: list[str], series: dict[str, list], ylabel: str):
    n = max(1, len(series))
    width = 0.8 / n
    x = np.arange(len(groups))
    for i, (name, vals) in enumerate(series.items()):
        heights = [np.nan if v is None else v for v in vals]
        ax.bar(x + (i - (n - 1) / 2) * width, heights, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(groups, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.05)
    ax.axhline(0.5, color="grey", lw=0.8, ls=":")
    ax.legend(fontsize="small", ncol=min(n, 4))


def plot_object_auroc(report: EvalReport, path) -> Path:
    mean = report.mean_row()["object_auroc"]
    groups = report.categories + ["mean"]
    series = {
        c: [report.object_auroc[cat][c] for cat in report.categories] + [mean[c]] for c in report.configurations
    }
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(groups) * max(1, len(series)) / 3), 4))
    _bar_groups(ax, groups, series, "object AUROC")
    ax.set_title("Object-level AUROC per configuration")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_localization(report: EvalReport, path) -> Path:
    loc = report.mean_row()["localization"]
    keys = ("auroc", "f1_max", "aupr")
    series = {k: [loc[m][k] for m in report.modalities] for k in keys}
    fig, ax = plt.subplots(figsize=(6, 4))
    _bar_groups(ax, report.modalities, series, "mean over categories")
    ax.set_title("Localization (pixel / point level)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_roc(report: EvalReport, category: str, path) -> Path | None:
    entries = report.object_scores.get(category)
    if not entries:
        return None
    fig, ax = plt.subplots(figsize=(5, 5))
    for name in report.configurations:
        e = entries.get(name)
        if not e or len(set(e["labels"])) < 2:
            continue
        fpr, tpr = roc_curve(e["scores"], e["labels"])
        auc = report.object_auroc[category].get(name)
        ax.plot(fpr, tpr, drawstyle="steps-post", label=f"{name} ({auc:.3f})" if auc is not None else name)
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"ROC: {category}")
    ax.legend(fontsize="small", loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def render_report(report: EvalReport, out_dir) -> list[Path]:
    """Write the figure set under ``out_dir/figures``; returns the written paths."""
    fdir = Path(out_dir) / "figures"
    fdir.mkdir(parents=True, exist_ok=True)
    written = [plot_object_auroc(report, fdir / "object_auroc.png"), plot_localization(report, fdir / "localization.png")]
    for cat in report.categories:
        p = plot_roc(report, cat, fdir / f"roc_{cat}.png")
        if p is not None:
            written.append(p)
    log.info("report: wrote %d figures to %s", len(written), fdir)
    return written

"""Matplotlib figures for score reports: calibration histograms and mean
score comparisons, rendered to PNG files next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .verification import HistogramResult, ScoreReport

__all__ = ["histogram_figure", "score_comparison_figure", "render_report_figures"]

# keep PNG output byte-stable across runs
_SAVEFIG = {"dpi": 110, "metadata": {"Software": "enscopula"}}


def _slug(name: str) -> str:
    return name.replace("/", "_").replace(" ", "_")


def histogram_figure(hist: HistogramResult, title: str, path):
    """Bar chart of bin frequencies with the uniform reference line."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    edges = np.arange(hist.spec.bins)
    ax.bar(edges, hist.frequencies, width=0.92, color="#4878a8", edgecolor="none")
    ax.axhline(1.0 / hist.spec.bins, color="#b04030", linewidth=1.2, linestyle="--")
    ax.set_title(f"{title}  (chi2={hist.chi2:.1f}, p={hist.p_value:.3g})", fontsize=9)
    ax.set_xlabel("bin")
    ax.set_ylabel("frequency")
    ax.set_xticks(edges[:: max(1, hist.spec.bins // 10)])
    ax.set_xticklabels(edges[:: max(1, hist.spec.bins // 10)] + 1, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path


def score_comparison_figure(report: ScoreReport, path):
    """Grouped bars of mean CRPS per scope and mean energy score per system."""
    agg = report.aggregates()["means"]
    scopes = sorted(agg)
    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    systems: list = sorted({s for scope in agg.values() for s in scope})
    width = 0.8 / max(len(systems), 1)
    shades = plt.get_cmap("viridis")(np.linspace(0.15, 0.85, len(systems)))
    for si, system in enumerate(systems):
        xs, ys = [], []
        for pos, scope in enumerate(scopes):
            metrics = agg[scope].get(system)
            if not metrics:
                continue
            value = metrics.get("crps", metrics.get("energy_score"))
            if value is None:
                continue
            xs.append(pos + si * width)
            ys.append(value)
        if xs:
            ax.bar(xs, ys, width=width, label=system, color=shades[si])
    ax.set_xticks(np.arange(len(scopes)) + 0.4 - width / 2)
    ax.set_xticklabels(scopes, fontsize=7, rotation=20, ha="right")
    ax.set_ylabel("mean CRPS / energy score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path


def render_report_figures(report: ScoreReport, directory) -> list:
    """One PNG per histogram plus the mean-score comparison chart."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, hist in sorted(report.histograms.items()):
        path = directory / f"{_slug(name)}.png"
        histogram_figure(hist, name, path)
        written.append(path)
    if report.records:
        path = directory / "score_comparison.png"
        score_comparison_figure(report, path)
        written.append(path)
    return written

"""Figure and CSV rendering for eval/bench reports.

Figures are written next to the JSON report as PNG files; the CSV holds
the same per-dataset rows for spreadsheet use.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams.update(
    {
        "figure.figsize": (6.4, 3.6),
        "figure.dpi": 120,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "font.size": 9,
    }
)

_DENSE_COLOR = "#4878d0"
_PRUNED_COLOR = "#ee854a"


def write_report_csv(report: dict, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "metric", "dense", "pruned", "retention"])
        for name, row in report.get("datasets", {}).items():
            writer.writerow([name, row["metric"], row["dense"], row["pruned"], row["retention"]])
        timing = report.get("timing")
        if timing:
            writer.writerow([])
            writer.writerow(["timing", "tokens_per_sec", timing["tokens_per_sec_dense"],
                             timing["tokens_per_sec_pruned"], timing["speedup"]])
            writer.writerow(["timing", "flops", timing["flops_dense"],
                             timing["flops_pruned"], timing["flop_ratio"]])


def render_eval_figures(report: dict, stem: Path) -> list[Path]:
    """Dense-vs-pruned metric bars and a retention bar chart."""
    datasets = report.get("datasets", {})
    written: list[Path] = []
    if datasets:
        names = list(datasets)
        x = range(len(names))
        fig, ax = plt.subplots()
        ax.bar([i - 0.2 for i in x], [datasets[n]["dense"] for n in names], 0.4,
               label="dense", color=_DENSE_COLOR)
        ax.bar([i + 0.2 for i in x], [datasets[n]["pruned"] for n in names], 0.4,
               label="pruned", color=_PRUNED_COLOR)
        ax.set_xticks(list(x))
        ax.set_xticklabels([f"{n}\n({datasets[n]['metric']})" for n in names], fontsize=8)
        ax.set_ylabel("metric value")
        ax.legend()
        fig.tight_layout()
        path = stem.with_name(stem.name + "_metrics.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots()
        retentions = [
            100.0 * (datasets[n]["retention"] if datasets[n]["retention"] is not None else 0.0)
            for n in names
        ]
        ax.bar(list(x), retentions, 0.5, color=_PRUNED_COLOR)
        ax.axhline(100.0, color="gray", linewidth=1, linestyle="--")
        ax.set_xticks(list(x))
        ax.set_xticklabels(names, fontsize=8)
        ax.set_ylabel("retention (%)")
        fig.tight_layout()
        path = stem.with_name(stem.name + "_retention.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    timing = report.get("timing")
    if timing:
        written.append(render_bench_figure(timing, stem))
    return written


def render_bench_figure(timing: dict, stem: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    bars = ax.bar(
        ["dense", "pruned"],
        [timing["tokens_per_sec_dense"], timing["tokens_per_sec_pruned"]],
        0.5,
        color=[_DENSE_COLOR, _PRUNED_COLOR],
    )
    ax.bar_label(bars, fmt="%.0f", fontsize=8)
    ax.set_ylabel("tokens / sec (single thread)")
    ax.set_title(
        f"speedup {timing['speedup']:.2f}x, analytic FLOP ratio {timing['flop_ratio']:.2f}x",
        fontsize=9,
    )
    fig.tight_layout()
    path = stem.with_name(stem.name + "_speed.png")
    fig.savefig(path)
    plt.close(fig)
    return path

"""Summary tables and figures for metric reports and training runs."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_KEYS, METRIC_LABELS, METRIC_SCALES, MetricReport, summarize  # noqa: E402

FIGURE_RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "dape",
}


def _scale_label(key):
    s = METRIC_SCALES[key]
    return "x1" if s == 1 else f"x1e{int(round(np.log10(s)))}"


def format_table(rows, title=None):
    """Aligned text table; ``rows`` are dicts with ``label`` plus the five metrics.

    Values are shown divided by their presentation scale (e.g. CLIP-F 0.9481 -> 94.81).
    """
    head = ["Method"] + [f"{METRIC_LABELS[k]} ({_scale_label(k)})" for k in METRIC_KEYS]
    body = [[str(r.get("label", ""))] + [f"{r[k] / METRIC_SCALES[k]:.2f}" for k in METRIC_KEYS] for r in rows]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    lines = [title] if title else []
    lines += [fmt(head), "  ".join("-" * w for w in widths)]
    lines += [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def report_rows(reports):
    """One row per report, labelled by ``label`` or the edited clip id."""
    return [{"label": r.label or r.edited_id, **r.metrics()} for r in reports]


def summary_table(reports, title=None):
    rows = report_rows(reports)
    mean = summarize(reports)
    return format_table(rows + [mean], title), mean


def write_jsonl(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [r.to_json() if isinstance(r, MetricReport) else json.dumps(r, sort_keys=True) for r in records]
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_reports(path):
    return [MetricReport.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def plot_metric_rows(rows, path, title=None):
    """One panel per metric, one bar per row."""
    with plt.rc_context(FIGURE_RC):
        fig, axes = plt.subplots(1, len(METRIC_KEYS), figsize=(2.2 * len(METRIC_KEYS), 2.6))
        labels = [str(r["label"]) for r in rows]
        x = np.arange(len(rows))
        for ax, key in zip(axes, METRIC_KEYS):
            ax.bar(x, [r[key] / METRIC_SCALES[key] for r in rows], color="0.45", width=0.7)
            ax.set_title(f"{METRIC_LABELS[key]} ({_scale_label(key)})")
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=60, ha="right")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return Path(path)


def plot_losses(reports, path, window=10):
    """Per-step training loss with a moving average, one panel per stage."""
    with plt.rc_context(FIGURE_RC):
        fig, axes = plt.subplots(1, len(reports), figsize=(3.4 * len(reports), 2.6), squeeze=False)
        for ax, rep in zip(axes[0], reports):
            y = np.asarray(rep.losses)
            ax.plot(y, lw=0.6, color="0.6", label="step")
            if len(y) >= window:
                ma = np.convolve(y, np.ones(window) / window, mode="valid")
                ax.plot(np.arange(window - 1, len(y)), ma, lw=1.2, color="k", label=f"mean/{window}")
            ax.set_title(rep.stage)
            ax.set_xlabel("step")
            ax.set_ylabel("Huber loss")
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return Path(path)

"""Figures and delimited tables for runs and ablation sweeps.

Every plot renders through the Agg backend straight to a file; nothing
here opens a window. Delimited output is tab-separated with a one-line
header so the same rows feed both the figures and external tools.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import EvalReport  # noqa: E402


def format_cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_tsv(path: str | Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(repr(v) if isinstance(v, float) else format_cell(v)
                              for v in row) + "\n")
    return path


def aligned_table(header: list[str], rows: list[list]) -> str:
    """Fixed-width text rendering of the same rows written to TSV."""
    cells = [header] + [[format_cell(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def plot_loss_curve(step_records: list[dict], path: str | Path) -> Path:
    """Loss components over optimization steps from run.jsonl step lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in step_records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r["loss_total"] for r in step_records], label="total", lw=1.5)
    ax.plot(steps, [r["loss_task"] for r in step_records], label="task", lw=1.0)
    anchor = [(r["step"], r["loss_anchor"]) for r in step_records
              if r.get("loss_anchor") is not None]
    if anchor:
        ax.plot([a[0] for a in anchor], [a[1] for a in anchor],
                label="anchor", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_metric_history(epoch_records: list[dict], path: str | Path) -> Path:
    """Per-epoch validation metrics from run.jsonl epoch lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in epoch_records]
    keys = sorted({k for r in epoch_records for k, v in r["metrics"].items()
                   if v is not None})
    for key in keys:
        ax.plot(epochs, [r["metrics"].get(key) for r in epoch_records],
                marker="o", ms=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy (%)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_per_class(report: EvalReport, path: str | Path) -> Path:
    """Per-class accuracy bars, one panel per sub-result."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panels = sorted(report.results)
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 4),
                             squeeze=False)
    for ax, name in zip(axes[0], panels):
        per_class = report.results[name].per_class
        labels = sorted(per_class)
        ax.bar(range(len(labels)), [per_class[c] for c in labels],
               color="#4878a8")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
        ax.set_ylim(0, 100)
        ax.set_title(name)
        ax.set_ylabel("top-1 (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_grouped_bars(rows: list[dict], group_key: str, metric_keys: list[str],
                      path: str | Path, xlabel: str = "") -> Path:
    """Grouped bars, one cluster per row (e.g. coupling variant), one bar
    per metric; used for the coupling and regularizer comparisons."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups = [str(r[group_key]) for r in rows]
    n = len(metric_keys)
    width = 0.8 / max(n, 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.3 * len(groups)), 4))
    for j, key in enumerate(metric_keys):
        xs = [i + (j - (n - 1) / 2) * width for i in range(len(groups))]
        ax.bar(xs, [r.get(key) or 0.0 for r in rows], width=width, label=key)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups, rotation=25, ha="right")
    ax.set_ylabel("accuracy (%)")
    if xlabel:
        ax.set_xlabel(xlabel)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_anchor_curve(rows: list[dict], metric_keys: list[str],
                      path: str | Path) -> Path:
    """Metric-vs-anchor-count curves; rows need a 'k' key."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: r["k"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in metric_keys:
        ax.plot([r["k"] for r in rows], [r.get(key) for r in rows],
                marker="o", label=key)
    ax.set_xlabel("anchor count K")
    ax.set_ylabel("accuracy (%)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path

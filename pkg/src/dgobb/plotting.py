"""SVG charts for loss logs and ablation results (matplotlib, no display needed)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "dgobb"  # stable element ids, so reruns give identical files
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import ABLATION_COLUMNS, TARGET, read_ablation_csv, summarize  # noqa: E402
from .training import CSV_COLUMNS  # noqa: E402


def read_loss_csv(path) -> dict[str, list[float]]:
    """Columns of a per-step loss log; a malformed row raises with its line number."""
    cols: dict = {c: [] for c in CSV_COLUMNS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return cols
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            for c, v in zip(CSV_COLUMNS, vals):
                cols[c].append(v)
    return cols


def _csv_kind(path) -> str:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        return "empty"
    if tuple(header) == CSV_COLUMNS:
        return "loss"
    if tuple(header) == ABLATION_COLUMNS:
        return "ablation"
    raise ValueError(f"{path}:1: unrecognised header {header}")


def loss_figure(cols: dict):
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = cols["step"]
    for name in CSV_COLUMNS[1:]:
        if cols[name] and any(cols[name]):
            ax.plot(steps, cols[name], label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if steps:
        ax.legend(fontsize=8)
    return fig, ax


def ablation_figure(records):
    summary = [s for s in summarize(records) if s["domain"] == TARGET]
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [f"{s['matrix']}:{s['row']}" for s in summary]
    values = [s["mAP"] or 0.0 for s in summary]
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(values)), labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("median target mAP@0.5")
    fig.tight_layout()
    return fig, ax


def plot_csv(csv_path, out_dir) -> Path:
    """Write ``<out_dir>/<csv stem>.svg``; an empty CSV gives an empty chart."""
    csv_path = Path(csv_path)
    kind = _csv_kind(csv_path)
    if kind == "ablation":
        fig, _ = ablation_figure(read_ablation_csv(csv_path))
    elif kind == "loss":
        fig, _ = loss_figure(read_loss_csv(csv_path))
    else:
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.set_title("no data")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{csv_path.stem}.svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path

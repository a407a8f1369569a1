"""Tab-separated result tables and matplotlib figures written next to them."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_tsv(path: Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return path


def render_tsv(header: list[str], rows: list[list]) -> str:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines)


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def training_curves(records_by_variant: dict[str, list[dict]], path: Path) -> Path:
    """Train loss per epoch, one line per (variant, seed)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for variant, records in records_by_variant.items():
        curves = defaultdict(list)
        for r in records:
            if r["split"] == "train":
                curves[r["seed"]].append((r["epoch"], r["value"]))
        for seed, pts in sorted(curves.items()):
            e, v = zip(*sorted(pts))
            ax.plot(e, v, label=f"{variant} seed {seed}", alpha=0.85)
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax.legend(fontsize=7)
    return _save(fig, path)


def grouped_bars(
    groups: list[str],
    series: dict[str, list[float]],
    ylabel: str,
    path: Path,
    errors: dict[str, list[float]] | None = None,
    title: str | None = None,
) -> Path:
    """Bar chart with one cluster per group and one bar per series."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(groups))
    for i, (name, vals) in enumerate(series.items()):
        err = errors.get(name) if errors else None
        ax.bar(x + (i - (len(series) - 1) / 2) * width, vals, width, yerr=err, label=name, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=8)
    return _save(fig, path)

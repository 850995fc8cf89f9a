"""Static figure rendering for the CLI report paths.

Each renderer takes already-written data (metrics records, trace arrays,
bench rows) and produces a PNG next to the delimited file.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def read_metrics(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def render_metrics(records: list[dict], out_png) -> Path:
    """Loss and accuracy curves against samples seen."""
    out_png = Path(out_png)
    if not records:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.set_title("no evaluations recorded")
        fig.savefig(out_png, dpi=120)
        plt.close(fig)
        return out_png
    samples = [r["samples_seen"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    key = "bpc" if "bpc" in records[0] else "loss"
    ax1.plot(samples, [r[key] for r in records], marker="o", lw=1.2)
    ax1.set_xlabel("samples seen")
    ax1.set_ylabel("validation BPC" if key == "bpc" else "validation NLL")
    ax1.grid(alpha=0.3)
    ax2.plot(samples, [r["accuracy"] for r in records], marker="o", lw=1.2, color="tab:green")
    ax2.set_xlabel("samples seen")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(-0.02, 1.02)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_trace(trace: np.ndarray, out_png, title: str = "memory cell trace") -> Path:
    """Heatmap of normalized diagonal channel means: rows run from the
    input corner (top) to the output corner (bottom), columns are steps."""
    out_png = Path(out_png)
    fig, ax = plt.subplots(figsize=(max(6, trace.shape[1] * 0.3), 2.5))
    im = ax.imshow(trace, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xlabel("cell step")
    ax.set_ylabel("diagonal location")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.03)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_bench(rows: list[dict], out_png) -> Path:
    """Wall time per update step against depth, one line per model."""
    out_png = Path(out_png)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    models = sorted({r["model"] for r in rows})
    for name in models:
        sub = [r for r in rows if r["model"] == name]
        depths = [r["depth"] for r in sub]
        ax1.plot(depths, [r["wall_ms_per_step"] for r in sub], marker="o", label=name)
        ax2.plot(depths, [r["params"] for r in sub], marker="s", label=name)
    ax1.set_xlabel("depth L")
    ax1.set_ylabel("wall ms per sequence step")
    ax1.grid(alpha=0.3)
    ax1.legend()
    ax2.set_xlabel("depth L")
    ax2.set_ylabel("parameter count")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png

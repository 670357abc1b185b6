"""Static SVG figures for training logs and probe histories."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids/no timestamp so identical inputs give identical files
plt.rcParams["svg.hashsalt"] = "stars"
_SVG_META = {"Date": None}


def savefig(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_curves(
    curves: Mapping[str, Sequence[dict]],
    field: str,
    path: str | Path,
    ylabel: str | None = None,
    title: str | None = None,
) -> Path:
    """One line per named record list, ``field`` against ``epoch``; records missing the field are skipped."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for name, records in curves.items():
        pts = [(r["epoch"], r[field]) for r in records if r.get(field) is not None]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=name, lw=1.4)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel or field.replace("_", " "))
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend(frameon=False)
    return savefig(fig, path)


def plot_probe_history(history: Sequence[dict], path: str | Path) -> Path:
    return plot_curves({"train": [{"epoch": h["epoch"], "acc": h["train_accuracy"]} for h in history],
                        "test": [{"epoch": h["epoch"], "acc": h["test_accuracy"]} for h in history]},
                       "acc", path, ylabel="accuracy", title="linear probe")

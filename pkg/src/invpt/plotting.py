"""Report figures. Everything renders off-screen straight to files."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .flops import CATEGORIES, FlopsBreakdown

RC = {"figsize": (6.0, 3.6), "dpi": 120}


def _new(ncols: int = 1, width: float | None = None) -> tuple[Figure, list]:
    w, h = RC["figsize"]
    fig = Figure(figsize=(width or w * ncols, h), dpi=RC["dpi"])
    FigureCanvasAgg(fig)
    axes = [fig.add_subplot(1, ncols, i + 1) for i in range(ncols)]
    return fig, axes


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    return path


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    window = max(1, min(window, len(v)))
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def loss_curve(curves: Mapping[str, Sequence[float]], path: str | Path,
               window: int = 100) -> Path:
    """Raw (faint) and smoothed training loss, one line per run."""
    fig, (ax,) = _new()
    for label, losses in curves.items():
        it = np.arange(len(losses))
        line, = ax.plot(it, losses, lw=0.6, alpha=0.25)
        sm = moving_average(losses, window)
        ax.plot(it[len(it) - len(sm):], sm, color=line.get_color(), lw=1.6, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)


def flops_bars(breakdowns: Sequence[FlopsBreakdown], path: str | Path) -> Path:
    """Stacked per-category decoder FLOPs, one bar per variant."""
    fig, (ax,) = _new()
    labels = [f"{b.variant}\nr={b.retention:g}" if b.variant == "selective" else b.variant
              for b in breakdowns]
    x = np.arange(len(breakdowns))
    bottom = np.zeros(len(breakdowns))
    for cat in CATEGORIES:
        vals = np.array([b.category_total(cat) for b in breakdowns], dtype=float) / 1e6
        if not vals.any():
            continue
        ax.bar(x, vals, bottom=bottom, label=cat, width=0.6)
        bottom += vals
    ax.set_xticks(x, labels)
    ax.set_ylabel("MFLOPs")
    ax.legend(frameon=False, fontsize=7, ncol=2)
    return _save(fig, path)


def stage_ablation(results: Mapping[int, Mapping[str, Mapping[str, float]]],
                   path: str | Path) -> Path:
    """One panel per task metric against the number of decoder stages."""
    stages = sorted(results)
    keys = [(t, m) for t, ms in results[stages[0]].items() for m in ms]
    fig, axes = _new(ncols=len(keys), width=3.0 * len(keys))
    for ax, (task, metric) in zip(axes, keys):
        ax.plot(stages, [results[s][task][metric] for s in stages], marker="o")
        ax.set_xticks(stages)
        ax.set_xlabel("decoder stages")
        ax.set_title(f"{task} {metric}", fontsize=9)
    return _save(fig, path)


def retention_sweep(retentions: Sequence[float], flops: Sequence[float],
                    path: str | Path, reference: float | None = None) -> Path:
    """Decoder FLOPs of the selective variant as the retention ratio varies."""
    fig, (ax,) = _new()
    ax.plot(retentions, np.asarray(flops) / 1e6, marker="o", label="selective")
    if reference is not None:
        ax.axhline(reference / 1e6, ls="--", color="0.4", label="fusion")
    ax.set_xlabel("retention ratio")
    ax.set_ylabel("MFLOPs")
    ax.legend(frameon=False)
    return _save(fig, path)

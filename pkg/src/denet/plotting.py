"""Report figures rendered straight to PNG files (no display needed)."""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .evaluate import TIMING_STAGES, TimingBreakdown, pr_curve

_METADATA = {"Software": None}


def _new(width: float = 5.0, height: float = 3.6) -> tuple[Figure, object]:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(111)


def _save(fig: Figure, path: str | os.PathLike) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata=_METADATA)


def plot_pr_curves(hits, gt, class_count: int, path, iou_thresh: float = 0.5, names: Sequence[str] | None = None) -> None:
    fig, ax = _new()
    for c in range(class_count):
        precision, recall, n_gt = pr_curve(hits, gt, c, iou_thresh)
        if n_gt == 0:
            continue
        label = names[c] if names and c < len(names) else f"class {c}"
        ax.step(np.concatenate([[0.0], recall]), np.concatenate([[1.0], precision]), where="post", label=label)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"precision-recall at IoU {iou_thresh:.2f}")
    ax.legend(loc="lower left", fontsize=8)
    _save(fig, path)


def plot_coverage(coverage_at: Mapping[float, float], path, by_n: Mapping[int, float] | None = None) -> None:
    """Coverage against the IoU threshold, and against N when ``by_n`` is given."""
    if by_n:
        fig = Figure(figsize=(8.0, 3.4), dpi=100)
        FigureCanvasAgg(fig)
        ax, ax2 = fig.add_subplot(121), fig.add_subplot(122)
        ns = sorted(by_n)
        ax2.plot(ns, [by_n[n] for n in ns], marker="o")
        ax2.set_xlabel("N (RoIs = N^2)")
        ax2.set_ylabel("coverage@0.5")
        ax2.set_ylim(0, 1.02)
    else:
        fig, ax = _new()
    ts = sorted(coverage_at)
    ax.plot(ts, [coverage_at[t] for t in ts], marker="o")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("coverage")
    ax.set_ylim(0, 1.02)
    _save(fig, path)


def plot_timing(timing: TimingBreakdown, path) -> None:
    fig, ax = _new()
    ms = [timing.stages[k] for k in TIMING_STAGES]
    ax.barh(range(len(ms)), ms, color="tab:blue")
    ax.set_yticks(range(len(ms)), [k.replace("_", " ") for k in TIMING_STAGES])
    ax.invert_yaxis()
    ax.set_xlabel("ms per image")
    ax.set_title(f"total {timing.total:.2f} ms per image")
    _save(fig, path)


def plot_training(rows: Sequence[tuple], path) -> None:
    """Loss components and training coverage from metrics rows."""
    fig = Figure(figsize=(8.0, 3.4), dpi=100)
    FigureCanvasAgg(fig)
    ax, ax2 = fig.add_subplot(121), fig.add_subplot(122)
    if rows:
        arr = np.array([r[:8] for r in rows], dtype=np.float64)
        for j, name in ((3, "total"), (4, "corner"), (5, "class"), (6, "bbox")):
            ax.plot(arr[:, 0], arr[:, j], label=name, lw=0.8)
        ax2.plot(arr[:, 0], arr[:, 7], lw=0.8)
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("normalized loss")
    ax.legend(fontsize=8)
    ax2.set_xlabel("step")
    ax2.set_ylabel("coverage@0.5 (train batch)")
    _save(fig, path)


def plot_detections(image: np.ndarray, hits, path, gt=None, names: Sequence[str] | None = None) -> None:
    fig, ax = _new(4.0, 4.0)
    ax.imshow(np.clip(np.transpose(image, (1, 2, 0)), 0, 1), interpolation="nearest")
    for _, b in gt or []:
        x1, y1, x2, y2 = b.as_tuple() if hasattr(b, "as_tuple") else b
        ax.add_patch(Rectangle((x1 - 0.5, y1 - 0.5), x2 - x1, y2 - y1, fill=False, ec="white", ls="--", lw=1))
    for h in hits:
        x1, y1, x2, y2 = h.box.as_tuple() if hasattr(h.box, "as_tuple") else h.box
        ax.add_patch(Rectangle((x1 - 0.5, y1 - 0.5), x2 - x1, y2 - y1, fill=False, ec="red", lw=1))
        label = names[h.class_id] if names and h.class_id < len(names) else str(h.class_id)
        ax.text(x1, y1, f"{label} {h.confidence:.2f}", color="red", fontsize=6, va="bottom")
    ax.set_axis_off()
    _save(fig, path)

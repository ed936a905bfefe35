"""Detection metrics: IoU, NMS, RoI coverage and average precision."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

IOU_RANGE = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
TIMING_STAGES = ("estimate_corners", "generate_roi", "classify_roi", "estimate_instances")


def _xyxy(box) -> tuple[float, float, float, float]:
    if hasattr(box, "as_tuple"):
        return box.as_tuple()
    return tuple(float(v) for v in box)


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = _xyxy(a)
    bx1, by1, bx2, by2 = _xyxy(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a[R, 4]`` and ``b[G, 4]`` (x1, y1, x2, y2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _rank_key(hit):
    return (-hit.confidence, *_xyxy(hit.box))


def nms(hits: Sequence, iou_thresh: float = 0.5) -> list:
    """Greedy per-class suppression; survivors come back in confidence order."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    ordered = sorted(hits, key=_rank_key)
    kept: list = []
    by_class: dict[int, list] = {}
    for h in ordered:
        mine = by_class.setdefault(h.class_id, [])
        if mine:
            ious = iou_matrix(np.array([_xyxy(h.box)]), np.array(mine))[0]
            if np.any(ious >= iou_thresh):
                continue
        mine.append(_xyxy(h.box))
        kept.append(h)
    return kept


def coverage(rois: Iterable, gt_boxes: Iterable, iou_thresh: float = 0.5) -> float:
    """Fraction of ground-truth boxes with some RoI at IoU strictly above ``iou_thresh``."""
    g = np.array([_xyxy(getattr(b, "box", b)) for b in gt_boxes]).reshape(-1, 4)
    if len(g) == 0:
        return 1.0
    r = np.array([_xyxy(getattr(b, "box", b)) for b in rois]).reshape(-1, 4)
    if len(r) == 0:
        return 0.0
    return float(np.mean(iou_matrix(g, r).max(axis=1) > iou_thresh))


def covered_count(rois: np.ndarray, gt_boxes: np.ndarray, iou_thresh: float = 0.5) -> int:
    if len(gt_boxes) == 0 or len(rois) == 0:
        return 0
    return int(np.sum(iou_matrix(gt_boxes, rois).max(axis=1) > iou_thresh))


def _pr_area(precision: np.ndarray, recall: np.ndarray, interp: str) -> float:
    if interp == "11point":
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0 for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def pr_curve(hits: Sequence[Sequence], gt: Sequence[Sequence], class_id: int, iou_thresh: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Precision and recall after each hit of ``class_id``, best first.

    ``hits``/``gt`` are per-image lists with gt entries ``(class_id, box)``.
    Each ground-truth box is matched at most once, by the highest-confidence
    hit that reaches ``iou_thresh`` on it (best unmatched IoU wins).
    """
    gts = [np.array([_xyxy(b) for c, b in img if c == class_id]).reshape(-1, 4) for img in gt]
    n_gt = sum(len(g) for g in gts)
    dets = [(h, i) for i, img in enumerate(hits) for h in img if h.class_id == class_id]
    dets.sort(key=lambda d: (_rank_key(d[0]), d[1]))
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(dets))
    for j, (h, i) in enumerate(dets):
        if len(gts[i]) == 0:
            continue
        ious = iou_matrix(np.array([_xyxy(h.box)]), gts[i])[0]
        ious[used[i]] = -1.0
        k = int(np.argmax(ious))
        if ious[k] >= iou_thresh:
            used[i][k] = True
            tp[j] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.arange(1, len(dets) + 1)
    return precision, recall, n_gt


def class_ap(hits, gt, class_id: int, iou_thresh: float, interp: str = "all") -> float | None:
    """AP of one class, or ``None`` when it has no ground truth."""
    precision, recall, n_gt = pr_curve(hits, gt, class_id, iou_thresh)
    if n_gt == 0:
        return None
    if len(precision) == 0:
        return 0.0
    return _pr_area(precision, recall, interp)


def per_class_ap(hits, gt, iou_thresh: float, class_count: int | None = None, interp: str = "all") -> dict[int, float]:
    classes = range(class_count) if class_count is not None else sorted({c for img in gt for c, _ in img})
    out = {}
    for c in classes:
        ap = class_ap(hits, gt, c, iou_thresh, interp)
        if ap is not None:
            out[c] = ap
    return out


def average_precision(hits, gt, iou_thresh: float = 0.5, class_count: int | None = None, interp: str = "all") -> float:
    """Mean over classes (with at least one ground-truth instance) of per-class AP."""
    aps = per_class_ap(hits, gt, iou_thresh, class_count, interp)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def map_range(hits, gt, class_count: int | None = None, interp: str = "all") -> float:
    return float(np.mean([average_precision(hits, gt, t, class_count, interp) for t in IOU_RANGE]))


def recall_at_dets(hits, gt, max_dets: int) -> float:
    """Class-aware recall from each image's top ``max_dets`` hits, averaged over IoU 0.5:0.95."""
    n_gt = sum(len(img) for img in gt)
    if n_gt == 0:
        return 1.0
    values = []
    for t in IOU_RANGE:
        found = 0
        for img_hits, img_gt in zip(hits, gt):
            top = sorted(img_hits, key=_rank_key)[:max_dets]
            used = np.zeros(len(img_gt), dtype=bool)
            for h in top:
                best, k_best = -1.0, -1
                for k, (c, b) in enumerate(img_gt):
                    if c == h.class_id and not used[k]:
                        v = iou(h.box, b)
                        if v > best:
                            best, k_best = v, k
                if k_best >= 0 and best >= t:
                    used[k_best] = True
            found += int(used.sum())
        values.append(found / n_gt)
    return float(np.mean(values))


@dataclass
class EvalReport:
    map_50: float
    map_range: float
    per_class_ap: dict[int, float] = field(default_factory=dict)
    coverage_at: dict[float, float] = field(default_factory=dict)
    recall_at_dets: dict[int, float] = field(default_factory=dict)
    map_75: float = 0.0

    def rows(self) -> list[tuple[str, float]]:
        out = [("map_50", self.map_50), ("map_75", self.map_75), ("map_range", self.map_range)]
        out += [(f"ap_class_{c}", v) for c, v in sorted(self.per_class_ap.items())]
        out += [(f"coverage_{t:.2f}", v) for t, v in sorted(self.coverage_at.items())]
        out += [(f"recall_at_{k}", v) for k, v in sorted(self.recall_at_dets.items())]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, v in self.rows():
            w.writerow([name, f"{v:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = self.rows()
        width = max(len(n) for n, _ in rows)
        return "\n".join(f"{n.ljust(width)}  {100 * v:6.2f}%" for n, v in rows)


def evaluate_hits(hits, gt, rois_per_image, class_count: int, coverage_thresholds=(0.5, 0.6, 0.7, 0.8, 0.9), interp: str = "all") -> EvalReport:
    """Full report from per-image hits, ground truth and sampling boxes (pixel space)."""
    gt_boxes = [np.array([_xyxy(b) for _, b in img]).reshape(-1, 4) for img in gt]
    n_gt = sum(len(g) for g in gt_boxes)
    cov = {}
    for t in coverage_thresholds:
        hit = sum(covered_count(np.asarray(r).reshape(-1, 4), g, t) for r, g in zip(rois_per_image, gt_boxes))
        cov[t] = hit / n_gt if n_gt else 1.0
    return EvalReport(
        map_50=average_precision(hits, gt, 0.5, class_count, interp),
        map_range=map_range(hits, gt, class_count, interp),
        per_class_ap=per_class_ap(hits, gt, 0.5, class_count, interp),
        coverage_at=cov,
        recall_at_dets={k: recall_at_dets(hits, gt, k) for k in (1, 10, 100)},
        map_75=average_precision(hits, gt, 0.75, class_count, interp),
    )


@dataclass
class TimingBreakdown:
    stages: dict[str, float]
    total: float
    images: int = 0

    def fractions(self) -> dict[str, float]:
        return {k: v / self.total if self.total > 0 else 0.0 for k, v in self.stages.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "ms_per_image", "fraction"])
        fr = self.fractions()
        for k in TIMING_STAGES:
            w.writerow([k, f"{self.stages[k]:.4f}", f"{fr[k]:.4f}"])
        w.writerow(["total", f"{self.total:.4f}", "1.0000"])
        return buf.getvalue()

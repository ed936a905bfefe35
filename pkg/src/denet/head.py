"""Classification head over RoI features, target assignment and box coding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluate import iou_matrix
from .tensor import LayerSpec, ParamStore, Tensor, batchnorm, init_weights, linear, relu, sigmoid, softmax, split_channels

IOU_POSITIVE = 0.5


@dataclass
class DetectionHit:
    box: tuple[float, float, float, float]
    class_probs: np.ndarray = field(compare=False)
    class_id: int
    confidence: float

    @classmethod
    def from_probs(cls, box, class_probs: np.ndarray) -> "DetectionHit":
        """Ranks by the largest non-null probability (null is the last entry)."""
        k = int(np.argmax(class_probs[:-1]))
        return cls(tuple(float(v) for v in box), class_probs, k, float(class_probs[k]))


@dataclass(frozen=True)
class RegressionTarget:
    target_box: tuple[float, float, float, float]
    valid: bool


@dataclass
class Assignment:
    """Per-RoI targets; ``classes`` uses ``class_count`` for null."""

    classes: np.ndarray
    boxes: np.ndarray
    valid: np.ndarray
    best_iou: np.ndarray

    def regression_target(self, i: int) -> RegressionTarget:
        return RegressionTarget(tuple(float(v) for v in self.boxes[i]), bool(self.valid[i]))

    def onehot(self, class_count: int) -> np.ndarray:
        out = np.zeros((len(self.classes), class_count + 1), dtype=np.float32)
        out[np.arange(len(self.classes)), self.classes] = 1.0
        return out


def init_head(store: ParamStore, config, rng: np.random.Generator, dtype) -> None:
    width = config.feature_length
    for i, w in enumerate(config.head_widths):
        init_weights(store, f"head.{i}.fc", LayerSpec("linear", w), width, rng, dtype)
        init_weights(store, f"head.{i}.bn", LayerSpec("batchnorm"), w, rng, dtype)
        width = w
    init_weights(store, "head.out", LayerSpec("linear", config.class_count + 1 + 4), width, rng, dtype)


def classify_rois(store: ParamStore, features: Tensor, config, train: bool) -> tuple[Tensor, Tensor]:
    """Class distribution ``[R, C+1]`` (null last) and box parameters ``[R, 4]`` in (0, 1)."""
    if features.data.ndim != 2 or features.shape[1] != config.feature_length:
        raise ValueError(f"RoI features must be [R, {config.feature_length}], got {features.shape}")
    x = features
    for i in range(len(config.head_widths)):
        x = linear(x, store[f"head.{i}.fc.w"], store[f"head.{i}.fc.b"])
        x = relu(batchnorm(x, store[f"head.{i}.bn.gamma"], store[f"head.{i}.bn.beta"], store.moments[f"head.{i}.bn"], train))
    out = linear(x, store["head.out.w"], store["head.out.b"])
    logits, reg = split_channels(out, (config.class_count + 1, 4))
    return softmax(logits, axis=1), sigmoid(reg)


def soft_l1(x):
    """Smooth L1: ``0.5 x^2`` inside ``|x| < 1``, ``|x| - 0.5`` outside."""
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * np.square(x), ax - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def encode_boxes(rois: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Normalized ``(cx, cy, w, h)`` of ``gt`` inside a window twice the RoI's size.

    The window shares the RoI centre, so a perfectly placed RoI maps to
    ``(0.5, 0.5, 0.5, 0.5)``. Values are clipped to ``[0, 1]``.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    rw, rh = rois[:, 2] - rois[:, 0], rois[:, 3] - rois[:, 1]
    rcx, rcy = rois[:, 0] + 0.5 * rw, rois[:, 1] + 0.5 * rh
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gcx, gcy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    enc = np.stack([(gcx - rcx) / (2 * rw) + 0.5, (gcy - rcy) / (2 * rh) + 0.5, gw / (2 * rw), gh / (2 * rh)], axis=1)
    return np.clip(enc, 0.0, 1.0)


def decode_boxes(rois: np.ndarray, beta: np.ndarray, image_size: float) -> np.ndarray:
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1, 4)
    rw, rh = rois[:, 2] - rois[:, 0], rois[:, 3] - rois[:, 1]
    cx = rois[:, 0] + 0.5 * rw + (beta[:, 0] - 0.5) * 2 * rw
    cy = rois[:, 1] + 0.5 * rh + (beta[:, 1] - 0.5) * 2 * rh
    w, h = beta[:, 2] * 2 * rw, beta[:, 3] * 2 * rh
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return np.clip(out, 0.0, image_size)


def assign_targets(rois: np.ndarray, gt_boxes: np.ndarray, gt_classes, iou_pos: float = IOU_POSITIVE, class_count: int | None = None) -> Assignment:
    """Match every RoI to its highest-IoU ground-truth box (lowest index on ties).

    RoIs whose best IoU reaches ``iou_pos`` take that box's class and a valid
    regression target; the rest are null with an invalid target.
    """
    if not 0.0 < iou_pos < 1.0:
        raise ValueError(f"iou_pos must be in (0, 1), got {iou_pos}")
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    null = int(class_count if class_count is not None else (gt_classes.max() + 1 if gt_classes.size else 0))
    r = len(rois)
    classes = np.full(r, null, dtype=np.int64)
    targets = np.zeros((r, 4))
    valid = np.zeros(r, dtype=bool)
    best = np.zeros(r)
    if r and len(gt_boxes):
        ious = iou_matrix(rois, gt_boxes)
        idx = np.argmax(ious, axis=1)  # first maximum = lowest gt index
        best = ious[np.arange(r), idx]
        valid = best >= iou_pos
        classes[valid] = gt_classes[idx[valid]]
        if valid.any():
            targets[valid] = encode_boxes(rois[valid], gt_boxes[idx[valid]])
    return Assignment(classes, targets, valid, best)

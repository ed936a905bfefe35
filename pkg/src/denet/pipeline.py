"""Inference in four timed stages: corners, RoIs, classification, NMS."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evaluate import TIMING_STAGES, TimingBreakdown, evaluate_hits, nms
from .head import DetectionHit, decode_boxes
from .model import DeNet
from .sampler import lattice_indices, search_boxes
from .tensor import Tensor, concat_columns, gather_cells


@dataclass
class ImageResult:
    hits: list[DetectionHit]
    rois: np.ndarray  # sampling boxes in pixels, best first
    scores: np.ndarray


class StageTimer:
    def __init__(self):
        self.totals = {k: 0.0 for k in TIMING_STAGES}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - t0


@contextmanager
def _null_stage(name: str):
    yield


def detect(model: DeNet, images: np.ndarray, nms_iou: float = 0.5, min_conf: float = 0.0, n: int | None = None, timer: StageTimer | None = None) -> list[ImageResult]:
    cfg = model.config
    stage = timer.stage if timer else _null_stage
    n = n or cfg.N
    stride, extent = cfg.corner_stride, cfg.map_extent
    with stage("estimate_corners"):
        out = model.forward_base(np.asarray(images, dtype=model.dtype), train=False)
        probs = out.corner_probs.astype(np.float64)
    with stage("generate_roi"):
        found = [search_boxes(probs[i], cfg.lambda_thresh, cfg.M, n) for i in range(len(probs))]
    with stage("classify_roi"):
        counts = [len(b) for b, _ in found]
        cells = np.concatenate([b for b, _ in found]).astype(np.float64).reshape(-1, 4)
        pixel = (cells + 0.5) * stride
        if len(cells):
            ys, xs, wh = lattice_indices(cells, (extent, extent))
            bidx = np.repeat(np.arange(len(found)), counts)
            feats = concat_columns([gather_cells(out.features, bidx, ys, xs), Tensor(wh.astype(model.dtype))])
            class_probs, beta = model.classify(feats, train=False)
            cp = class_probs.data.astype(np.float64)
            boxes = decode_boxes(pixel, beta.data, cfg.input_size)
        else:
            cp = np.zeros((0, cfg.class_count + 1))
            boxes = np.zeros((0, 4))
    results = []
    with stage("estimate_instances"):
        start = 0
        for (b, s), c in zip(found, counts):
            hits = [DetectionHit.from_probs(boxes[j], cp[j]) for j in range(start, start + c)]
            hits = nms([h for h in hits if h.confidence >= min_conf], nms_iou)
            results.append(ImageResult(hits, pixel[start : start + c], s))
            start += c
    return results


def detect_dataset(model: DeNet, samples: Sequence, batch_size: int = 32, **kw) -> list[ImageResult]:
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        out += detect(model, np.stack([s.image for s in chunk]), **kw)
    return out


def evaluate_model(model: DeNet, samples: Sequence, batch_size: int = 32, interp: str = "all", **kw):
    results = detect_dataset(model, samples, batch_size, **kw)
    gt = [s.annotations for s in samples]
    return evaluate_hits([r.hits for r in results], gt, [r.rois for r in results], model.config.class_count, interp=interp), results


def timing_run(model: DeNet, images: np.ndarray, batch_size: int = 8, warmup: int = 1) -> TimingBreakdown:
    """Per-image wall-clock for each stage after ``warmup`` discarded batches."""
    images = np.asarray(images, dtype=model.dtype)
    batches = [images[i : i + batch_size] for i in range(0, len(images), batch_size)]
    for b in batches[:warmup] or batches[:1]:
        detect(model, b)
    timer = StageTimer()
    t0 = time.perf_counter()
    for b in batches:
        detect(model, b, timer=timer)
    total = time.perf_counter() - t0
    count = len(images)
    stages = {k: 1000.0 * v / count for k, v in timer.totals.items()}
    return TimingBreakdown(stages, 1000.0 * total / count, count)

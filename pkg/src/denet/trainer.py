"""Joint training of the corner detector and the RoI classifier."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as dataio
from .evaluate import covered_count
from .head import assign_targets
from .model import DeNet, ModelConfig, build_corner_target
from .sampler import BBox, augment_rois_training, generate_rois, lattice_indices
from .tensor import ParamStore, Tensor, add, concat_columns, gather_cells, nll, scale, smooth_l1_sum

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "epoch", "lr", "loss_total", "loss_corner", "loss_class", "loss_bbox", "coverage_train")
LAMBDA_FLOOR = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_s: float = 1.0
    lambda_t: float = 100.0
    lambda_b: float = 1.0
    Lambda_s: float | None = None
    Lambda_t: float | None = None
    Lambda_b: float | None = None

    def __post_init__(self):
        if min(self.lambda_s, self.lambda_t, self.lambda_b) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def calibrated(self) -> bool:
        return None not in (self.Lambda_s, self.Lambda_t, self.Lambda_b)

    def with_normalizers(self, corner: float, cls: float, bbox: float | None) -> "LossWeights":
        if self.calibrated:
            raise TrainingError("loss normalizers are already calibrated and cannot change")
        return replace(
            self,
            Lambda_t=max(float(corner), LAMBDA_FLOOR),
            Lambda_s=max(float(cls), LAMBDA_FLOOR),
            Lambda_b=1.0 if bbox is None else max(float(bbox), LAMBDA_FLOOR),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    drop_factor: float = 10.0
    drop_epochs: tuple[int, ...] = (10, 20)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    crop: bool = True
    crop_area: tuple[float, float] = (0.08, 1.0)
    crop_aspect: tuple[float, float] = (3 / 4, 4 / 3)
    mirror: bool = True
    photometric: bool = True
    random_fraction: float = 0.1
    iou_pos: float = 0.5
    warmup_epochs: float = 2.0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if any(b <= a for a, b in zip(self.drop_epochs, self.drop_epochs[1:])):
            raise ValueError(f"drop epochs must be strictly increasing: {self.drop_epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def scaled(cls, epochs: int, **kw) -> "TrainConfig":
        """Drops at one and two thirds of the run, as in a 90-epoch run dropping at 30 and 60."""
        drops = tuple(sorted({max(1, round(epochs / 3)), max(1, round(2 * epochs / 3))}))
        drops = tuple(d for d in drops if d < epochs)
        return cls(epochs=epochs, drop_epochs=drops, **kw)

    def lr_at(self, epoch: int, progress: float | None = None) -> float:
        """Step-schedule rate; ``progress`` (fractional epochs done) applies the linear warm-up."""
        lr = self.lr / self.drop_factor ** sum(epoch >= d for d in self.drop_epochs)
        if progress is not None and progress < self.warmup_epochs:
            lr *= (progress + 1e-3) / self.warmup_epochs
        return lr


# --------------------------------------------------------------------------
# loss


@dataclass
class LossParts:
    total: Tensor
    corner: Tensor
    cls: Tensor
    bbox: Tensor
    valid_count: int
    weights: LossWeights | None = None

    def normalized(self) -> dict[str, float]:
        w = self.weights
        return {
            "corner": self.corner.item() / w.Lambda_t,
            "class": self.cls.item() / w.Lambda_s,
            "bbox": self.bbox.item() / w.Lambda_b,
        }


def corner_onehot(targets: np.ndarray) -> np.ndarray:
    """``[B, 4, H, W]`` presence targets to ``[B, 4, 2, H, W]`` Bernoulli one-hots."""
    t = np.asarray(targets, dtype=np.float32)
    return np.stack([1.0 - t, t], axis=2)


def loss_components(corner_bernoulli: Tensor, corner_targets, class_probs: Tensor, class_onehot, beta: Tensor, reg_targets, valid, images: int):
    """Raw (un-normalized) corner NLL, class NLL and smooth-L1 terms, averaged per image."""
    inv = 1.0 / images
    corner = scale(nll(corner_bernoulli, corner_onehot(corner_targets)), inv)
    cls = scale(nll(class_probs, np.asarray(class_onehot, dtype=class_probs.dtype)), inv)
    bbox = scale(smooth_l1_sum(beta, np.asarray(reg_targets, dtype=beta.dtype), np.asarray(valid)), inv)
    return corner, cls, bbox


def joint_loss(corner_bernoulli, corner_targets, class_probs, class_onehot, beta, reg_targets, valid, weights: LossWeights, images: int = 1) -> LossParts:
    """Weighted sum of the three normalized components.

    The sampling boxes only enter through ``class_onehot``/``reg_targets`` and the
    gathered features, so no gradient ever reaches their coordinates.
    """
    if not weights.calibrated:
        raise TrainingError("loss weights are not calibrated")
    corner, cls, bbox = loss_components(corner_bernoulli, corner_targets, class_probs, class_onehot, beta, reg_targets, valid, images)
    total = add(
        add(scale(corner, weights.lambda_t / weights.Lambda_t), scale(cls, weights.lambda_s / weights.Lambda_s)),
        scale(bbox, weights.lambda_b / weights.Lambda_b),
    )
    return LossParts(total, corner, cls, bbox, int(np.sum(valid)), weights)


# --------------------------------------------------------------------------
# optimizer


def nesterov_step(store: ParamStore, velocity: dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float) -> None:
    """``v <- mu v + g``, ``p <- p - lr (g + mu v)``; decay is added to weight gradients only."""
    for name, p in store:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        if weight_decay and p.is_weight:
            g = g + weight_decay * p.value.data
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.value.data)
        v *= momentum
        v += g
        p.value.data -= (lr * (g + momentum * v)).astype(p.value.data.dtype)


# --------------------------------------------------------------------------
# augmentation


def _bilinear_crop(image: np.ndarray, x0: float, y0: float, cw: float, ch: float, out: int) -> np.ndarray:
    c, h, w = image.shape
    sx = x0 + (np.arange(out) + 0.5) * cw / out - 0.5
    sy = y0 + (np.arange(out) + 0.5) * ch / out - 0.5
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    xl = np.floor(sx).astype(int)
    yl = np.floor(sy).astype(int)
    xh = np.minimum(xl + 1, w - 1)
    yh = np.minimum(yl + 1, h - 1)
    fx = (sx - xl)[None, None, :]
    fy = (sy - yl)[None, :, None]
    top = image[:, yl][:, :, xl] * (1 - fx) + image[:, yl][:, :, xh] * fx
    bot = image[:, yh][:, :, xl] * (1 - fx) + image[:, yh][:, :, xh] * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype)


def _photometric(image: np.ndarray, rng: np.random.Generator, strength: float = 0.2) -> np.ndarray:
    b, c, s = rng.uniform(1 - strength, 1 + strength, size=3)
    img = image * b
    img = (img - img.mean()) * c + img.mean()
    grey = img.mean(axis=0, keepdims=True)
    img = (img - grey) * s + grey
    return np.clip(img, 0.0, 1.0).astype(image.dtype)


def augment_sample(image: np.ndarray, boxes: np.ndarray, classes: np.ndarray, rng: np.random.Generator, train: bool, size: int, cfg: TrainConfig | None = None):
    """Square black border, optional random crop, bilinear rescale to ``size``, mirror and jitter.

    Boxes are pixel ``(x1, y1, x2, y2)``; boxes left with a side under one
    pixel after clipping are dropped together with their classes.
    """
    cfg = cfg or TrainConfig()
    image = np.asarray(image)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    c, h, w = image.shape
    side = max(h, w)
    if h != w:
        sq = np.zeros((c, side, side), dtype=image.dtype)
        sq[:, :h, :w] = image
        image = sq
    x0, y0, cw, ch = 0.0, 0.0, float(side), float(side)
    if train and cfg.crop:
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        for _ in range(10):
            area = rng.uniform(*cfg.crop_area) * side * side
            ar = math.exp(rng.uniform(math.log(cfg.crop_aspect[0]), math.log(cfg.crop_aspect[1])))
            tw, th = math.sqrt(area * ar), math.sqrt(area / ar)
            if tw > side or th > side:
                continue
            tx, ty = rng.uniform(0, side - tw), rng.uniform(0, side - th)
            iw = np.clip(np.minimum(boxes[:, 2], tx + tw) - np.maximum(boxes[:, 0], tx), 0, None)
            ih = np.clip(np.minimum(boxes[:, 3], ty + th) - np.maximum(boxes[:, 1], ty), 0, None)
            if np.any(iw * ih >= 0.5 * areas):
                x0, y0, cw, ch = tx, ty, tw, th
                break
    if (x0, y0, cw, ch) != (0.0, 0.0, float(size), float(size)) or side != size:
        image = _bilinear_crop(image, x0, y0, cw, ch, size)
    sx, sy = size / cw, size / ch
    boxes = np.stack([(boxes[:, 0] - x0) * sx, (boxes[:, 1] - y0) * sy, (boxes[:, 2] - x0) * sx, (boxes[:, 3] - y0) * sy], axis=1)
    boxes = np.clip(boxes, 0, size)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
    boxes, classes = boxes[keep], classes[keep]
    if train and cfg.mirror and rng.random() < 0.5:
        image = image[:, :, ::-1]
        boxes = np.stack([size - boxes[:, 2], boxes[:, 1], size - boxes[:, 0], boxes[:, 3]], axis=1)
    if train and cfg.photometric:
        image = _photometric(image, rng)
    return np.ascontiguousarray(image, dtype=np.float32), boxes, classes


# --------------------------------------------------------------------------
# one batch


@dataclass
class BatchResult:
    loss_raw: tuple[Tensor, Tensor, Tensor]
    valid_count: int
    covered: int
    gt_count: int
    inputs: tuple


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def forward_batch(model: DeNet, images: np.ndarray, gts: Sequence[tuple[np.ndarray, np.ndarray]], rng: np.random.Generator, cfg: TrainConfig) -> BatchResult:
    """Forward both stages on an augmented batch and build every target.

    ``gts`` holds ``(boxes[K, 4] pixels, classes[K])`` per image.
    """
    mc = model.config
    stride, extent = mc.corner_stride, mc.map_extent
    out = model.forward_base(images, train=True)
    probs = out.corner_probs.astype(np.float64)
    corner_t = np.stack([build_corner_target(b, stride, extent) for b, _ in gts])
    cell_boxes, batch_idx, onehots, reg_t, valid = [], [], [], [], []
    covered = gt_count = 0
    for i, (gb, gc) in enumerate(gts):
        rois = generate_rois(probs[i], mc.lambda_thresh, mc.M, mc.N)
        search = np.array([r.box.as_tuple() for r in rois]).reshape(-1, 4)
        covered += covered_count((search + 0.5) * stride, gb, 0.5)
        gt_count += len(gb)
        gt_cells = [BBox.from_pixels(b, stride) for b in gb]
        aug = augment_rois_training(rois, gt_cells, cfg.random_fraction, rng, extent)
        cells = np.array([r.box.as_tuple() for r in aug]).reshape(-1, 4)
        a = assign_targets((cells + 0.5) * stride, gb, gc, cfg.iou_pos, mc.class_count)
        cell_boxes.append(cells)
        batch_idx.append(np.full(len(cells), i))
        onehots.append(a.onehot(mc.class_count))
        reg_t.append(a.boxes)
        valid.append(a.valid)
    cells = np.concatenate(cell_boxes)
    ys, xs, wh = lattice_indices(cells, (extent, extent))
    feats = gather_cells(out.features, np.concatenate(batch_idx), ys, xs)
    features = concat_columns([feats, Tensor(wh.astype(model.dtype))])
    class_probs, beta = model.classify(features, train=True)
    onehot = np.concatenate(onehots)
    reg = np.concatenate(reg_t)
    val = np.concatenate(valid)
    inputs = (out.bernoulli, corner_t, class_probs, onehot, beta, reg, val)
    raw = loss_components(*inputs, images=len(gts))
    return BatchResult(raw, int(val.sum()), covered, gt_count, inputs)


def prepare_batch(samples: Sequence[dataio.SceneSample], indices: Sequence[int], epoch: int, cfg: TrainConfig, size: int, train: bool = True):
    images, gts = [], []
    for idx in indices:
        s = samples[idx]
        img, b, c = augment_sample(s.image, s.boxes, s.classes, sample_rng(cfg.seed, epoch, int(idx)), train, size, cfg)
        images.append(img)
        gts.append((b, c))
    return np.stack(images), gts


def calibrate_lambdas(model: DeNet, images: np.ndarray, gts, cfg: TrainConfig, weights: LossWeights | None = None, rng_key: tuple = (0, 0)) -> LossWeights:
    """Measure each raw component on one batch and store it as that component's normalizer."""
    weights = weights or LossWeights()
    if weights.calibrated:
        raise TrainingError("loss normalizers are already calibrated and cannot change")
    saved = copy.deepcopy(model.store.moments)
    res = forward_batch(model, images, gts, np.random.default_rng([cfg.seed, *rng_key, 7]), cfg)
    for k, m in saved.items():
        model.store.moments[k].mean[...] = m.mean
        model.store.moments[k].var[...] = m.var
    corner, cls, bbox = (t.item() for t in res.loss_raw)
    return weights.with_normalizers(corner, cls, bbox if res.valid_count else None)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    rows: list[tuple] = field(default_factory=list)


def format_row(row: tuple) -> list[str]:
    step, epoch, lr, *vals = row
    return [str(step), str(epoch), repr(float(lr))] + [f"{v:.9g}" for v in vals]


def metrics_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(format_row(r))
    return buf.getvalue()


def read_metrics_csv(path: str | os.PathLike) -> list[tuple]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != METRICS_HEADER:
            raise dataio.FormatError(f"{path}: unexpected metrics header {header}")
        return [(int(r[0]), int(r[1]), float(r[2]), *(float(v) for v in r[3:])) for r in reader if r]


def make_checkpoint(model: DeNet, weights: LossWeights, state: TrainState, cfg: TrainConfig) -> dataio.Checkpoint:
    tensors = dict(model.store.named_arrays())
    for k in model.store.params:
        if k in state.velocity:
            tensors[f"opt/{k}"] = state.velocity[k]
    extra = {"epoch": state.epoch, "train_config": _cfg_dict(cfg)}
    return dataio.Checkpoint(model.config.to_dict(), weights.to_dict(), state.step, tensors, extra)


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def model_from_checkpoint(ckpt: dataio.Checkpoint) -> tuple[DeNet, LossWeights | None, TrainState]:
    model = DeNet(ModelConfig.from_dict(ckpt.config))
    arrays = {k: v for k, v in ckpt.tensors.items() if not k.startswith("opt/")}
    model.store.load_arrays(arrays)
    velocity = {k[4:]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("opt/")}
    weights = LossWeights(**ckpt.loss_weights) if ckpt.loss_weights else None
    state = TrainState(epoch=int(ckpt.extra.get("epoch", 0)), step=ckpt.step, velocity=velocity)
    return model, weights, state


def train(
    samples: Sequence[dataio.SceneSample],
    model: DeNet,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    out_dir: str | os.PathLike | None = None,
    state: TrainState | None = None,
    stop_after_epoch: int | None = None,
    on_row: Callable[[tuple], None] | None = None,
) -> tuple[LossWeights, TrainState]:
    """Run (or resume) training; writes ``metrics.csv`` and checkpoints under ``out_dir``."""
    size = model.config.input_size
    n = len(samples)
    if n == 0:
        raise TrainingError("empty training set")
    state = state or TrainState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if out is not None and state.step and not state.rows and (out / "metrics.csv").exists():
        # resuming: keep the rows logged up to the checkpoint
        state.rows = [r for r in read_metrics_csv(out / "metrics.csv") if r[0] <= state.step]
    weights = weights or LossWeights()
    if not weights.calibrated:
        if state.step:
            raise TrainingError("cannot calibrate loss normalizers after training has started")
        order = np.random.default_rng([cfg.seed, 0]).permutation(n)
        images, gts = prepare_batch(samples, order[: cfg.batch_size], 0, cfg, size)
        weights = calibrate_lambdas(model, images, gts, cfg, weights, rng_key=(0, 0))
        log.info("calibrated normalizers: corner %.4g class %.4g bbox %.4g", weights.Lambda_t, weights.Lambda_s, weights.Lambda_b)
    last = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(state.epoch, last):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            lr = cfg.lr_at(epoch, epoch + start / n)
            idx = order[start : start + cfg.batch_size]
            images, gts = prepare_batch(samples, idx, epoch, cfg, size)
            model.store.zero_grad()
            res = forward_batch(model, images, gts, np.random.default_rng([cfg.seed, epoch, b, 7]), cfg)
            parts = joint_loss(*res.inputs, weights=weights, images=len(gts))
            norm = parts.normalized()
            for name, v in (("total", parts.total.item()), *norm.items()):
                if not math.isfinite(v):
                    raise TrainingError(f"non-finite {name} loss ({v}) at epoch {epoch} step {state.step}")
            parts.total.backward()
            nesterov_step(model.store, state.velocity, lr, cfg.momentum, cfg.weight_decay)
            state.step += 1
            if state.step % cfg.log_every == 0:
                cov = res.covered / res.gt_count if res.gt_count else 1.0
                row = (state.step, epoch, lr, parts.total.item(), norm["corner"], norm["class"], norm["bbox"], cov)
                state.rows.append(row)
                if on_row:
                    on_row(row)
        state.epoch = epoch + 1
        log.info("epoch %d done, step %d, last loss %.4f", epoch, state.step, parts.total.item())
        if out is not None:
            (out / "metrics.csv").write_text(metrics_csv(state.rows))
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                dataio.save_checkpoint(out / f"epoch{state.epoch:03d}.ckpt", make_checkpoint(model, weights, state, cfg))
    if out is not None:
        dataio.save_checkpoint(out / "model.ckpt", make_checkpoint(model, weights, state, cfg))
    return weights, state

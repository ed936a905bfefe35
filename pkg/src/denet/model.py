"""Backbone, deconvolution path and corner head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import head
from .tensor import (
    LayerSpec,
    ParamStore,
    Tensor,
    add,
    batchnorm,
    conv2d,
    deconv2d,
    init_conv,
    init_weights,
    relu,
    reshape,
    softmax,
    split_channels,
    take,
)

VARIANTS = ("plain", "skip", "wide")
CORNER_TYPES = ("top-left", "top-right", "bottom-left", "bottom-right")


def desk_backbone(widths: Sequence[int] = (32, 64, 128, 128)) -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec("conv", w, (3, 3), (2, 2)) for w in widths)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    class_count: int = 3
    backbone: tuple[LayerSpec, ...] = field(default_factory=desk_backbone)
    deconv_filters: tuple[int, ...] = (64, 32)
    skip_enabled: bool = False
    F_s: int = 32
    corner_stride: int = 4
    N: int = 8
    M: int = 16
    lambda_thresh: float = 0.05
    head_widths: tuple[int, ...] = (256, 256, 128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.input_size % self.corner_stride:
            raise ValueError(f"input_size {self.input_size} not divisible by corner_stride {self.corner_stride}")
        if self.deconv_count not in (2, 3):
            raise ValueError(f"deconv_count must be 2 or 3, got {self.deconv_count}")
        if self.N < 1 or self.M < 1 or not 0.0 <= self.lambda_thresh < 1.0:
            raise ValueError(f"need N >= 1, M >= 1, 0 <= lambda < 1 (got {self.N}, {self.M}, {self.lambda_thresh})")
        if self.class_count < 1 or self.F_s < 1 or not self.head_widths:
            raise ValueError("class_count, F_s and head_widths must be positive")
        derived = self.backbone_stride // 2**self.deconv_count
        if derived != self.corner_stride:
            raise ValueError(
                f"backbone stride {self.backbone_stride} with {self.deconv_count} deconvolutions gives corner stride "
                f"{derived}, config says {self.corner_stride}"
            )

    @property
    def deconv_count(self) -> int:
        return len(self.deconv_filters)

    @property
    def backbone_stride(self) -> int:
        return math.prod(s.stride[0] for s in self.backbone)

    @property
    def map_extent(self) -> int:
        return self.input_size // self.corner_stride

    @property
    def feature_length(self) -> int:
        return 49 * self.F_s + 2

    @property
    def variant(self) -> str:
        if self.deconv_count == 3:
            return "wide"
        return "skip" if self.skip_enabled else "plain"

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        base = cls(**overrides)
        if variant == "plain":
            return replace(base, skip_enabled=False)
        if variant == "skip":
            return replace(base, skip_enabled=True)
        # one more deconvolution halves the corner stride; the RoI budget grows with it
        return replace(
            base,
            skip_enabled=True,
            deconv_filters=tuple(base.deconv_filters) + (max(base.deconv_filters[-1] // 2, 8),),
            corner_stride=base.corner_stride // 2,
            N=overrides.get("N", base.N * 2),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = [asdict(s) for s in self.backbone]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = tuple(
            LayerSpec(s["kind"], s["filters"], tuple(s["kernel"]), tuple(s["stride"])) for s in d["backbone"]
        )
        d["deconv_filters"] = tuple(d["deconv_filters"])
        d["head_widths"] = tuple(d["head_widths"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def full_scale_config(**overrides) -> ModelConfig:
    """512-pixel input, corner stride 8, F_s = 96, N = 24 and wide head layers.

    The backbone is a plain stack of 3x3 convolutions (two per resolution)
    reaching 16x16 before the two deconvolutions, standing in for a large residual network.
    """
    widths = (64, 128, 256, 512, 512)
    backbone = []
    for w in widths:
        backbone.append(LayerSpec("conv", w, (3, 3), (2, 2)))
        backbone.append(LayerSpec("conv", w, (3, 3), (1, 1)))
    params = dict(
        input_size=512,
        backbone=tuple(backbone),
        deconv_filters=(256, 128),
        F_s=96,
        corner_stride=8,
        N=24,
        M=64,
        head_widths=(1536, 1024, 768, 512),
    )
    params.update(overrides)
    return ModelConfig(**params)


@dataclass
class CornerMap:
    """Pr(t=1 | k, y, x) for one image, type axis ordered as ``CORNER_TYPES``."""

    probs: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 3 or self.probs.shape[0] != 4:
            raise ValueError(f"corner map must be [4, H, W], got {self.probs.shape}")

    @property
    def extent(self) -> tuple[int, int]:
        return self.probs.shape[1], self.probs.shape[2]


@dataclass
class BaseOutput:
    """Result of the base network on a batch.

    ``bernoulli`` is ``[N, 4, 2, Hc, Wc]`` (index 1 on axis 2 is "corner
    present"), ``features`` is the ``[N, F_s, Hc, Wc]`` sampling map.
    """

    bernoulli: Tensor
    features: Tensor

    @property
    def corner_probs(self) -> np.ndarray:
        return self.bernoulli.data[:, :, 1]

    def corner_map(self, i: int) -> CornerMap:
        return CornerMap(np.ascontiguousarray(self.corner_probs[i], dtype=np.float64))


class DeNet:
    """Parameters plus the forward passes of both network stages."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed)
        c = 3
        extents = []
        size = config.input_size
        for i, spec in enumerate(config.backbone):
            if spec.kind != "conv":
                raise ValueError(f"backbone layer {i} must be conv, got {spec.kind}")
            init_weights(self.store, f"backbone.{i}.conv", spec, c, rng, dtype)
            init_weights(self.store, f"backbone.{i}.bn", LayerSpec("batchnorm"), spec.filters, rng, dtype)
            c = spec.filters
            size //= spec.stride[0]
            extents.append((size, c))
        self._skip_sources: list[int] = []
        for i, f in enumerate(config.deconv_filters):
            init_weights(self.store, f"deconv.{i}.conv", LayerSpec("deconv", f, (3, 3), (2, 2)), c, rng, dtype)
            init_weights(self.store, f"deconv.{i}.bn", LayerSpec("batchnorm"), f, rng, dtype)
            size *= 2
            if config.skip_enabled:
                src = max((j for j, (s, _) in enumerate(extents) if s == size), default=None)
                if src is None:
                    raise ValueError(f"skip connection: no backbone layer with spatial extent {size}")
                self._skip_sources.append(src)
                init_conv(self.store, f"skip.{i}", (f, extents[src][1], 1, 1), f, rng, dtype, bias=False)
            c = f
        init_weights(self.store, "corner.conv", LayerSpec("conv", 8 + config.F_s), c, rng, dtype)
        head.init_head(self.store, config, rng, dtype)

    @property
    def params(self) -> ParamStore:
        return self.store

    def forward_base(self, images: np.ndarray | Tensor, train: bool) -> BaseOutput:
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ValueError(f"expected images [N, 3, {cfg.input_size}, {cfg.input_size}], got {x.shape}")
        st = self.store
        acts = []
        for i, spec in enumerate(cfg.backbone):
            k = spec.kernel[0]
            x = conv2d(x, st[f"backbone.{i}.conv.w"], st[f"backbone.{i}.conv.b"], spec.stride[0], k // 2)
            x = relu(self._bn(x, f"backbone.{i}.bn", train))
            acts.append(x)
        for i in range(cfg.deconv_count):
            x = deconv2d(x, st[f"deconv.{i}.conv.w"], st[f"deconv.{i}.conv.b"], stride=2)
            x = self._bn(x, f"deconv.{i}.bn", train)
            if cfg.skip_enabled:
                x = add(x, conv2d(acts[self._skip_sources[i]], st[f"skip.{i}.w"]))
            x = relu(x)
        out = conv2d(x, st["corner.conv.w"], st["corner.conv.b"])
        logits, features = split_channels(out, (8, cfg.F_s))
        n, _, h, w = logits.shape
        bern = softmax(reshape(logits, (n, 4, 2, h, w)), axis=2)
        return BaseOutput(bern, features)

    def _bn(self, x: Tensor, path: str, train: bool) -> Tensor:
        st = self.store
        return batchnorm(x, st[f"{path}.gamma"], st[f"{path}.beta"], st.moments[path], train)

    def classify(self, features: Tensor, train: bool):
        return head.classify_rois(self.store, features, self.config, train)


def corner_probability(out: BaseOutput) -> Tensor:
    """Differentiable view of Pr(t=1) as ``[N, 4, Hc, Wc]``."""
    return take(out.bernoulli, 1, axis=2)


def build_corner_target(gt_boxes, corner_stride: int, map_extent: int) -> np.ndarray:
    """Binary corner target ``[4, E, E]`` from pixel-space boxes ``(x1, y1, x2, y2)``.

    Each corner lands in cell ``floor(coord / corner_stride)``; corners outside
    the map are dropped and coincident corners merge.
    """
    target = np.zeros((4, map_extent, map_extent), dtype=np.float32)
    for b in gt_boxes:
        x1, y1, x2, y2 = (b.x1, b.y1, b.x2, b.y2) if hasattr(b, "x1") else b
        for k, (cx, cy) in enumerate(((x1, y1), (x2, y1), (x1, y2), (x2, y2))):
            col = math.floor(cx / corner_stride)
            row = math.floor(cy / corner_stride)
            if 0 <= row < map_extent and 0 <= col < map_extent:
                target[k, row, col] = 1.0
    return target

"""Corner matching: scoring candidate boxes and picking the sampling boxes.

Boxes here live in corner-map cell coordinates. Integer coordinates name a
cell; a cell ``c`` covers pixels ``[c*s, (c+1)*s)`` for corner stride ``s``
and is represented by its centre ``(c + 0.5) * s`` when converted back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .model import CornerMap

GRID = 7


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_pixels(self, stride: int) -> "BBox":
        return BBox(*((v + 0.5) * stride for v in self.as_tuple()))

    @classmethod
    def from_pixels(cls, box: "BBox | Sequence[float]", stride: int) -> "BBox":
        vals = box.as_tuple() if isinstance(box, BBox) else tuple(box)
        return cls(*(v / stride - 0.5 for v in vals))

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)

    def clipped(self, extent: int) -> "BBox":
        hi = extent - 1
        x1, y1, x2, y2 = (min(max(v, 0.0), hi) for v in self.as_tuple())
        return BBox(x1, y1, max(x2, x1 + 1e-6), max(y2, y1 + 1e-6))


class RoISource(Enum):
    CORNER_SEARCH = "corner-search"
    GROUND_TRUTH = "ground-truth"
    RANDOM = "random"


@dataclass(frozen=True)
class RoI:
    box: BBox
    score: float
    source: RoISource = RoISource.CORNER_SEARCH


def _cell(v: float, extent: int, what: str) -> int:
    c = int(v)
    if c != v or not 0 <= c < extent:
        raise ValueError(f"{what} {v} is not a cell index in [0, {extent})")
    return c


def score_box(corner_map: CornerMap | np.ndarray, box: BBox) -> float:
    """Product of the four corner probabilities at the box's corner cells."""
    p = corner_map.probs if isinstance(corner_map, CornerMap) else corner_map
    h, w = p.shape[1:]
    x1, x2 = _cell(box.x1, w, "x1"), _cell(box.x2, w, "x2")
    y1, y2 = _cell(box.y1, h, "y1"), _cell(box.y2, h, "y2")
    return float(p[0, y1, x1] * p[1, y1, x2] * p[2, y2, x1] * p[3, y2, x2])


def _top_corners(plane: np.ndarray, lam: float, m: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.nonzero(plane > lam)
    if ys.size > m:
        order = np.lexsort((xs, ys, -plane[ys, xs]))[:m]
        ys, xs = ys[order], xs[order]
    return ys, xs


def search_boxes(probs: np.ndarray, lam: float, m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`generate_rois`: ``(boxes[K, 4] int, scores[K])``."""
    if not 0.0 <= lam < 1.0 or m < 1 or n < 1:
        raise ValueError(f"need 0 <= lambda < 1, M >= 1, N >= 1 (got {lam}, {m}, {n})")
    p = np.asarray(probs, dtype=np.float64)
    tl_y, tl_x = _top_corners(p[0], lam, m)
    tr_y, tr_x = _top_corners(p[1], lam, m)
    bl_y, bl_x = _top_corners(p[2], lam, m)
    br_y, br_x = _top_corners(p[3], lam, m)

    # top-left x bottom-right
    x1, y1 = tl_x[:, None], tl_y[:, None]
    x2, y2 = br_x[None, :], br_y[None, :]
    ok = (x2 > x1) & (y2 > y1)
    a = np.stack(np.broadcast_arrays(x1, y1, x2, y2), axis=-1)[ok]
    # top-right x bottom-left
    x1, y2 = bl_x[None, :], bl_y[None, :]
    x2, y1 = tr_x[:, None], tr_y[:, None]
    ok = (x2 > x1) & (y2 > y1)
    b = np.stack(np.broadcast_arrays(x1, y1, x2, y2), axis=-1)[ok]

    boxes = np.concatenate([a.reshape(-1, 4), b.reshape(-1, 4)]).astype(np.int64)
    if boxes.size == 0:
        return np.zeros((0, 4), dtype=np.int64), np.zeros(0)
    boxes = np.unique(boxes, axis=0)
    bx1, by1, bx2, by2 = boxes.T
    scores = p[0, by1, bx1] * p[1, by1, bx2] * p[2, by2, bx1] * p[3, by2, bx2]
    order = np.lexsort((bx2, by2, bx1, by1, -scores))[: n * n]
    return boxes[order], scores[order]


def generate_rois(corner_map: CornerMap | np.ndarray, lam: float, m: int, n: int) -> list[RoI]:
    """Sampling boxes: the top ``n*n`` corner pairings, best first.

    Corners with probability above ``lam`` are kept (at most ``m`` per type),
    top-left corners are paired with bottom-right ones and top-right with
    bottom-left, every unique box is scored by the four-corner product, and
    ties are broken by ``(y1, x1, y2, x2)``.
    """
    p = corner_map.probs if isinstance(corner_map, CornerMap) else corner_map
    boxes, scores = search_boxes(p, lam, m, n)
    return [RoI(BBox(*map(float, b)), float(s)) for b, s in zip(boxes, scores)]


def lattice_indices(boxes: np.ndarray, extent: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cell indices of the 7x7 sampling lattice and the normalized (w, h).

    ``boxes`` is ``[R, 4]`` in cell coordinates. Returns ``ys, xs`` of shape
    ``[R, 49]`` (row-major over the lattice) and ``wh`` of shape ``[R, 2]``.
    """
    h, w = extent
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    t = np.arange(GRID) / (GRID - 1)
    gx = boxes[:, 0:1] + t[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])
    gy = boxes[:, 1:2] + t[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    ix = np.clip(np.floor(gx + 0.5), 0, w - 1).astype(np.int64)
    iy = np.clip(np.floor(gy + 0.5), 0, h - 1).astype(np.int64)
    ys = np.repeat(iy, GRID, axis=1)
    xs = np.tile(ix, (1, GRID))
    wh = np.stack([(boxes[:, 2] - boxes[:, 0]) / w, (boxes[:, 3] - boxes[:, 1]) / h], axis=1)
    return ys, xs, np.clip(wh, 0.0, 1.0)


def _check_inside(box: BBox, extent: tuple[int, int]) -> None:
    h, w = extent
    if box.x1 < -0.5 or box.y1 < -0.5 or box.x2 > w - 0.5 or box.y2 > h - 0.5:
        raise ValueError(f"box {box.as_tuple()} outside a {h}x{w} map")


def extract_feature(sampling_map: np.ndarray, box: BBox, F_s: int | None = None) -> np.ndarray:
    """``7*7*F_s + 2`` values: nearest-neighbour lattice samples then (w, h)."""
    fmap = np.asarray(sampling_map)
    f, h, w = fmap.shape
    if F_s is not None and F_s != f:
        raise ValueError(f"sampling map has {f} channels, expected {F_s}")
    _check_inside(box, (h, w))
    ys, xs, wh = lattice_indices(np.array([box.as_tuple()]), (h, w))
    samples = fmap[:, ys[0], xs[0]].T.reshape(-1)
    return np.concatenate([samples, wh[0]]).astype(fmap.dtype)


def random_box(rng: np.random.Generator, extent: int) -> BBox:
    x1, x2 = np.sort(rng.choice(extent, size=2, replace=False))
    y1, y2 = np.sort(rng.choice(extent, size=2, replace=False))
    return BBox(float(x1), float(y1), float(x2), float(y2))


def augment_rois_training(
    rois: Sequence[RoI],
    gt_boxes: Iterable[BBox],
    random_fraction: float,
    rng: np.random.Generator,
    extent: int,
) -> list[RoI]:
    """Search RoIs plus every ground-truth box plus ``ceil(fraction * len(rois))`` random boxes.

    Duplicated boxes are kept once (first occurrence wins).
    """
    if not 0.0 <= random_fraction < 1.0:
        raise ValueError(f"random_fraction must be in [0, 1), got {random_fraction}")
    out = list(rois)
    out += [RoI(b, 0.0, RoISource.GROUND_TRUTH) for b in gt_boxes]
    n_random = math.ceil(round(random_fraction * len(rois), 9))
    out += [RoI(random_box(rng, extent), 0.0, RoISource.RANDOM) for _ in range(n_random)]
    seen = set()
    unique = []
    for r in out:
        key = r.box.as_tuple()
        if key not in seen:
            seen.add(key)
            unique.append(r)
    return unique

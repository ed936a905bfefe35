"""Synthetic scenes, annotation files and checkpoints."""

from __future__ import annotations

import colorsys
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .sampler import BBox

CLASS_NAMES = ("rectangle", "ellipse", "triangle")
MAGIC = b"DENETCKP"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected layout."""


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    class_count: int = 3
    min_instances: int = 1
    max_instances: int = 3
    min_size: int = 16
    max_size: int = 32
    noise: float = 0.05
    max_overlap: float = 0.3
    margin: int = 1


@dataclass
class SceneSample:
    image: np.ndarray
    annotations: list[tuple[int, BBox]] = field(default_factory=list)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([b.as_tuple() for _, b in self.annotations], dtype=np.float64).reshape(-1, 4)

    @property
    def classes(self) -> np.ndarray:
        return np.array([c for c, _ in self.annotations], dtype=np.int64)


def _shape_mask(kind: int, x1: int, y1: int, x2: int, y2: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == 0:
        return (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
    if kind == 1:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    apex = x1 + rng.uniform(0.2, 0.8) * (x2 - x1)
    pts = [(x1, y2), (x2, y2), (apex, y1)]
    inside = np.ones_like(xx, dtype=bool)
    for (ax, ay), (bx, by) in zip(pts, pts[1:] + pts[:1]):
        inside &= (bx - ax) * (yy - ay) - (by - ay) * (xx - ax) <= 0
    return inside


def gen_scene(seed: int, config: GenConfig = GenConfig()) -> SceneSample:
    """A noisy background with 1-3 filled shapes; class = shape kind."""
    rng = np.random.default_rng(seed)
    s = config.image_size
    base = rng.uniform(0.15, 0.45)
    image = np.clip(base + config.noise * rng.standard_normal((3, s, s)), 0.0, 1.0)
    count = int(rng.integers(config.min_instances, config.max_instances + 1))
    placed: list[tuple[int, BBox]] = []
    for _ in range(count):
        for _attempt in range(50):
            kind = int(rng.integers(config.class_count))
            w = int(rng.integers(config.min_size, config.max_size + 1))
            h = int(rng.integers(config.min_size, config.max_size + 1))
            x1 = int(rng.integers(config.margin, s - config.margin - w + 1))
            y1 = int(rng.integers(config.margin, s - config.margin - h + 1))
            mask = _shape_mask(kind % 3, x1, y1, x1 + w, y1 + h, s, rng)
            rows, cols = np.nonzero(mask)
            box = BBox(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
            if all(_iou(box, other) <= config.max_overlap for _, other in placed):
                break
        else:
            continue
        hue = rng.uniform(0.0, 1.0)
        colour = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.75, 1.0)))
        image[:, mask] = np.clip(colour[:, None] + config.noise * rng.standard_normal((3, int(mask.sum()))), 0.0, 1.0)
        placed.append((kind, box))
    return SceneSample(image.astype(np.float32), placed)


def _iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.width * a.height + b.width * b.height - inter)


# --------------------------------------------------------------------------
# annotation text format: "image_id class_id x1 y1 x2 y2", '#' starts a comment


def write_annotations(path: str | os.PathLike, records: Mapping[str, Sequence[tuple[int, BBox]]]) -> None:
    lines = ["# image_id class_id x1 y1 x2 y2"]
    for image_id, anns in records.items():
        if not image_id or any(ch.isspace() for ch in image_id):
            raise ValueError(f"image id {image_id!r} must be non-empty without whitespace")
        for cls, box in anns:
            lines.append(f"{image_id} {int(cls)} " + " ".join(repr(float(v)) for v in box.as_tuple()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_annotations(path: str | os.PathLike, class_count: int = len(CLASS_NAMES)) -> dict[str, list[tuple[int, BBox]]]:
    records: dict[str, list[tuple[int, BBox]]] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}: {raw!r}")
        image_id = parts[0]
        try:
            cls = int(parts[1])
            x1, y1, x2, y2 = (float(v) for v in parts[2:])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric field in {raw!r}") from None
        if not 0 <= cls < class_count:
            raise FormatError(f"{path}:{lineno}: unknown class id {cls}")
        if not (x2 > x1 and y2 > y1) or not all(np.isfinite((x1, y1, x2, y2))):
            raise FormatError(f"{path}:{lineno}: invalid box ({x1}, {y1}, {x2}, {y2})")
        records.setdefault(image_id, []).append((cls, BBox(x1, y1, x2, y2)))
    return records


# --------------------------------------------------------------------------
# dataset directories: annotations.txt + images/<id>.png + meta.json


def image_id(index: int) -> str:
    return f"img{index:06d}"


def write_dataset(out_dir: str | os.PathLike, samples: Sequence[SceneSample], meta: dict | None = None) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = {}
    for i, s in enumerate(samples):
        iid = image_id(i)
        pixels = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(pixels, "RGB").save(out / "images" / f"{iid}.png")
        records[iid] = s.annotations
    write_annotations(out / "annotations.txt", records)
    info = {"count": len(samples), "classes": list(CLASS_NAMES)}
    info.update(meta or {})
    (out / "meta.json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_dataset(data_dir: str | os.PathLike) -> list[tuple[str, SceneSample]]:
    root = Path(data_dir)
    ann_path = root / "annotations.txt"
    if not ann_path.exists():
        raise FileNotFoundError(f"no annotations.txt in {root}")
    meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").exists() else {}
    records = read_annotations(ann_path, len(meta.get("classes", CLASS_NAMES)))
    ids = sorted(set(records) | {p.stem for p in (root / "images").glob("*.png")})
    return [(iid, SceneSample(load_image(root / "images" / f"{iid}.png"), records.get(iid, []))) for iid in ids]


# --------------------------------------------------------------------------
# checkpoints
#
# MAGIC | u32 version | u32 header length | header JSON (utf-8) | u32 tensor count |
# per tensor: u16 name length, name, u8 ndim, u32 dims..., float32 LE data |
# u32 CRC32 of everything before it


@dataclass
class Checkpoint:
    config: dict
    loss_weights: dict | None
    step: int
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {"config": ckpt.config, "loss_weights": ckpt.loss_weights, "step": int(ckpt.step), "extra": ckpt.extra},
        sort_keys=True,
    ).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<HB", len(raw), a.ndim) + raw)
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<II", blob, pos)
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint truncated or corrupted (checksum mismatch)")
    pos += 8
    header = json.loads(blob[pos : pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 4
        tensors[name] = np.frombuffer(blob[pos : pos + size], dtype="<f4").reshape(shape).astype(np.float32)
        pos += size
    if pos != len(body):
        raise FormatError("checkpoint has trailing bytes")
    return Checkpoint(header["config"], header["loss_weights"], header["step"], tensors, header.get("extra", {}))


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {e.strerror}") from None
    try:
        return decode_checkpoint(blob)
    except struct.error:
        raise FormatError("checkpoint truncated") from None

"""Procedural oriented-object scenes rendered under photometric domain styles.

Every image is drawn from its own seed stream ``(seed, split, index)`` so a
dataset can be generated in any order, or in parallel, with identical bytes.
"""
from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .geometry import OrientedBox, canonicalize, rotated_iou, to_corners

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class ClassSpec:
    name: str
    long_side: tuple[float, float]
    short_side: tuple[float, float]


DEFAULT_CLASSES = (
    ClassSpec("ship", (16.0, 24.0), (5.0, 7.0)),
    ClassSpec("vehicle", (9.0, 12.0), (4.5, 6.0)),
    ClassSpec("field", (18.0, 26.0), (11.0, 14.0)),
)


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    object_count: tuple[int, int] = (1, 4)
    classes: tuple = DEFAULT_CLASSES
    max_pair_iou: float = 0.1
    margin: float = 1.0

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


@dataclass(frozen=True)
class DomainStyle:
    """Pixel-wise photometric transform plus optional box blur and noise."""

    name: str
    gain: tuple = (1.0, 1.0, 1.0)
    bias: tuple = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    blur_radius: int = 0
    noise: float = 0.0

    def is_identity(self) -> bool:
        return (tuple(self.gain) == (1.0, 1.0, 1.0) and tuple(self.bias) == (0.0, 0.0, 0.0)
                and self.gamma == 1.0 and self.blur_radius == 0 and self.noise == 0.0)


DOMAIN_STYLES = {
    "A": DomainStyle("A"),
    "B": DomainStyle("B", gain=(0.5, 0.55, 0.7), bias=(0.12, 0.17, 0.3), gamma=1.1, blur_radius=1),
    "C": DomainStyle("C", gain=(1.45, 1.4, 1.35), bias=(-0.02, 0.0, 0.02), gamma=0.75, noise=0.06),
}


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    boxes: list = field(default_factory=list)  # OrientedBox, canonical
    labels: list = field(default_factory=list)  # int class ids
    instance_map: np.ndarray | None = None  # renderer's object id per pixel, -1 for background

    def annotations(self) -> list[tuple]:
        return [(b.as_tuple(), int(c)) for b, c in zip(self.boxes, self.labels)]

    def same_as(self, other: "Sample") -> bool:
        return (self.id == other.id and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image) and self.annotations() == other.annotations())


def image_rng(seed: int, split: str, index: int) -> np.random.Generator:
    code = zlib.crc32(split.encode())
    return np.random.default_rng([int(seed), code, int(index)])


def _fits(box: OrientedBox, size: int, margin: float) -> bool:
    c = to_corners(box)
    return bool(np.all(c >= margin) and np.all(c <= size - margin))


def _rect_mask(box: OrientedBox, xs: np.ndarray, ys: np.ndarray):
    """Pixel-center membership and local coordinates for ``box``."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = xs - box.cx, ys - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)
    return inside, u, v


def _background(size: int, rng: np.random.Generator, xs, ys) -> np.ndarray:
    base = np.array([0.36, 0.40, 0.32]) + rng.uniform(-0.04, 0.04, 3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    for _ in range(3):
        fx, fy = rng.uniform(0.02, 0.12, 2)
        ph = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.01, 0.04)
        img += amp * np.sin(2 * math.pi * (fx * xs + fy * ys) + ph)[..., None]
    img += rng.normal(0.0, 0.015, img.shape)
    return img


def _paint(img, cls: int, box: OrientedBox, inside, u, v, rng) -> None:
    if cls == 0:  # ship: bright hull with dark keel line
        tone = 0.82 + rng.uniform(-0.05, 0.05)
        vals = np.where(np.abs(v) < box.h / 6, tone - 0.3, tone)
        col = np.stack([vals, vals, vals * 0.97], axis=-1)
    elif cls == 1:  # vehicle: saturated body, light cabin near one end
        body = np.array([0.78, 0.22, 0.18]) + rng.uniform(-0.04, 0.04, 3)
        cabin = (u > box.w / 6) & (u < box.w / 2.5)
        col = np.where(cabin[..., None], np.array([0.85, 0.85, 0.9]), body)
    else:  # field: striped along the long axis
        base = np.array([0.55, 0.72, 0.28]) + rng.uniform(-0.04, 0.04, 3)
        stripe = 0.09 * np.sign(np.sin(math.pi * v / 1.5))
        col = base + stripe[..., None]
    img[inside] = np.broadcast_to(col, img.shape)[inside]


def generate_scene(spec: SceneSpec, rng: np.random.Generator, sample_id: str = "scene") -> Sample:
    """Render one style-neutral scene with exact oriented-box annotations."""
    size = spec.image_size
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    lo, hi = spec.object_count
    target = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    boxes: list[OrientedBox] = []
    labels: list[int] = []
    attempts = 0
    while len(boxes) < target and attempts < MAX_PLACEMENT_ATTEMPTS:
        attempts += 1
        cls = int(rng.integers(len(spec.classes)))
        cs = spec.classes[cls]
        w = rng.uniform(*cs.long_side)
        h = rng.uniform(*cs.short_side)
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        cx, cy = rng.uniform(0, size, 2)
        box = canonicalize(OrientedBox(float(cx), float(cy), float(w), float(h), float(theta)))
        if not _fits(box, size, spec.margin):
            continue
        if any(rotated_iou(box, b) >= spec.max_pair_iou for b in boxes):
            continue
        boxes.append(box)
        labels.append(cls)
    if len(boxes) < target:
        logger.info("scene %s: placed %d of %d objects", sample_id, len(boxes), target)

    img = _background(size, rng, xs, ys)
    inst = np.full((size, size), -1, dtype=np.int64)
    for k, (box, cls) in enumerate(zip(boxes, labels)):
        inside, u, v = _rect_mask(box, xs, ys)
        _paint(img, cls, box, inside, u, v, rng)
        inst[inside] = k
    return Sample(sample_id, np.clip(img, 0.0, 1.0), boxes, labels, inst)


def apply_domain_style(sample: Sample, style: DomainStyle, rng: np.random.Generator | None = None) -> Sample:
    """Photometric restyling; annotations are carried over unchanged."""
    img = sample.image
    if not style.is_identity():
        img = img.copy()
        if style.blur_radius > 0:
            img = uniform_filter(img, size=(2 * style.blur_radius + 1,) * 2 + (1,), mode="nearest")
        img = img * np.asarray(style.gain) + np.asarray(style.bias)
        img = np.clip(img, 0.0, 1.0)
        if style.gamma != 1.0:
            img = img ** style.gamma
        if style.noise > 0:
            if rng is None:
                rng = np.random.default_rng([zlib.crc32(style.name.encode()), zlib.crc32(sample.id.encode())])
            img = img + rng.normal(0.0, style.noise, img.shape)
        img = np.clip(img, 0.0, 1.0)
    return replace(sample, image=img)


def generate_split(spec: SceneSpec, style: DomainStyle, seed: int, split: str, count: int) -> list[Sample]:
    out = []
    for i in range(count):
        s = generate_scene(spec, image_rng(seed, split, i), f"{split}-{i:05d}")
        out.append(apply_domain_style(s, style))
    return out


class DatasetFormatError(ValueError):
    pass


def write_dataset(samples: Sequence[Sample], directory, spec: SceneSpec | None = None) -> Path:
    """Write ``manifest.json`` plus one raw ``<id>.f64`` blob per image."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    spec = spec or SceneSpec()
    entries = []
    shape = None
    for s in samples:
        shape = list(s.image.shape)
        blob = np.ascontiguousarray(s.image, dtype="<f8").tobytes()
        fname = f"{s.id}.f64"
        (d / fname).write_bytes(blob)
        entries.append({
            "id": s.id,
            "image_file": fname,
            "crc32": zlib.crc32(blob),
            "boxes": [[b.cx, b.cy, b.w, b.h, b.theta, int(c)] for b, c in zip(s.boxes, s.labels)],
        })
    manifest = {
        "version": FORMAT_VERSION,
        "image_size": shape or [spec.image_size, spec.image_size, 3],
        "classes": spec.class_names,
        "samples": entries,
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"missing manifest: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"corrupt manifest {path}: {exc}") from None
    for key in ("version", "image_size", "classes", "samples"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest {path} lacks key {key!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"manifest {path}: unsupported version {manifest['version']}")
    return manifest


def read_dataset(directory) -> list[Sample]:
    d = Path(directory)
    manifest = read_manifest(d)
    shape = tuple(manifest["image_size"])
    expected = 8 * int(np.prod(shape))
    out = []
    for e in manifest["samples"]:
        path = d / e["image_file"]
        try:
            blob = path.read_bytes()
        except FileNotFoundError:
            raise DatasetFormatError(f"missing image blob {path}") from None
        if len(blob) != expected:
            raise DatasetFormatError(f"truncated blob {path}: {len(blob)} bytes, expected {expected}")
        if zlib.crc32(blob) != e["crc32"]:
            raise DatasetFormatError(f"checksum mismatch for {path}")
        img = np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64)
        boxes, labels = [], []
        for row in e["boxes"]:
            boxes.append(OrientedBox(*map(float, row[:5])))
            labels.append(int(row[5]))
        out.append(Sample(e["id"], img, boxes, labels))
    return out

"""Deterministic synthetic two-domain detection benchmark.

Source scenes are bright geometric shapes (circle / square / triangle) on a
dark noisy background; the target domain re-renders the same distribution
with an appearance shift: object palette hue rotation, box blur and an
alpha-blended white fog.  Geometry is preserved, so adaptation is learnable.

Every sample's randomness derives from (seed, split key, index), so
generation is a pure function of the scene spec and is parallelizable
per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

CLASS_NAMES = ("circle", "square", "triangle")
ANNOTATION_FILE = "annotations.jsonl"
SPLIT_DIRS = ("source", "target", "target_test")


class SceneSpecError(ValueError):
    """Invalid scene specification or split configuration."""


class AnnotationError(ValueError):
    """Malformed annotation record; message names the offending line."""


class DataError(ValueError):
    """Empty or inconsistent dataset."""


@dataclass(frozen=True)
class BoxAnnotation:
    x1: float
    y1: float
    x2: float
    y2: float
    cls: int

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2, self.cls]

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class DomainSample:
    """One image with its domain flag; boxes only where labels are allowed."""

    pixels: np.ndarray            # (H, W, 3) uint8
    boxes: list[BoxAnnotation]
    d: int                        # 1 = source, 0 = target
    image_id: str

    @property
    def image(self) -> np.ndarray:
        """Float image, (3, H, W) in [0, 1]."""
        return (self.pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_hw: tuple[int, int] = (64, 64)
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 12.0
    max_size: float = 26.0
    fog_strength: float = 0.5      # alpha of the white fog blend in [0, 1]
    blur_radius: int = 1           # box-blur radius in pixels (0 disables)
    palette_shift: float = 0.35    # hue rotation of the target object palette

    def __post_init__(self):
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        h, w = self.image_hw
        if h < 16 or w < 16:
            raise SceneSpecError(f"image size too small: {h}x{w}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise SceneSpecError("need 1 <= min_objects <= max_objects")
        if not 0.0 <= self.fog_strength <= 1.0:
            raise SceneSpecError(f"fog_strength must be in [0, 1], got {self.fog_strength}")
        if self.blur_radius < 0:
            raise SceneSpecError("blur_radius must be >= 0")
        if self.min_size < 4 or self.max_size > min(h, w) * 0.6:
            raise SceneSpecError("object size range out of bounds for the image")


def _hsv_to_rgb(h, s, v):
    h = h % 1.0
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _shape_mask(cls: int, h: int, w: int, cx: float, cy: float, size: float) -> np.ndarray:
    """Boolean mask of one rendered shape; pixel centers inside the shape."""
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs + 0.5
    ys = ys + 0.5
    half = size / 2.0
    if cls == 0:      # circle
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    if cls == 1:      # square
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    # upward triangle: apex at (cx, cy - half), base at y = cy + half
    in_band = (ys >= cy - half) & (ys <= cy + half)
    frac = (ys - (cy - half)) / size
    return in_band & (np.abs(xs - cx) <= frac * half)


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return img
    k = 2 * radius + 1
    padded = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    csum = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0), (0, 0)))
    h, w = img.shape[:2]
    out = (
        csum[k:k + h, k:k + w] - csum[:h, k:k + w] - csum[k:k + h, :w] + csum[:h, :w]
    )
    return out / (k * k)


def render_sample(spec: SceneSpec, split_key: int, index: int, shifted: bool) -> tuple[np.ndarray, list[BoxAnnotation]]:
    """Render one scene; returns (uint8 HxWx3 image, tight boxes)."""
    rng = np.random.default_rng((spec.seed, split_key, index))
    h, w = spec.image_hw
    # dark blue-gray background with mild pixel noise
    bg_rgb = _hsv_to_rgb(rng.uniform(0.55, 0.65), rng.uniform(0.15, 0.3), rng.uniform(0.18, 0.3))
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = bg_rgb
    img += rng.normal(0.0, 0.02, size=(h, w, 3))

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[BoxAnnotation] = []
    placed_masks: list[np.ndarray] = []
    for _ in range(n_objects):
        for _attempt in range(25):
            cls = int(rng.integers(0, len(CLASS_NAMES)))
            size = float(rng.uniform(spec.min_size, spec.max_size))
            margin = size / 2.0 + 1.0
            cx = float(rng.uniform(margin, w - margin))
            cy = float(rng.uniform(margin, h - margin))
            mask = _shape_mask(cls, h, w, cx, cy, size)
            if not mask.any():
                continue
            if any((mask & prev).sum() > 0.15 * mask.sum() for prev in placed_masks):
                continue
            hue = rng.uniform(0.0, 0.45)       # source palette: reds to greens
            if shifted:
                hue = (hue + spec.palette_shift) % 1.0
            color = _hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 0.95))
            img[mask] = color
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            boxes.append(BoxAnnotation(
                float(cols[0]), float(rows[0]),
                float(cols[-1] + 1), float(rows[-1] + 1), cls))
            placed_masks.append(mask)
            break
    if shifted:
        img = _box_blur(img, spec.blur_radius)
        img = (1.0 - spec.fog_strength) * img + spec.fog_strength * 1.0
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, boxes


def generate_pair_dataset(
    spec: SceneSpec,
    n_source: int,
    n_target: int,
    n_target_test: int = 200,
    split_keys: tuple[int, int, int] = (0, 1, 2),
) -> tuple[list[DomainSample], list[DomainSample], list[DomainSample]]:
    """Labeled source set, unlabeled target set, labeled target test set."""
    if min(n_source, n_target, n_target_test) < 1:
        raise SceneSpecError("split sizes must be >= 1")
    if len(set(split_keys)) != 3:
        raise SceneSpecError(f"split keys must be distinct, got {split_keys}")

    def build(split: str, key: int, count: int, shifted: bool, keep_boxes: bool, d: int):
        out = []
        for i in range(count):
            pixels, boxes = render_sample(spec, key, i, shifted)
            out.append(DomainSample(
                pixels=pixels,
                boxes=boxes if keep_boxes else [],
                d=d,
                image_id=f"{split}/img_{i:05d}",
            ))
        return out

    source = build("source", split_keys[0], n_source, shifted=False, keep_boxes=True, d=1)
    target = build("target", split_keys[1], n_target, shifted=True, keep_boxes=False, d=0)
    target_test = build("target_test", split_keys[2], n_target_test, shifted=True, keep_boxes=True, d=0)
    return source, target, target_test


def next_batch(
    source_set: list[DomainSample], target_set: list[DomainSample], step: int
) -> tuple[DomainSample, DomainSample]:
    """Cyclic deterministic pairing: one source and one target sample."""
    if not source_set or not target_set:
        raise DataError("next_batch needs non-empty source and target sets")
    return source_set[step % len(source_set)], target_set[step % len(target_set)]


# ---------------------------------------------------------------------------
# annotation and dataset I/O

def _validate_boxes(boxes, image_hw, where: str) -> None:
    h, w = image_hw
    for b in boxes:
        if not (b.x1 < b.x2 and b.y1 < b.y2):
            raise AnnotationError(f"{where}: degenerate box {b.as_list()}")
        if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
            raise AnnotationError(f"{where}: box {b.as_list()} outside {w}x{h} image")
        if not 0 <= b.cls < len(CLASS_NAMES):
            raise AnnotationError(f"{where}: unknown class {b.cls}")


def write_annotations(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "image": s.image_id + ".png",
                "d": s.d,
                "boxes": [b.as_list() for b in s.boxes],
            }
            fh.write(json.dumps(rec) + "\n")


def read_annotations(path) -> list[dict]:
    """Parses one record per line; raises AnnotationError naming the line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"line {lineno}: invalid JSON ({exc})") from exc
            for key in ("image", "d", "boxes"):
                if key not in rec:
                    raise AnnotationError(f"line {lineno}: missing field '{key}'")
            if rec["d"] not in (0, 1):
                raise AnnotationError(f"line {lineno}: domain flag must be 0 or 1")
            boxes = []
            for raw in rec["boxes"]:
                if len(raw) != 5:
                    raise AnnotationError(f"line {lineno}: box needs 5 fields, got {raw}")
                box = BoxAnnotation(*(float(v) for v in raw[:4]), cls=int(raw[4]))
                if not (box.x1 < box.x2 and box.y1 < box.y2):
                    raise AnnotationError(
                        f"line {lineno}: degenerate box {raw} in record '{rec['image']}'"
                    )
                boxes.append(box)
            records.append({"image": rec["image"], "d": rec["d"], "boxes": boxes})
    return records


def write_dataset(root, spec: SceneSpec, source, target, target_test) -> None:
    """Dataset directory: source/, target/, target_test/ + annotations + meta."""
    root = Path(root)
    for split, samples in zip(SPLIT_DIRS, (source, target, target_test)):
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for s in samples:
            name = s.image_id.split("/")[-1] + ".png"
            Image.fromarray(s.pixels).save(split_dir / name)
        write_annotations(split_dir / ANNOTATION_FILE, samples)
    meta = {
        "scene": asdict(spec),
        "counts": {
            "source": len(source), "target": len(target), "target_test": len(target_test)
        },
        "class_names": list(CLASS_NAMES),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_split(root, split: str) -> list[DomainSample]:
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise DataError(f"missing dataset split directory: {split_dir}")
    records = read_annotations(split_dir / ANNOTATION_FILE)
    samples = []
    for rec in records:
        img_path = split_dir / Path(rec["image"]).name
        pixels = np.asarray(Image.open(img_path).convert("RGB"))
        _validate_boxes(rec["boxes"], pixels.shape[:2], rec["image"])
        samples.append(DomainSample(
            pixels=pixels,
            boxes=rec["boxes"],
            d=rec["d"],
            image_id=f"{split}/{Path(rec['image']).stem}",
        ))
    if not samples:
        raise DataError(f"dataset split '{split}' is empty")
    return samples


def load_dataset(root) -> tuple[list[DomainSample], list[DomainSample], list[DomainSample]]:
    return tuple(load_split(root, split) for split in SPLIT_DIRS)

"""Synthetic-shapes detection data, COCO-subset JSON I/O and calibration-set construction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imaging
from ._parallel import pmap, round_half_up
from .degrade import DEFAULT_POOL, DegradationSpec, apply_mixed, image_rng
from .errors import DatasetError


@dataclass(frozen=True)
class GtBox:
    image_id: int
    class_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h; top-left anchored

    def __post_init__(self):
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise DatasetError(f"box must have positive size: {self.bbox}")


@dataclass
class ImageEntry:
    image_id: int
    width: int
    height: int
    file_name: str = ""
    pixels: np.ndarray | None = None


@dataclass
class DetectionDataset:
    images: list[ImageEntry]
    annotations: list[GtBox]
    categories: list[str]
    category_ids: list[int] | None = None  # external id of each contiguous class index
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = {im.image_id for im in self.images}
        for a in self.annotations:
            if a.image_id not in ids:
                raise DatasetError(f"annotation references unknown image {a.image_id}")
            if not 0 <= a.class_id < len(self.categories):
                raise DatasetError(f"class id {a.class_id} outside [0, {len(self.categories)})")

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def pixel_items(self) -> list[tuple[int, np.ndarray]]:
        out = []
        for im in self.images:
            if im.pixels is None:
                raise DatasetError(f"image {im.image_id} has no pixel data loaded")
            out.append((im.image_id, im.pixels))
        return out

    def boxes_for(self, image_id: int) -> list[GtBox]:
        return [a for a in self.annotations if a.image_id == image_id]

    def with_pixels(self, items: Sequence[tuple[int, np.ndarray]]) -> "DetectionDataset":
        by_id = dict(items)
        images = [ImageEntry(im.image_id, im.width, im.height, im.file_name, by_id[im.image_id])
                  for im in self.images]
        return DetectionDataset(images, list(self.annotations), list(self.categories),
                                self.category_ids, dict(self.manifest))


# ------------------------------------------------------------ synthetic shapes


@dataclass(frozen=True)
class ShapeClass:
    name: str
    color: tuple[int, int, int]
    size_range: tuple[int, int] = (20, 44)


DEFAULT_CLASSES: tuple[ShapeClass, ...] = (
    ShapeClass("red", (215, 45, 45)),
    ShapeClass("green", (45, 200, 70)),
    ShapeClass("blue", (50, 70, 220)),
    ShapeClass("yellow", (225, 210, 50)),
)


@dataclass(frozen=True)
class SynthShapesConfig:
    image_size: int = 128
    num_images: int = 200
    classes: tuple[ShapeClass, ...] = DEFAULT_CLASSES
    shapes_per_image: tuple[int, int] = (1, 4)
    background_color: tuple[int, int, int] = (118, 118, 118)
    background_amplitude: int = 12
    color_jitter: int = 8
    min_gap: int = 4
    max_iou: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(
            c if isinstance(c, ShapeClass) else ShapeClass(c[0], tuple(c[1]), tuple(c[2])) for c in self.classes))
        if self.shapes_per_image[0] < 0 or self.shapes_per_image[0] > self.shapes_per_image[1]:
            raise DatasetError(f"bad shapes_per_image {self.shapes_per_image}")
        if not 0 <= self.color_jitter <= 8:
            raise DatasetError("color jitter must be within [0, 8]")
        cols = np.array([c.color for c in self.classes], dtype=np.float64)
        for i in range(len(cols)):
            for j in range(i + 1, len(cols)):
                if np.linalg.norm(cols[i] - cols[j]) < 96:
                    raise DatasetError(
                        f"prototype colors of {self.classes[i].name!r} and {self.classes[j].name!r} closer than 96")

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size, "num_images": self.num_images,
            "classes": [[c.name, list(c.color), list(c.size_range)] for c in self.classes],
            "shapes_per_image": list(self.shapes_per_image), "background_color": list(self.background_color),
            "background_amplitude": self.background_amplitude, "color_jitter": self.color_jitter,
            "min_gap": self.min_gap, "max_iou": self.max_iou, "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SynthShapesConfig":
        d = dict(d)
        for key in ("shapes_per_image", "background_color"):
            if key in d:
                d[key] = tuple(d[key])
        if "classes" in d:
            d["classes"] = tuple(ShapeClass(n, tuple(c), tuple(s)) for n, c, s in d["classes"])
        return cls(**d)


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _background(cfg: SynthShapesConfig, rng: np.random.Generator) -> np.ndarray:
    s, amp = cfg.image_size, cfg.background_amplitude
    cells = max(2, s // 8 + 2)
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells, 3))
    # bilinear upsample of a coarse grid gives a smooth, low-frequency texture
    pos = np.linspace(0, cells - 1.001, s)
    i0 = np.floor(pos).astype(int)
    t = pos - i0
    rows = coarse[i0] * (1 - t)[:, None, None] + coarse[i0 + 1] * t[:, None, None]
    tex = rows[:, i0] * (1 - t)[None, :, None] + rows[:, i0 + 1] * t[None, :, None]
    fine = rng.uniform(-0.25, 0.25, size=(s, s, 3))
    bg = np.asarray(cfg.background_color, dtype=np.float64) + amp * np.clip(0.75 * tex + fine, -1, 1)
    return np.clip(np.round(bg), 0, 255).astype(np.uint8)


def _render_image(cfg: SynthShapesConfig, image_id: int):
    rng = image_rng(cfg.seed, image_id)
    img = _background(cfg, rng)
    lo, hi = cfg.shapes_per_image
    wanted = int(rng.integers(lo, hi + 1))
    s = cfg.image_size
    placed: list[tuple[int, tuple[int, int, int, int]]] = []
    skipped = 0
    for _ in range(wanted):
        cls = int(rng.integers(len(cfg.classes)))
        spec = cfg.classes[cls]
        for _attempt in range(50):
            w = int(rng.integers(spec.size_range[0], min(spec.size_range[1], s) + 1))
            h = int(rng.integers(spec.size_range[0], min(spec.size_range[1], s) + 1))
            x = int(rng.integers(0, s - w + 1))
            y = int(rng.integers(0, s - h + 1))
            box = (x, y, w, h)
            grown = (x - cfg.min_gap, y - cfg.min_gap, w + 2 * cfg.min_gap, h + 2 * cfg.min_gap)
            if all(box_iou(box, b) <= cfg.max_iou and box_iou(grown, b) == 0.0 for _, b in placed):
                jitter = rng.integers(-cfg.color_jitter, cfg.color_jitter + 1, size=3)
                color = np.clip(np.asarray(spec.color) + jitter, 0, 255).astype(np.uint8)
                img[y:y + h, x:x + w] = color
                placed.append((cls, box))
                break
        else:
            skipped += 1
    return img, placed, skipped


def generate_synth_shapes(cfg: SynthShapesConfig, workers: int = 1) -> DetectionDataset:
    results = pmap(lambda i: _render_image(cfg, i), range(cfg.num_images), workers)
    images, annotations, skipped = [], [], {}
    for image_id, (img, placed, n_skip) in enumerate(results):
        images.append(ImageEntry(image_id, cfg.image_size, cfg.image_size, f"images/{image_id}.ppm", img))
        annotations.extend(GtBox(image_id, c, tuple(float(v) for v in b)) for c, b in placed)
        if n_skip:
            skipped[str(image_id)] = n_skip
    manifest = {"generator": "synth_shapes", "config": cfg.to_json(), "skipped_shapes": skipped}
    return DetectionDataset(images, annotations, [c.name for c in cfg.classes], None, manifest)


# ---------------------------------------------------------------- COCO subset


def _require(d: dict, keys, where: str):
    for k in keys:
        if k not in d:
            raise DatasetError(f"missing required key {k!r} in {where}")


def coco_from_dict(doc: dict, root: Path | None = None, load_pixels: bool = True) -> DetectionDataset:
    _require(doc, ("images", "annotations", "categories"), "document")
    cats = sorted(doc["categories"], key=lambda c: c["id"])
    for c in cats:
        _require(c, ("id", "name"), "category")
    remap = {c["id"]: i for i, c in enumerate(cats)}
    images = []
    for im in doc["images"]:
        _require(im, ("id", "file_name", "width", "height"), "image")
        pixels = None
        if load_pixels and root is not None and (root / im["file_name"]).is_file():
            pixels = imaging.load_ppm(root / im["file_name"])
        images.append(ImageEntry(im["id"], im["width"], im["height"], im["file_name"], pixels))
    known = {im.image_id for im in images}
    anns = []
    for a in doc["annotations"]:
        _require(a, ("id", "image_id", "category_id", "bbox"), "annotation")
        if a["image_id"] not in known:
            raise DatasetError(f"annotation {a['id']} references unknown image {a['image_id']}")
        if a["category_id"] not in remap:
            raise DatasetError(f"annotation {a['id']} references unknown category {a['category_id']}")
        anns.append(GtBox(a["image_id"], remap[a["category_id"]], tuple(a["bbox"])))
    return DetectionDataset(images, anns, [c["name"] for c in cats], [c["id"] for c in cats],
                            {"category_id_map": {str(k): v for k, v in remap.items()}})


def load_coco_json(path: str | Path, load_pixels: bool = True) -> DetectionDataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from exc
    return coco_from_dict(doc, path.parent, load_pixels)


def coco_to_dict(ds: DetectionDataset) -> dict:
    ext = ds.category_ids or [i + 1 for i in range(ds.num_classes)]
    return {
        "images": [{"id": im.image_id, "file_name": im.file_name or f"images/{im.image_id}.ppm",
                    "width": im.width, "height": im.height} for im in ds.images],
        "annotations": [{"id": n + 1, "image_id": a.image_id, "category_id": ext[a.class_id],
                         "bbox": list(a.bbox), "area": a.bbox[2] * a.bbox[3], "iscrowd": 0}
                        for n, a in enumerate(ds.annotations)],
        "categories": [{"id": ext[i], "name": name} for i, name in enumerate(ds.categories)],
    }


def save_coco_json(ds: DetectionDataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(coco_to_dict(ds), indent=1))


def save_dataset_dir(ds: DetectionDataset, root: str | Path, extra_manifest: dict | None = None) -> Path:
    """Write ``images/<id>.ppm``, ``annotations.json`` and ``manifest.json`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for im in ds.images:
        if im.pixels is None:
            raise DatasetError(f"image {im.image_id} has no pixels to write")
        imaging.save_ppm(im.pixels, root / f"images/{im.image_id}.ppm")
        im.file_name = f"images/{im.image_id}.ppm"
    save_coco_json(ds, root / "annotations.json")
    manifest = dict(ds.manifest)
    ext = ds.category_ids or [i + 1 for i in range(ds.num_classes)]
    manifest["category_id_map"] = {str(e): i for i, e in enumerate(ext)}
    if extra_manifest:
        manifest.update(extra_manifest)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_dataset_dir(root: str | Path) -> DetectionDataset:
    root = Path(root)
    if not (root / "annotations.json").is_file():
        raise DatasetError(f"{root} has no annotations.json")
    ds = load_coco_json(root / "annotations.json")
    if (root / "manifest.json").is_file():
        ds.manifest.update(json.loads((root / "manifest.json").read_text()))
    return ds


# --------------------------------------------------------------- calibration


@dataclass(frozen=True)
class CalibSetConfig:
    size: int = 1000
    mix_ratio: float = 0.0
    pool: tuple[DegradationSpec, ...] = DEFAULT_POOL
    seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise DatasetError("calibration set size must be >= 1")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise DatasetError(f"mix_ratio must lie in [0, 1], got {self.mix_ratio}")


def sample_indices(pool_size: int, size: int, seed: int) -> list[int]:
    """Without replacement until the pool runs out, then with replacement."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    order = rng.permutation(pool_size).tolist()
    if size <= pool_size:
        return order[:size]
    return order + rng.integers(0, pool_size, size=size - pool_size).tolist()


def build_calibration_set(ds: DetectionDataset, cfg: CalibSetConfig,
                          workers: int = 1) -> tuple[list[np.ndarray], list[dict]]:
    """Calibration images in the normalized domain plus a provenance manifest.

    Exactly ``round(mix_ratio * size)`` entries are degraded (one pool member
    each); the rest are untouched copies of their source images.
    """
    items = ds.pixel_items()
    if not items:
        raise DatasetError("cannot build a calibration set from an empty dataset")
    picks = sample_indices(len(items), cfg.size, cfg.seed)
    chosen = [(n, items[i][1]) for n, i in enumerate(picks)]
    out = apply_mixed(chosen, cfg.pool, cfg.mix_ratio, cfg.seed, workers=workers)
    images, manifest = [], []
    for (img, rec), src in zip(out, picks):
        images.append(imaging.to_f32(img))
        entry = rec.to_json()
        entry["calib_index"] = entry.pop("image_id")
        entry["source_image_id"] = items[src][0]
        manifest.append(entry)
    expected = round_half_up(cfg.mix_ratio * cfg.size)
    assert sum(m["kind"] != "clean" for m in manifest) == expected
    return images, manifest


__all__ = [
    "CalibSetConfig", "DEFAULT_CLASSES", "DetectionDataset", "GtBox", "ImageEntry", "ShapeClass",
    "SynthShapesConfig", "box_iou", "build_calibration_set", "coco_from_dict", "coco_to_dict",
    "generate_synth_shapes", "load_coco_json", "load_dataset_dir", "sample_indices", "save_coco_json",
    "save_dataset_dir",
]

"""Dataset plumbing: annotation formats, splits, tile materialization, and
the seeded synthetic benchmark generator.

Labels exist in two interchangeable forms: YOLO text files (one per image,
normalized center coordinates) and a single COCO-style JSON manifest
(absolute top-left pixel boxes). Internally everything is a
DatasetManifest holding absolute top-left boxes; conversions happen only
here at the format boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BBox, GroundTruthBox
from .tiling import TileGridSpec, assign_gt_to_tile, crop_tile, plan_tiles

DEFAULT_CATEGORIES = ("caries", "pfs_requirement", "no_pfs_requirement")

#: Saturated object colors; synthetic backgrounds stay inside [40, 200] per
#: channel, so these never collide with background pixels.
OBJECT_PALETTE = (
    (235, 20, 20),
    (20, 235, 20),
    (20, 20, 235),
    (235, 235, 20),
    (235, 20, 235),
    (20, 235, 235),
)

BACKGROUND_LOW = 40
BACKGROUND_HIGH = 200

# PNG compression level 1: encoding 1920x1920 cluttered rasters at the
# default level dominates benchmark generation time.
PNG_COMPRESS_LEVEL = 1


class LabelFormatError(ValueError):
    """Malformed annotation input; carries file/line context in the message."""


class ManifestError(ValueError):
    """Structurally invalid manifest document."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str  # relative to the dataset root
    width: int
    height: int
    source_id: str | None = None  # provenance for materialized tiles
    tile_col: int | None = None
    tile_row: int | None = None


@dataclass
class DatasetManifest:
    categories: list[str]
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[GroundTruthBox] = field(default_factory=list)
    _by_image: dict[str, list[GroundTruthBox]] | None = None

    def validate(self) -> None:
        ids = [r.image_id for r in self.images]
        if len(ids) != len(set(ids)):
            raise ManifestError("duplicate image ids in manifest")
        known = set(ids)
        for gt in self.annotations:
            if gt.image_id not in known:
                raise ManifestError(f"annotation references unknown image {gt.image_id!r}")
            if not 0 <= gt.class_id < len(self.categories):
                raise ManifestError(f"annotation class {gt.class_id} outside categories")

    def annotations_for(self, image_id: str) -> list[GroundTruthBox]:
        if self._by_image is None:
            by_image: dict[str, list[GroundTruthBox]] = {}
            for gt in self.annotations:
                by_image.setdefault(gt.image_id, []).append(gt)
            self._by_image = by_image
        return list(self._by_image.get(image_id, []))

    def record(self, image_id: str) -> ImageRecord:
        for r in self.images:
            if r.image_id == image_id:
                return r
        raise KeyError(image_id)


def load_raster(path: str | Path) -> np.ndarray:
    """Decode a PNG or JPEG file into an HxWx3 uint8 array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_raster(raster: np.ndarray, path: str | Path) -> None:
    """Encode a raster as lossless PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(raster, mode="RGB").save(path, format="PNG", compress_level=PNG_COMPRESS_LEVEL)


# ---------------------------------------------------------------------------
# YOLO label format


def parse_yolo_labels(
    text: str, image_width: int, image_height: int, image_id: str = ""
) -> list[GroundTruthBox]:
    """Parse "class cx cy w h" lines (normalized center form) into absolute
    top-left boxes. Blank lines and extra whitespace are tolerated."""
    boxes: list[GroundTruthBox] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LabelFormatError(f"line {lineno}: expected 5 fields, got {len(parts)}: {raw!r}")
        try:
            class_id = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise LabelFormatError(f"line {lineno}: {exc}") from exc
        if class_id < 0:
            raise LabelFormatError(f"line {lineno}: negative class id {class_id}")
        for name, value in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
            if not 0.0 <= value <= 1.0:
                raise LabelFormatError(f"line {lineno}: {name}={value} outside [0, 1]")
        boxes.append(
            GroundTruthBox(
                BBox(
                    (cx - w / 2) * image_width,
                    (cy - h / 2) * image_height,
                    w * image_width,
                    h * image_height,
                ),
                class_id,
                image_id,
            )
        )
    return boxes


def emit_yolo_labels(boxes: list[GroundTruthBox], image_width: int, image_height: int) -> str:
    """Emit normalized center-form label lines, 6 decimal places."""
    lines = []
    for gt in boxes:
        cx = (gt.bbox.x + gt.bbox.w / 2) / image_width
        cy = (gt.bbox.y + gt.bbox.h / 2) / image_height
        w = gt.bbox.w / image_width
        h = gt.bbox.h / image_height
        lines.append(f"{gt.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# COCO-style manifest format


def manifest_to_coco(manifest: DatasetManifest) -> dict:
    """Emit the COCO-style document (categories 1-based, boxes absolute)."""
    return {
        "images": [
            {"id": r.image_id, "file_name": r.path, "width": r.width, "height": r.height}
            | (
                {"source_id": r.source_id, "tile_col": r.tile_col, "tile_row": r.tile_row}
                if r.source_id is not None
                else {}
            )
            for r in manifest.images
        ],
        "annotations": [
            {
                "id": i + 1,
                "image_id": gt.image_id,
                "category_id": gt.class_id + 1,
                "bbox": [gt.bbox.x, gt.bbox.y, gt.bbox.w, gt.bbox.h],
                "area": gt.bbox.area,
                "iscrowd": 0,
            }
            for i, gt in enumerate(manifest.annotations)
        ],
        "categories": [
            {"id": i + 1, "name": name} for i, name in enumerate(manifest.categories)
        ],
    }


def manifest_from_coco(doc: dict) -> tuple[DatasetManifest, dict[int | str, int]]:
    """Parse a COCO-style document.

    Category ids are remapped to dense 0-based indices (ascending original
    id order); the mapping is returned alongside the manifest.
    """
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ManifestError(f"missing {key!r} section")
    cats = sorted(doc["categories"], key=lambda c: c["id"])
    if len({c["id"] for c in cats}) != len(cats):
        raise ManifestError("duplicate category ids")
    cat_map: dict[int | str, int] = {c["id"]: i for i, c in enumerate(cats)}

    images = []
    seen: set[str] = set()
    for entry in doc["images"]:
        image_id = str(entry["id"])
        if image_id in seen:
            raise ManifestError(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        images.append(
            ImageRecord(
                image_id=image_id,
                path=entry["file_name"],
                width=int(entry["width"]),
                height=int(entry["height"]),
                source_id=entry.get("source_id"),
                tile_col=entry.get("tile_col"),
                tile_row=entry.get("tile_row"),
            )
        )

    annotations = []
    seen_ann: set = set()
    for entry in doc["annotations"]:
        ann_id = entry.get("id")
        if ann_id is not None:
            if ann_id in seen_ann:
                raise ManifestError(f"duplicate annotation id {ann_id!r}")
            seen_ann.add(ann_id)
        image_id = str(entry["image_id"])
        if image_id not in seen:
            raise ManifestError(f"annotation {ann_id} references unknown image {image_id!r}")
        if entry["category_id"] not in cat_map:
            raise ManifestError(
                f"annotation {entry.get('id')} references unknown category {entry['category_id']!r}"
            )
        x, y, w, h = entry["bbox"]
        annotations.append(
            GroundTruthBox(BBox(float(x), float(y), float(w), float(h)), cat_map[entry["category_id"]], image_id)
        )

    manifest = DatasetManifest(
        categories=[c["name"] for c in cats], images=images, annotations=annotations
    )
    manifest.validate()
    return manifest, cat_map


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest_to_coco(manifest), indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"unreadable manifest {path}: {exc}") from exc
    manifest, _ = manifest_from_coco(doc)
    return manifest


# ---------------------------------------------------------------------------
# Dataset splitting


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("train", "val", "test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} ratio must be non-negative")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")


def split_dataset(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Image-level seeded split into train/val/test.

    Counts are floor(n * ratio) for train and val; the test split absorbs
    the remainder, so the three parts are disjoint and exhaustive.
    """
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(manifest.images))
    n = len(manifest.images)
    n_train = math.floor(n * spec.train)
    n_val = math.floor(n * spec.val)
    groups = (
        order[:n_train],
        order[n_train : n_train + n_val],
        order[n_train + n_val :],
    )
    parts = []
    for indices in groups:
        records = [manifest.images[int(i)] for i in sorted(indices)]
        ids = {r.image_id for r in records}
        parts.append(
            DatasetManifest(
                categories=list(manifest.categories),
                images=records,
                annotations=[gt for gt in manifest.annotations if gt.image_id in ids],
            )
        )
    return parts[0], parts[1], parts[2]


# ---------------------------------------------------------------------------
# Extended dataset (full images + tiles)


def materialize_extended(
    manifest: DatasetManifest,
    images_root: str | Path,
    out_dir: str | Path,
    grid: TileGridSpec,
    min_visible_ratio: float = 0.5,
) -> DatasetManifest:
    """Write the full-plus-tiles dataset used to train a tiled detector.

    Every source image is re-encoded to PNG and each of its tiles becomes a
    new image record carrying provenance (source id, col, row); tile labels
    come from assign_gt_to_tile, so partially visible boxes are clipped,
    not dropped. Per-file I/O errors are collected and reported together.
    """
    root = Path(images_root)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)

    records: list[ImageRecord] = []
    annotations: list[GroundTruthBox] = []
    failures: list[str] = []

    def _emit(image_id: str, raster: np.ndarray, gts: list[GroundTruthBox], **provenance) -> None:
        h, w = raster.shape[:2]
        save_raster(raster, out / "images" / f"{image_id}.png")
        (out / "labels" / f"{image_id}.txt").write_text(emit_yolo_labels(gts, w, h))
        records.append(ImageRecord(image_id, f"images/{image_id}.png", w, h, **provenance))
        annotations.extend(GroundTruthBox(g.bbox, g.class_id, image_id) for g in gts)

    for record in manifest.images:
        try:
            raster = load_raster(root / record.path)
        except OSError as exc:
            failures.append(f"{record.path}: {exc}")
            continue
        gts = manifest.annotations_for(record.image_id)
        _emit(record.image_id, raster, gts)
        for tile in plan_tiles(record.width, record.height, grid):
            tile_id = f"{record.image_id}_r{tile.row}c{tile.col}"
            tile_gts = assign_gt_to_tile(tile, gts, min_visible_ratio)
            _emit(
                tile_id,
                crop_tile(raster, tile),
                tile_gts,
                source_id=record.image_id,
                tile_col=tile.col,
                tile_row=tile.row,
            )

    if failures:
        raise OSError("failed to materialize some images: " + "; ".join(failures))
    extended = DatasetManifest(
        categories=list(manifest.categories), images=records, annotations=annotations
    )
    save_manifest(extended, out / "manifest.json")
    return extended


# ---------------------------------------------------------------------------
# Synthetic benchmark generator


@dataclass(frozen=True)
class SynthConfig:
    image_count: int = 200
    width: int = 1920
    height: int = 1920
    objects_min: int = 5
    objects_max: int = 15
    object_size_min: int = 10
    object_size_max: int = 40
    class_count: int = 3
    background: str = "mix"  # noise | gradient | mix
    seed: int = 42

    def __post_init__(self) -> None:
        if self.image_count < 0:
            raise ValueError("image_count must be non-negative")
        if self.width < 8 or self.height < 8:
            raise ValueError("images must be at least 8x8")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError("invalid objects-per-image range")
        if not 1 <= self.object_size_min <= self.object_size_max:
            raise ValueError("invalid object size range")
        if self.object_size_max * 2 > min(self.width, self.height):
            raise ValueError("objects too large for the image size")
        if not 1 <= self.class_count <= len(OBJECT_PALETTE):
            raise ValueError(f"class_count must be in [1, {len(OBJECT_PALETTE)}]")
        if self.background not in ("noise", "gradient", "mix"):
            raise ValueError(f"unknown background style: {self.background}")

    def to_dict(self) -> dict:
        return {
            "image_count": self.image_count,
            "width": self.width,
            "height": self.height,
            "objects_min": self.objects_min,
            "objects_max": self.objects_max,
            "object_size_min": self.object_size_min,
            "object_size_max": self.object_size_max,
            "class_count": self.class_count,
            "background": self.background,
            "seed": self.seed,
        }


def _synth_background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    canvas = np.zeros((h, w, 3), dtype=np.float32)
    if cfg.background in ("gradient", "mix"):
        c0 = rng.integers(BACKGROUND_LOW + 20, BACKGROUND_HIGH - 30, size=3).astype(np.float32)
        c1 = rng.integers(BACKGROUND_LOW + 20, BACKGROUND_HIGH - 30, size=3).astype(np.float32)
        if int(rng.integers(0, 2)) == 0:
            ramp = np.linspace(0.0, 1.0, w, dtype=np.float32)[None, :, None]
        else:
            ramp = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None, None]
        canvas += c0 + ramp * (c1 - c0)
    else:
        canvas += float(rng.integers(BACKGROUND_LOW + 30, BACKGROUND_HIGH - 40))
    if cfg.background in ("noise", "mix"):
        # block noise: cheap to generate, cheap for PNG to compress
        block = 16
        gh, gw = -(-h // block), -(-w // block)
        noise = rng.integers(-24, 25, size=(gh, gw, 3)).astype(np.float32)
        canvas += np.repeat(np.repeat(noise, block, axis=0), block, axis=1)[:h, :w]
    return np.clip(canvas, BACKGROUND_LOW, BACKGROUND_HIGH).astype(np.uint8)


def _draw_object(
    raster: np.ndarray, x: int, y: int, w: int, h: int, color: tuple[int, int, int], shape: str
) -> BBox:
    """Draw one filled shape and return the exact bounding box of its pixels."""
    if shape == "rect":
        raster[y : y + h, x : x + w] = color
        return BBox(float(x), float(y), float(w), float(h))
    # ellipse inscribed in the planned box, rasterized on pixel centers
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = w / 2.0, h / 2.0
    mask = (((xs + 0.5 - cx) / (w / 2.0)) ** 2 + ((ys + 0.5 - cy) / (h / 2.0)) ** 2) <= 1.0
    raster[y : y + h, x : x + w][mask] = color
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(
        float(x + cols[0]),
        float(y + rows[0]),
        float(cols[-1] - cols[0] + 1),
        float(rows[-1] - rows[0] + 1),
    )


def object_style(class_id: int) -> tuple[tuple[int, int, int], str]:
    """Fixed class -> (color, shape) scheme of the synthetic benchmark."""
    color = OBJECT_PALETTE[class_id % len(OBJECT_PALETTE)]
    shape = "ellipse" if class_id % 2 == 0 else "rect"
    return color, shape


def synth_gen(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate the seeded synthetic small-object dataset.

    Objects are axis-aligned filled ellipses/rectangles in saturated class
    colors on muted cluttered backgrounds; every ground-truth box is the
    exact bounding rectangle of the drawn pixels. Placement keeps objects
    strictly disjoint (with a 2 px margin), which trivially satisfies the
    pairwise IoU cap of 0.3. Same config and seed give byte-identical
    rasters and labels.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    categories = (
        list(DEFAULT_CATEGORIES)
        if cfg.class_count == len(DEFAULT_CATEGORIES)
        else [f"class_{i}" for i in range(cfg.class_count)]
    )

    records: list[ImageRecord] = []
    annotations: list[GroundTruthBox] = []
    for index in range(cfg.image_count):
        image_id = f"synth_{index:04d}"
        rng = np.random.default_rng([cfg.seed, index])
        raster = _synth_background(rng, cfg)
        count = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
        placed: list[tuple[int, int, int, int]] = []
        gts: list[GroundTruthBox] = []
        for _ in range(count):
            class_id = int(rng.integers(0, cfg.class_count))
            w = int(rng.integers(cfg.object_size_min, cfg.object_size_max + 1))
            h = int(rng.integers(cfg.object_size_min, cfg.object_size_max + 1))
            for _attempt in range(100):
                x = int(rng.integers(0, cfg.width - w + 1))
                y = int(rng.integers(0, cfg.height - h + 1))
                if all(
                    x + w + 2 <= px or px + pw + 2 <= x or y + h + 2 <= py or ph + py + 2 <= y
                    for px, py, pw, ph in placed
                ):
                    break
            else:
                continue  # crowded image; place fewer objects
            placed.append((x, y, w, h))
            color, shape = object_style(class_id)
            tight = _draw_object(raster, x, y, w, h, color, shape)
            gts.append(GroundTruthBox(tight, class_id, image_id))

        save_raster(raster, out / "images" / f"{image_id}.png")
        (out / "labels" / f"{image_id}.txt").write_text(
            emit_yolo_labels(gts, cfg.width, cfg.height)
        )
        records.append(ImageRecord(image_id, f"images/{image_id}.png", cfg.width, cfg.height))
        annotations.extend(gts)

    manifest = DatasetManifest(categories=categories, images=records, annotations=annotations)
    save_manifest(manifest, out / "manifest.json")
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest

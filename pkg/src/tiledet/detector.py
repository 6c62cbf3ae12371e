"""Pluggable detection back-ends and the model-input resize.

Real neural detectors are out of scope; what the pipeline needs is the
contract: detect(view raster, view metadata, seed) -> detections in the
view's coordinate frame, deterministic for a given (view, seed). Two
back-ends satisfy it here:

* OracleDetector - a seeded test double that knows the ground truth and
  detects each object with probability proportional to its area after the
  model-input resize, so shrinking a big view into the model input
  destroys small objects exactly the way tiling is meant to prevent.
* ReplayDetector - serves precomputed, offline detections from a store.

Every call derives an independent sub-seed from (seed, image key, view
kind), so views can be processed concurrently and in any order without
changing results.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .geometry import BBox, Detection, GroundTruthBox, clip_to
from .tiling import Tile, assign_gt_to_tile

#: Letterbox padding color (detector-family convention).
PAD_VALUE = 114

REPLAY_FORMAT = "tiledet-replay/1"


@dataclass(frozen=True)
class ViewMeta:
    """What the detector is looking at: the full image or one tile of it.

    image_id is a content digest of the source image (see raster_digest),
    so identical pixels get identical detections no matter how the caller
    names its files or jobs. origin_x/origin_y place a tile view inside the
    source image; they are 0 for the full view.
    """

    image_id: str
    kind: str  # "full" | "tile"
    col: int | None
    row: int | None
    width: int
    height: int
    origin_x: int = 0
    origin_y: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"view dimensions must be positive: {self.width}x{self.height}")
        if self.kind not in ("full", "tile"):
            raise ValueError(f"unknown view kind: {self.kind}")
        if self.kind == "tile" and (self.col is None or self.row is None):
            raise ValueError("tile views need col and row")

    @property
    def view_key(self) -> str:
        if self.kind == "full":
            return "full"
        return f"tile:{self.col},{self.row}"


@dataclass(frozen=True)
class OracleParams:
    """Knobs of the resolution-degradation oracle.

    An object of view-frame area a is seen at effective area a * s^2 after
    the aspect-preserving resize to input_size (s = input_size / max(W, H));
    its detection probability is min(1, a_eff / area_ref).
    """

    input_size: int = 640
    area_ref: float = 1024.0  # 32 x 32, the usual small-object boundary
    jitter: float = 0.05  # box perturbation, fraction of min(w, h)
    fp_rate: float = 0.5  # expected false positives per view
    score_noise: float = 0.05
    num_classes: int = 3

    def __post_init__(self) -> None:
        if self.input_size < 1:
            raise ValueError(f"input_size must be >= 1: {self.input_size}")
        for name in ("area_ref", "jitter", "fp_rate", "score_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1: {self.num_classes}")


@runtime_checkable
class Detector(Protocol):
    kind: str

    def detect(self, raster: np.ndarray, meta: ViewMeta, seed: int) -> list[Detection]: ...


def raster_digest(raster: np.ndarray) -> str:
    """Stable content identity of a raster (dims + pixel bytes)."""
    h = hashlib.sha256()
    h.update(f"{raster.shape[1]}x{raster.shape[0]}".encode())
    h.update(np.ascontiguousarray(raster).tobytes())
    return h.hexdigest()[:16]


def derive_view_seed(seed: int, image_key: str, view_key: str) -> int:
    """Independent 64-bit sub-seed for one (image, view) pair."""
    digest = hashlib.sha256(f"{seed}|{image_key}|{view_key}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def letterbox_scale(width: int, height: int, target: int) -> float:
    return target / max(width, height)


def letterbox(
    raster: np.ndarray, target: int
) -> tuple[np.ndarray, float, tuple[float, float]]:
    """Aspect-preserving resize to a target square with neutral-gray padding.

    Returns (padded raster, scale, (pad_x, pad_y)) so that a view-frame
    coordinate u maps to u * scale + pad on the model-input frame and back.
    Resampling is nearest-neighbor on pixel centers.
    """
    if target < 1:
        raise ValueError(f"target must be >= 1: {target}")
    h, w = raster.shape[:2]
    scale = letterbox_scale(w, h, target)
    content_w = max(1, int(round(w * scale)))
    content_h = max(1, int(round(h * scale)))
    src_x = np.minimum(((np.arange(content_w) + 0.5) / scale).astype(np.int64), w - 1)
    src_y = np.minimum(((np.arange(content_h) + 0.5) / scale).astype(np.int64), h - 1)
    content = raster[src_y][:, src_x]
    out = np.full((target, target) + raster.shape[2:], PAD_VALUE, dtype=raster.dtype)
    pad_x = (target - content_w) // 2
    pad_y = (target - content_h) // 2
    out[pad_y : pad_y + content_h, pad_x : pad_x + content_w] = content
    return out, scale, (float(pad_x), float(pad_y))


def box_to_letterbox(box: BBox, scale: float, pads: tuple[float, float]) -> BBox:
    return BBox(box.x * scale + pads[0], box.y * scale + pads[1], box.w * scale, box.h * scale)


def box_from_letterbox(box: BBox, scale: float, pads: tuple[float, float]) -> BBox:
    return BBox((box.x - pads[0]) / scale, (box.y - pads[1]) / scale, box.w / scale, box.h / scale)


def detection_probability(
    area: float, view_width: int, view_height: int, params: OracleParams
) -> float:
    """min(1, a_eff / area_ref) with a_eff the post-resize area."""
    s = letterbox_scale(view_width, view_height, params.input_size)
    return min(1.0, area * s * s / params.area_ref)


def oracle_detect(
    gts: Sequence[GroundTruthBox],
    view_width: int,
    view_height: int,
    params: OracleParams,
    rng: np.random.Generator,
) -> list[Detection]:
    """Generate detections for one view from its ground truth.

    Draw order per ground-truth box, in input order: one uniform for
    presence; if present, four standard normals for (x, y, w, h) jitter and
    one standard normal for score noise. Afterwards one Poisson draw for
    the false-positive count, then per false positive: four uniforms for
    geometry, one integer for the class, one uniform for the score.
    """
    dets: list[Detection] = []
    for gt in gts:
        p = detection_probability(gt.bbox.area, view_width, view_height, params)
        if rng.random() >= p:
            continue
        sigma = params.jitter * min(gt.bbox.w, gt.bbox.h)
        jx, jy, jw, jh = rng.standard_normal(4) * sigma
        noise = rng.standard_normal() * params.score_noise
        score = min(1.0, max(0.0, p + noise))
        box = clip_to(
            BBox(
                gt.bbox.x + jx,
                gt.bbox.y + jy,
                max(0.0, gt.bbox.w + jw),
                max(0.0, gt.bbox.h + jh),
            ),
            view_width,
            view_height,
        )
        if box.area <= 0:
            continue
        dets.append(Detection(box, gt.class_id, score))

    for _ in range(rng.poisson(params.fp_rate)):
        u1, u2, u3, u4 = rng.random(4)
        x = u1 * view_width * 0.9
        y = u2 * view_height * 0.9
        w = (0.02 + 0.08 * u3) * view_width
        h = (0.02 + 0.08 * u4) * view_height
        class_id = int(rng.integers(0, params.num_classes))
        score = 0.05 + 0.45 * rng.random()
        box = clip_to(BBox(x, y, w, h), view_width, view_height)
        if box.area <= 0:
            continue
        dets.append(Detection(box, class_id, score))
    return dets


class OracleDetector:
    """Ground-truth-backed test double with resolution-degradation behavior.

    Truth is keyed by raster content (raster_digest), so the same pixels
    produce the same detections whether they arrive from a file on disk, a
    benchmark loop, or an HTTP upload. Unknown images simply have no
    objects to find (only false positives can appear).
    """

    kind = "oracle"

    def __init__(
        self,
        params: OracleParams = OracleParams(),
        min_visible_ratio: float = 0.5,
    ) -> None:
        self.params = params
        self.min_visible_ratio = min_visible_ratio
        self._truth: dict[str, list[GroundTruthBox]] = {}
        self._lock = threading.Lock()

    def register_truth(self, raster: np.ndarray, gts: Sequence[GroundTruthBox]) -> str:
        """Associate image-frame ground truth with a raster's content key."""
        key = raster_digest(raster)
        with self._lock:
            self._truth[key] = list(gts)
        return key

    @classmethod
    def from_manifest(
        cls,
        manifest,
        images_root: str | Path,
        params: OracleParams = OracleParams(),
        min_visible_ratio: float = 0.5,
    ) -> "OracleDetector":
        from .data_io import load_raster

        detector = cls(params, min_visible_ratio)
        root = Path(images_root)
        for record in manifest.images:
            raster = load_raster(root / record.path)
            detector.register_truth(raster, manifest.annotations_for(record.image_id))
        return detector

    def _view_truth(self, meta: ViewMeta) -> list[GroundTruthBox]:
        with self._lock:
            gts = self._truth.get(meta.image_id, [])
        if meta.kind == "full":
            return [
                GroundTruthBox(clip_to(g.bbox, meta.width, meta.height), g.class_id, g.image_id)
                for g in gts
            ]
        tile = Tile(meta.col, meta.row, meta.origin_x, meta.origin_y, meta.width, meta.height)
        return assign_gt_to_tile(tile, gts, self.min_visible_ratio)

    def detect(self, raster: np.ndarray, meta: ViewMeta, seed: int) -> list[Detection]:
        sub_seed = derive_view_seed(seed, meta.image_id, meta.view_key)
        rng = np.random.Generator(np.random.PCG64(sub_seed))
        return oracle_detect(self._view_truth(meta), meta.width, meta.height, self.params, rng)


class ReplayDetector:
    """Serves precomputed detections keyed by (image key, view kind)."""

    kind = "replay"

    def __init__(self, store: dict[str, dict[str, list[Detection]]]) -> None:
        self.store = store

    def detect(self, raster: np.ndarray, meta: ViewMeta, seed: int) -> list[Detection]:
        try:
            return list(self.store[meta.image_id][meta.view_key])
        except KeyError:
            raise KeyError(
                f"replay store has no entry for image {meta.image_id!r}, view {meta.view_key!r}"
            ) from None


def save_replay_store(store: dict[str, dict[str, list[Detection]]], path: str | Path) -> None:
    doc = {
        "format": REPLAY_FORMAT,
        "images": {
            image_key: {
                view_key: [
                    {
                        "class_id": d.class_id,
                        "score": d.score,
                        "x": d.bbox.x,
                        "y": d.bbox.y,
                        "w": d.bbox.w,
                        "h": d.bbox.h,
                    }
                    for d in dets
                ]
                for view_key, dets in views.items()
            }
            for image_key, views in store.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_replay_store(path: str | Path) -> dict[str, dict[str, list[Detection]]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"unreadable replay store {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != REPLAY_FORMAT:
        raise ValueError(f"{path} is not a {REPLAY_FORMAT} document")
    store: dict[str, dict[str, list[Detection]]] = {}
    for image_key, views in doc["images"].items():
        store[image_key] = {
            view_key: [
                Detection(BBox(d["x"], d["y"], d["w"], d["h"]), int(d["class_id"]), d["score"])
                for d in dets
            ]
            for view_key, dets in views.items()
        }
    return store

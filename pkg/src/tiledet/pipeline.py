"""End-to-end tiled inference: full-image pass, filtered tile passes, merge.

The tiled path always processes the full image too; tile detections are
remapped into the image frame and the union of both passes goes through a
single joint NMS. With tiling disabled the pipeline reduces exactly to the
plain detect-then-NMS baseline, which is what benchmark comparisons run
against.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Detector, ViewMeta, raster_digest
from .geometry import Detection, NmsConfig, nms
from .metrics import COCO_THRESHOLDS, EvalReport, evaluate
from .tile_filter import LinearSvmModel, histogram_feature, model_fingerprint, svm_predict
from .tiling import Tile, TileGridSpec, crop_tile, plan_tiles, remap_detection


class PipelineError(RuntimeError):
    """Raised when a detector or filter fails, naming the offending view."""


@dataclass(frozen=True)
class PipelineConfig:
    """One inference configuration (the tiled and untiled variants differ
    only in tiling_enabled)."""

    tiling_enabled: bool = True
    grid: TileGridSpec = field(default_factory=TileGridSpec)
    nms: NmsConfig = field(default_factory=NmsConfig)
    input_size: int = 640  # model-input side; the detector owns the resize
    score_floor: float = 0.01  # minimum confidence kept before NMS
    filter_model: LinearSvmModel | None = None
    filter_bias: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_floor < 1.0:
            raise ValueError(f"score_floor must be in [0, 1): {self.score_floor}")
        if self.input_size < 1:
            raise ValueError(f"input_size must be >= 1: {self.input_size}")

    def to_dict(self) -> dict:
        return {
            "tiling_enabled": self.tiling_enabled,
            "grid": {
                "n_cols": self.grid.n_cols,
                "n_rows": self.grid.n_rows,
                "overlap": self.grid.overlap,
            },
            "nms": {
                "iou_threshold": self.nms.iou_threshold,
                "class_aware": self.nms.class_aware,
            },
            "input_size": self.input_size,
            "score_floor": self.score_floor,
            "filter": None if self.filter_model is None else model_fingerprint(self.filter_model),
            "filter_bias": self.filter_bias,
        }


def _detect_view(
    detector: Detector, raster: np.ndarray, meta: ViewMeta, seed: int
) -> list[Detection]:
    try:
        return detector.detect(raster, meta, seed)
    except Exception as exc:
        raise PipelineError(f"detector failed on view {meta.view_key} of {meta.image_id}: {exc}") from exc


def _tile_pass(
    image: np.ndarray,
    tile: Tile,
    image_id: str,
    detector: Detector,
    cfg: PipelineConfig,
    seed: int,
) -> list[Detection]:
    crop = crop_tile(image, tile)
    if cfg.filter_model is not None:
        try:
            feature = histogram_feature(crop, cfg.filter_model.hist_config)
            keep, _ = svm_predict(cfg.filter_model, feature, cfg.filter_bias)
        except Exception as exc:
            raise PipelineError(
                f"tile filter failed on view tile:{tile.col},{tile.row} of {image_id}: {exc}"
            ) from exc
        if not keep:
            return []
    meta = ViewMeta(
        image_id,
        "tile",
        tile.col,
        tile.row,
        tile.width,
        tile.height,
        tile.origin_x,
        tile.origin_y,
    )
    h, w = image.shape[:2]
    return [
        remap_detection(tile, d, w, h) for d in _detect_view(detector, crop, meta, seed)
    ]


def run_pipeline(
    image: np.ndarray,
    detector: Detector,
    cfg: PipelineConfig,
    seed: int,
    threads: int = 1,
) -> list[Detection]:
    """Run one image through the configured pipeline.

    Returns image-frame detections sorted by descending score. Candidates
    are always assembled in a fixed order (full view first, tiles
    row-major) no matter how many worker threads run the tile passes, so
    the output is deterministic.
    """
    if image.size == 0:
        raise ValueError("empty image")
    h, w = image.shape[:2]
    image_id = raster_digest(image)

    full_meta = ViewMeta(image_id, "full", None, None, w, h)
    candidates = list(_detect_view(detector, image, full_meta, seed))

    if cfg.tiling_enabled:
        tiles = plan_tiles(w, h, cfg.grid)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_tile = list(
                    pool.map(
                        lambda t: _tile_pass(image, t, image_id, detector, cfg, seed), tiles
                    )
                )
        else:
            per_tile = [_tile_pass(image, t, image_id, detector, cfg, seed) for t in tiles]
        for dets in per_tile:
            candidates.extend(dets)

    candidates = [d for d in candidates if d.score >= cfg.score_floor]
    return nms(candidates, cfg.nms)


def detections_document(
    image_id: str,
    width: int,
    height: int,
    cfg: PipelineConfig,
    detections: Sequence[Detection],
    categories: Sequence[str],
) -> dict:
    """The wire/file form of one image's results (shared by CLI and service)."""
    return {
        "image_id": image_id,
        "width": width,
        "height": height,
        "config": cfg.to_dict(),
        "detections": [
            {
                "class_id": d.class_id,
                "class_name": categories[d.class_id] if d.class_id < len(categories) else str(d.class_id),
                "score": d.score,
                "bbox": {"x": d.bbox.x, "y": d.bbox.y, "w": d.bbox.w, "h": d.bbox.h},
            }
            for d in detections
        ],
    }


@dataclass
class ComparisonReport:
    """Side-by-side evaluation of the tiled and untiled pipelines."""

    untiled: EvalReport
    tiled: EvalReport

    @property
    def map50_delta(self) -> float:
        return self.tiled.map50 - self.untiled.map50

    @property
    def map5095_delta(self) -> float:
        return self.tiled.map5095 - self.untiled.map5095

    @property
    def recall50_delta(self) -> float:
        return self.tiled.recall50 - self.untiled.recall50

    def to_dict(self) -> dict:
        return {
            "untiled": self.untiled.to_dict(),
            "tiled": self.tiled.to_dict(),
            "deltas": {
                "map50": self.map50_delta,
                "map5095": self.map5095_delta,
                "recall50": self.recall50_delta,
            },
        }

    def render(self) -> str:
        lines = []
        rows = [("untiled", self.untiled), ("tiled", self.tiled)]
        for label, report in rows:
            lines.append(
                f"{label:<8}  mAP@.5 {100 * report.map50:6.2f}"
                f"  mAP@.5:.95 {100 * report.map5095:6.2f}"
                f"  recall@.5 {100 * report.recall50:6.2f}"
            )
        lines.append(
            f"{'delta':<8}  mAP@.5 {100 * self.map50_delta:+6.2f}"
            f"  mAP@.5:.95 {100 * self.map5095_delta:+6.2f}"
            f"  recall@.5 {100 * self.recall50_delta:+6.2f}"
        )
        return "\n".join(lines)


def compare_runs(
    manifest,
    images_root: str | Path,
    detector: Detector,
    cfg_tiled: PipelineConfig,
    cfg_untiled: PipelineConfig,
    seed: int,
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    threads: int = 1,
) -> ComparisonReport:
    """Evaluate the tiled and untiled pipelines over one annotated image set.

    Both runs share the detector and seed, so their full-image passes are
    identical and the tiled candidate set is a superset of the untiled one.
    """
    from .data_io import load_raster

    root = Path(images_root)
    preds_tiled: dict[str, list[Detection]] = {}
    preds_untiled: dict[str, list[Detection]] = {}
    for record in manifest.images:
        raster = load_raster(root / record.path)
        register = getattr(detector, "register_truth", None)
        if register is not None:
            register(raster, manifest.annotations_for(record.image_id))
        preds_untiled[record.image_id] = run_pipeline(raster, detector, cfg_untiled, seed, threads)
        preds_tiled[record.image_id] = run_pipeline(raster, detector, cfg_tiled, seed, threads)

    gts = list(manifest.annotations)
    categories = list(manifest.categories)
    return ComparisonReport(
        untiled=evaluate(preds_untiled, gts, categories, thresholds),
        tiled=evaluate(preds_tiled, gts, categories, thresholds),
    )


def untiled_variant(cfg: PipelineConfig) -> PipelineConfig:
    """The baseline configuration matching a tiled one."""
    return replace(cfg, tiling_enabled=False)

"""Overlap-grid tile planning, cropping, and coordinate remapping.

An image is carved into n_cols x n_rows tiles whose consecutive members
share a configurable fraction of their extent. Detections made inside a
tile are translated back into the image frame before merging; ground-truth
boxes travel the other way when building tile-level labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBox, Detection, GroundTruthBox, clip_to, intersection_area


@dataclass(frozen=True)
class TileGridSpec:
    """Grid shape plus the overlap fraction between consecutive tiles."""

    n_cols: int = 5
    n_rows: int = 5
    overlap: float = 0.5

    def __post_init__(self) -> None:
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValueError(f"grid must be at least 1x1: {self.n_cols}x{self.n_rows}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0, 1): {self.overlap}")


@dataclass(frozen=True)
class Tile:
    """One placed tile, integer pixel coordinates in the image frame."""

    col: int
    row: int
    origin_x: int
    origin_y: int
    width: int
    height: int

    @property
    def bbox(self) -> BBox:
        return BBox(float(self.origin_x), float(self.origin_y), float(self.width), float(self.height))


def _axis_layout(length: int, count: int, overlap: float) -> tuple[int, list[int]]:
    # extent t = ceil(L / (N - (N-1)*f)); stride t*(1-f); origins rounded
    # to integers and the tail clamped so the last tile ends exactly at L.
    effective = count - (count - 1) * overlap
    extent = math.ceil(length / effective)
    stride = extent * (1.0 - overlap)
    origins = [min(int(math.floor(i * stride + 0.5)), length - extent) for i in range(count)]
    return extent, origins


def plan_tiles(image_width: int, image_height: int, spec: TileGridSpec) -> list[Tile]:
    """Plan the full tile grid for an image.

    Returns exactly n_cols * n_rows tiles in row-major order whose union
    covers every pixel of the image.
    """
    if image_width < spec.n_cols or image_height < spec.n_rows:
        raise ValueError(
            f"image {image_width}x{image_height} smaller than {spec.n_cols}x{spec.n_rows} grid"
        )
    tile_w, xs = _axis_layout(image_width, spec.n_cols, spec.overlap)
    tile_h, ys = _axis_layout(image_height, spec.n_rows, spec.overlap)
    return [
        Tile(col, row, xs[col], ys[row], tile_w, tile_h)
        for row in range(spec.n_rows)
        for col in range(spec.n_cols)
    ]


def crop_tile(image: np.ndarray, tile: Tile) -> np.ndarray:
    """Extract the exact sub-raster covered by a tile."""
    h, w = image.shape[:2]
    if (
        tile.origin_x < 0
        or tile.origin_y < 0
        or tile.origin_x + tile.width > w
        or tile.origin_y + tile.height > h
    ):
        raise ValueError(f"tile {tile} out of bounds for {w}x{h} image")
    return image[
        tile.origin_y : tile.origin_y + tile.height,
        tile.origin_x : tile.origin_x + tile.width,
    ].copy()


def remap_detection(tile: Tile, det: Detection, image_width: int, image_height: int) -> Detection:
    """Translate a tile-frame detection into the image frame.

    Score and class are untouched; the translated box is clipped to the
    image bounds.
    """
    moved = BBox(
        det.bbox.x + tile.origin_x,
        det.bbox.y + tile.origin_y,
        det.bbox.w,
        det.bbox.h,
    )
    return Detection(clip_to(moved, image_width, image_height), det.class_id, det.score)


def assign_gt_to_tile(
    tile: Tile,
    gts: list[GroundTruthBox],
    min_visible_ratio: float = 0.5,
) -> list[GroundTruthBox]:
    """Pick the ground-truth boxes visible enough inside a tile.

    A box qualifies when (intersection area with the tile) / (box area) is
    at least min_visible_ratio (inclusive). Qualifying boxes are clipped to
    the tile and re-expressed in the tile's coordinate frame.
    """
    out: list[GroundTruthBox] = []
    for gt in gts:
        area = gt.bbox.area
        if area <= 0:
            continue
        inter = intersection_area(gt.bbox, tile.bbox)
        if inter <= 0 or inter / area < min_visible_ratio:
            continue
        ix1 = max(gt.bbox.x, float(tile.origin_x))
        iy1 = max(gt.bbox.y, float(tile.origin_y))
        ix2 = min(gt.bbox.x2, float(tile.origin_x + tile.width))
        iy2 = min(gt.bbox.y2, float(tile.origin_y + tile.height))
        local = BBox(ix1 - tile.origin_x, iy1 - tile.origin_y, ix2 - ix1, iy2 - iy1)
        out.append(GroundTruthBox(local, gt.class_id, gt.image_id))
    return out

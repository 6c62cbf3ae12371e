"""Axis-aligned box arithmetic: areas, IoU, clipping, and greedy NMS.

Boxes use a single internal convention everywhere: continuous
(x, y, w, h) with the origin at the top-left corner of the image.
Conversions to center form happen only at format boundaries (data_io).
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous image-frame pixel coordinates."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box extent: w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    """One predicted box with its category and confidence."""

    bbox: BBox
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")
        if self.class_id < 0:
            raise ValueError(f"negative class_id: {self.class_id}")


@dataclass(frozen=True)
class GroundTruthBox:
    """One annotated box, tied to the image it was labeled on."""

    bbox: BBox
    class_id: int
    image_id: str


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.45
    class_aware: bool = True  # suppression only within the same class

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1): {self.iou_threshold}")


def intersection_area(a: BBox, b: BBox) -> float:
    """Area of the overlap region of two boxes (0 when disjoint)."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes.

    Total function: two zero-area boxes give 0 rather than dividing by zero.
    Areas are derived from the same corner arithmetic as the intersection,
    which keeps the result in [0, 1] exactly and iou(a, a) == 1.
    """
    inter = intersection_area(a, b)
    area_a = (a.x2 - a.x) * (a.y2 - a.y)
    area_b = (b.x2 - b.x) * (b.y2 - b.y)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def clip_to(b: BBox, width: float, height: float) -> BBox:
    """Intersect a box with the [0, width] x [0, height] window.

    A box disjoint from the window collapses to a zero-area box on its edge.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"clip window must be positive: {width}x{height}")
    x1 = min(max(b.x, 0.0), width)
    y1 = min(max(b.y, 0.0), height)
    x2 = min(max(b.x2, 0.0), width)
    y2 = min(max(b.y2, 0.0), height)
    return BBox(x1, y1, max(0.0, x2 - x1), max(0.0, y2 - y1))


def nms(dets: list[Detection], cfg: NmsConfig) -> list[Detection]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scored remaining detection and discards
    every remaining detection (same class only, when class_aware) whose IoU
    with it exceeds the threshold. Ties on score break by lower class_id,
    then input order, so the output is fully deterministic. Survivors come
    back ordered by descending score under that same tie-break.
    """
    if not dets:
        return []
    order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].score, dets[i].class_id, i),
    )
    suppressed = [False] * len(dets)
    kept: list[Detection] = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keeper = dets[i]
        kept.append(keeper)
        for j in order[pos + 1 :]:
            if suppressed[j]:
                continue
            other = dets[j]
            if cfg.class_aware and other.class_id != keeper.class_id:
                continue
            if iou(keeper.bbox, other.bbox) > cfg.iou_threshold:
                suppressed[j] = True
    return kept

"""Tiled small-object detection pipeline.

Overlap tiling with an SVM tile filter in front of a pluggable detector,
joint NMS merging of full-image and tile detections, VOC-style mAP
evaluation, dataset tooling, a benchmark harness, and an HTTP service.
"""

__version__ = "0.1.0"

from .geometry import BBox, Detection, GroundTruthBox, NmsConfig, clip_to, iou, nms
from .tiling import Tile, TileGridSpec, assign_gt_to_tile, crop_tile, plan_tiles, remap_detection

__all__ = [
    "BBox",
    "Detection",
    "GroundTruthBox",
    "NmsConfig",
    "Tile",
    "TileGridSpec",
    "__version__",
    "assign_gt_to_tile",
    "clip_to",
    "crop_tile",
    "iou",
    "nms",
    "plan_tiles",
    "remap_detection",
]

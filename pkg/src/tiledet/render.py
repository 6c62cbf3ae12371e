"""Drawing detections onto rasters for the annotated-result endpoint."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .geometry import Detection

#: Per-class border colors, indexed by class_id modulo the palette size.
CLASS_COLORS = (
    (255, 64, 64),
    (64, 200, 64),
    (64, 96, 255),
    (255, 200, 0),
    (200, 64, 255),
    (0, 200, 200),
    (255, 128, 0),
    (128, 128, 128),
)

BORDER = 3


def class_color(class_id: int) -> tuple[int, int, int]:
    return CLASS_COLORS[class_id % len(CLASS_COLORS)]


def draw_detections(
    raster: np.ndarray, detections: list[Detection], categories: list[str]
) -> np.ndarray:
    """Return a copy of the raster with each detection drawn on it.

    Boxes are 3 px rectangles in the class color with pixel-exact edges
    (the border covers pixel rows y..y+h-1 and columns x..x+w-1, drawn
    inward); the "name score%" caption is best-effort text above the box.
    """
    out = raster.copy()
    h, w = out.shape[:2]
    for det in detections:
        x1 = max(0, min(w - 1, int(round(det.bbox.x))))
        y1 = max(0, min(h - 1, int(round(det.bbox.y))))
        x2 = max(x1 + 1, min(w, int(round(det.bbox.x2))))
        y2 = max(y1 + 1, min(h, int(round(det.bbox.y2))))
        color = class_color(det.class_id)
        t = min(BORDER, x2 - x1, y2 - y1)
        out[y1 : y1 + t, x1:x2] = color
        out[y2 - t : y2, x1:x2] = color
        out[y1:y2, x1 : x1 + t] = color
        out[y1:y2, x2 - t : x2] = color

    if detections:
        image = Image.fromarray(out, mode="RGB")
        draw = ImageDraw.Draw(image)
        for det in detections:
            name = (
                categories[det.class_id]
                if det.class_id < len(categories)
                else f"class_{det.class_id}"
            )
            label = f"{name} {100.0 * det.score:.1f}%"
            x = max(0, min(w - 1, int(round(det.bbox.x))))
            y = int(round(det.bbox.y))
            # keep the caption clear of the 3 px border pixels
            ty = y - 13 if y >= 14 else y + BORDER + 1
            draw.text((x + BORDER + 1, ty), label, fill=class_color(det.class_id))
        out = np.asarray(image)
    return out

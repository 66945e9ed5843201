"""Axis-aligned boxes in center/extent form."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extent must be positive, got w={self.w}, h={self.h}")
        if not all(np.isfinite([self.cx, self.cy, self.w, self.h])):
            raise ValueError("box coordinates must be finite")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_tuple(self):
        return (self.cx, self.cy, self.w, self.h)

    @property
    def area(self):
        return self.w * self.h

    def intersects(self, width, height):
        x1, y1, x2, y2 = self.corners()
        return x2 > 0 and y2 > 0 and x1 < width and y1 < height


def iou(a, b):
    """Intersection over union of two boxes."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # corner arithmetic can round a self-overlap just past 1
    return min(float(inter / (a.area + b.area - inter)), 1.0)


def iou_matrix(boxes, box):
    """IoU of each row of ``boxes`` ([M, 4] as cx, cy, w, h) with ``box``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    x1 = boxes[:, 0] - boxes[:, 2] / 2
    y1 = boxes[:, 1] - boxes[:, 3] / 2
    x2 = boxes[:, 0] + boxes[:, 2] / 2
    y2 = boxes[:, 1] + boxes[:, 3] / 2
    bx1, by1, bx2, by2 = box.corners()
    iw = np.clip(np.minimum(x2, bx2) - np.maximum(x1, bx1), 0, None)
    ih = np.clip(np.minimum(y2, by2) - np.maximum(y1, by1), 0, None)
    inter = iw * ih
    return np.minimum(inter / (boxes[:, 2] * boxes[:, 3] + box.area - inter), 1.0)

"""Box geometry in normalized (cx, cy, w, h) form."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Detection:
    box: tuple  # (cx, cy, w, h), normalized to [0, 1]
    class_id: int
    confidence: float

    def __post_init__(self):
        if not (self.box[2] > 0 and self.box[3] > 0):
            raise ValueError(f"detection box needs positive extent, got {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def to_corners(box) -> tuple:
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou(a, b) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def nms(dets: list, iou_threshold: float = 0.5) -> list:
    """Greedy per-class suppression; keeps the higher-confidence box of any pair above the threshold."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept

"""Box arithmetic: overlap, crop padding and union."""

from collections.abc import Sequence

from .errors import EmptyInput
from .models import BoundingBox, ImageRecord


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes."""
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


def pad_box(box: BoundingBox, pad_fraction: float, image: ImageRecord) -> BoundingBox:
    """
    Expand a box by a fraction of its size on every side, clamped to the image.

    A pad of 0 returns the box unchanged; the result always contains the box.
    """
    if pad_fraction <= 0:
        return box
    pad_w = int(box.width * pad_fraction)
    pad_h = int(box.height * pad_fraction)
    return BoundingBox(
        x1=max(0, box.x1 - pad_w),
        y1=max(0, box.y1 - pad_h),
        x2=min(image.width, box.x2 + pad_w),
        y2=min(image.height, box.y2 + pad_h),
    )


def merge_boxes(boxes: Sequence[BoundingBox]) -> BoundingBox:
    """Smallest box containing every input box."""
    if not boxes:
        raise EmptyInput("merge_boxes needs at least one box")
    return BoundingBox(
        x1=min(box.x1 for box in boxes),
        y1=min(box.y1 for box in boxes),
        x2=max(box.x2 for box in boxes),
        y2=max(box.y2 for box in boxes),
    )

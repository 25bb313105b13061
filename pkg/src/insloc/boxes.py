"""Bounding-box geometry, RPN-style anchor grids, and IoU-filtered box
augmentation. Boxes live in continuous pixel coordinates, (x1,y1,x2,y2)
with strictly positive area."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"degenerate box: ({self.x1},{self.y1},{self.x2},{self.y2}) "
                "requires x1 < x2 and y1 < y2"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid: centers every `stride` pixels, one anchor per
    (scale, ratio) pair at each center. Defaults are a scaled-down
    region-proposal grid for 64x64 composites."""

    strides: tuple = (8, 16)
    scales: tuple = (16, 24, 32, 48)
    ratios: tuple = (0.5, 1.0, 2.0)

    def __post_init__(self):
        for name in ("strides", "scales", "ratios"):
            vals = getattr(self, name)
            if not vals or any(v <= 0 for v in vals):
                raise ValueError(f"anchor {name} must be non-empty and positive")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; symmetric, in [0,1]."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def generate_anchors(cfg: AnchorConfig, image_h: int, image_w: int) -> list[BBox]:
    """One anchor per (cell, scale, ratio); width = scale*sqrt(ratio),
    height = scale/sqrt(ratio), ratio being w/h. Anchors may extend past
    the image (clip before using them for augmentation)."""
    if image_h <= 0 or image_w <= 0:
        raise ValueError(f"image dims must be positive, got {image_h}x{image_w}")
    anchors = []
    for stride in cfg.strides:
        ny, nx = image_h // stride, image_w // stride
        for iy in range(ny):
            cy = stride * (iy + 0.5)
            for ix in range(nx):
                cx = stride * (ix + 0.5)
                for scale in cfg.scales:
                    for ratio in cfg.ratios:
                        w = scale * math.sqrt(ratio)
                        h = scale / math.sqrt(ratio)
                        anchors.append(
                            BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
                        )
    return anchors


def clip_bbox(b: BBox, image_h: int, image_w: int) -> BBox:
    """Clamp coordinates to [0,W]x[0,H]; a box entirely outside collapses
    to zero area and raises."""
    x1 = min(max(b.x1, 0.0), float(image_w))
    y1 = min(max(b.y1, 0.0), float(image_h))
    x2 = min(max(b.x2, 0.0), float(image_w))
    y2 = min(max(b.y2, 0.0), float(image_h))
    if x1 >= x2 or y1 >= y2:
        raise ValueError(
            f"clip_bbox: box ({b.x1},{b.y1},{b.x2},{b.y2}) collapses to zero "
            f"area inside {image_w}x{image_h}"
        )
    return BBox(x1, y1, x2, y2)


def clipped_anchor_grid(cfg: AnchorConfig, image_h: int, image_w: int) -> list[BBox]:
    """Anchor grid clipped to image bounds, ready for box augmentation."""
    return [clip_bbox(a, image_h, image_w) for a in generate_anchors(cfg, image_h, image_w)]


def boxes_to_array(boxes: list[BBox]) -> np.ndarray:
    """(N,4) float64 array of (x1,y1,x2,y2) rows."""
    return np.array([(b.x1, b.y1, b.x2, b.y2) for b in boxes], dtype=np.float64)


def iou_with_all(gt: BBox, arr: np.ndarray) -> np.ndarray:
    """IoU of gt against every row of an (N,4) box array."""
    iw = np.minimum(arr[:, 2], gt.x2) - np.maximum(arr[:, 0], gt.x1)
    ih = np.minimum(arr[:, 3], gt.y2) - np.maximum(arr[:, 1], gt.y1)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    areas = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
    return inter / (areas + gt.area - inter)


def _candidate_indices(gt: BBox, anchors: list[BBox], iou_threshold: float,
                       arr: np.ndarray | None = None) -> np.ndarray:
    if arr is None:
        arr = boxes_to_array(anchors)
    return np.nonzero(iou_with_all(gt, arr) > iou_threshold)[0]


def augment_candidates(gt: BBox, anchors: list[BBox], iou_threshold: float) -> list[BBox]:
    """Anchors whose IoU with gt strictly exceeds the threshold."""
    return [anchors[i] for i in _candidate_indices(gt, anchors, iou_threshold)]


def augment_bbox(gt: BBox, anchors: list[BBox], iou_threshold: float,
                 rng: np.random.Generator,
                 anchor_array: np.ndarray | None = None) -> BBox:
    """Uniformly random anchor overlapping gt above the threshold; falls
    back to gt itself when no anchor qualifies. anchor_array is an optional
    precomputed boxes_to_array(anchors)."""
    if not anchors:
        raise ValueError("augment_bbox: anchors must be non-empty")
    idx = _candidate_indices(gt, anchors, iou_threshold, anchor_array)
    if len(idx) == 0:
        return gt
    return anchors[int(idx[int(rng.integers(len(idx)))])]

"""Copy-paste composition: crop-and-resize a foreground view, hard-paste
it onto a distinct background at a random position/scale/aspect, and keep
the pasted extent as the ground-truth box."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import BBox
from .imaging import AugmentParams, Gallery, as_image, augment_view, resize_bilinear


class ComposeError(ValueError):
    pass


@dataclass(frozen=True)
class CompositionParams:
    """Desk-scale defaults: 64x64 composites with foreground shorter sides
    in [16,48] px. Aspect (w/h) is sampled log-uniformly, wider range for
    the single-map (C4) style, narrower for the pyramid (FPN) style."""

    composite_size: int = 64
    fg_scale: tuple = (16.0, 48.0)
    fg_aspect: tuple = (1.0 / 3.0, 3.0)

    def __post_init__(self):
        if self.composite_size < 2:
            raise ValueError("composite_size must be >= 2")
        lo, hi = self.fg_scale
        if not (0 < lo <= hi) or hi > self.composite_size:
            raise ValueError(
                f"fg_scale ({lo},{hi}) must be positive and fit the "
                f"{self.composite_size}px composite"
            )
        alo, ahi = self.fg_aspect
        if not (0 < alo <= ahi):
            raise ValueError(f"fg_aspect ({alo},{ahi}) must be positive")


@dataclass(frozen=True)
class CompositeSample:
    """A composited image plus its foreground box and provenance ids.
    background_id -1 marks "no background" (holistic-baseline views)."""

    image: np.ndarray
    bbox: BBox
    instance_id: int
    background_id: int

    def __post_init__(self):
        h, w = self.image.shape[:2]
        b = self.bbox
        if not (0 <= b.x1 and 0 <= b.y1 and b.x2 <= w and b.y2 <= h):
            raise ValueError(f"bbox {b} leaves {w}x{h} image bounds")
        if self.background_id != -1 and self.background_id == self.instance_id:
            raise ValueError(
                f"background id {self.background_id} must differ from "
                f"instance id {self.instance_id}"
            )


def _fit_background(bg: np.ndarray, size: int) -> np.ndarray:
    """Center-crop to square then resize to the composite size."""
    bg = as_image(bg)
    h, w = bg.shape[:2]
    if h < size or w < size:
        raise ComposeError(f"background {h}x{w} smaller than composite {size}")
    if (h, w) == (size, size):
        return bg
    side = min(h, w)
    y0, x0 = (h - side) // 2, (w - side) // 2
    return resize_bilinear(bg[y0:y0 + side, x0:x0 + side], size, size)


def compose(fg_view: np.ndarray, bg: np.ndarray, params: CompositionParams,
            rng: np.random.Generator) -> tuple[np.ndarray, BBox]:
    """Paste a resized foreground onto the background; returns (image, bbox).

    Pixels outside the box equal the background exactly, pixels inside
    equal the resized foreground exactly (hard paste, no blending).
    """
    size = params.composite_size
    canvas = _fit_background(bg, size).copy()
    aspect = math.exp(rng.uniform(math.log(params.fg_aspect[0]),
                                  math.log(params.fg_aspect[1])))
    scale = rng.uniform(*params.fg_scale)
    short = int(round(scale))
    long_side = min(int(round(short * max(aspect, 1.0 / aspect))), size)
    if aspect >= 1.0:
        w, h = long_side, short
    else:
        w, h = short, long_side
    if not (1 <= w <= size and 1 <= h <= size):
        raise ComposeError(
            f"foreground {w}x{h} from scale {scale:.2f}, aspect {aspect:.3f} "
            f"cannot fit a {size}px composite"
        )
    fg = resize_bilinear(as_image(fg_view), h, w)
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    canvas[y0:y0 + h, x0:x0 + w] = fg
    return canvas, BBox(float(x0), float(y0), float(x0 + w), float(y0 + h))


def make_pair(gallery: Gallery, instance_id: int, aug: AugmentParams,
              params: CompositionParams,
              rng: np.random.Generator) -> tuple[CompositeSample, CompositeSample]:
    """Two independently augmented views of one instance, composited onto
    two mutually distinct backgrounds (both distinct from the instance)."""
    k = len(gallery)
    if k < 3:
        raise ValueError(f"gallery of {k} too small: need instance + 2 backgrounds")
    if not 0 <= instance_id < k:
        raise ValueError(f"instance_id {instance_id} outside gallery of {k}")
    candidates = np.array([i for i in range(k) if i != instance_id])
    bg_q, bg_k = (int(i) for i in rng.choice(candidates, size=2, replace=False))
    samples = []
    for bg_id in (bg_q, bg_k):
        view = augment_view(gallery.images[instance_id], aug, rng)
        image, box = compose(view, gallery.images[bg_id], params, rng)
        samples.append(CompositeSample(image, box, instance_id, bg_id))
    return samples[0], samples[1]

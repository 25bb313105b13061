"""RoIAlign: bilinear region pooling with an exact analytic adjoint.

A box in image coordinates is mapped onto a feature map, split into a
PxP bin grid, and each bin averages s*s bilinear samples of the map.
The map is treated as zero outside its grid, so samples near (or past)
the border interpolate against zero-padded neighbors. Forward is linear
in the feature map and backward is its exact adjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import BBox

# Test hook: added to the forward interpolation weights only, so a nonzero
# value breaks forward/backward adjointness detectably.
_FORWARD_WEIGHT_PERTURBATION = 0.0


@dataclass(frozen=True)
class RoiSpec:
    output_size: int = 7        # P
    sampling: int = 2           # s, sample points per bin axis
    spatial_scale: float = 1.0  # 1/stride of the feature map
    aligned: bool = True        # half-pixel offset

    def __post_init__(self):
        if self.output_size < 1 or self.sampling < 1 or self.spatial_scale <= 0:
            raise ValueError(f"invalid RoiSpec: {self}")


def _sample_axis(lo: float, extent: float, p: int, s: int) -> np.ndarray:
    """Sample coordinates along one axis: s regularly spaced points per bin."""
    k = np.arange(p * s, dtype=np.float64)
    bins = k // s
    subs = k % s
    return lo + (bins + (subs + 0.5) / s) * (extent / p)


def _feature_box(box: BBox, spec: RoiSpec) -> tuple[float, float, float, float]:
    off = 0.5 if spec.aligned else 0.0
    x1 = box.x1 * spec.spatial_scale - off
    y1 = box.y1 * spec.spatial_scale - off
    x2 = box.x2 * spec.spatial_scale - off
    y2 = box.y2 * spec.spatial_scale - off
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise ValueError(
            f"roi_align: box {box} degenerates to {x2 - x1:.4g}x{y2 - y1:.4g} "
            f"at scale {spec.spatial_scale}"
        )
    return x1, y1, x2, y2


def _axis_weights(coords: np.ndarray, n: int, dtype):
    """Bilinear neighbor indices and weights along one axis, zero-padded:
    neighbors outside [0, n-1] get weight 0."""
    lo = np.floor(coords).astype(np.int64)
    w_hi = coords - lo
    w_lo = 1.0 - w_hi
    idx = []
    wts = []
    for base, w in ((lo, w_lo), (lo + 1, w_hi)):
        valid = (base >= 0) & (base < n)
        idx.append(np.where(valid, base, 0))
        wts.append(np.where(valid, w, 0.0).astype(dtype))
    return idx, wts


def _plan(box: BBox, spec: RoiSpec, hf: int, wf: int, dtype):
    """Precompute per-axis sample indices and weights for one box."""
    x1, y1, x2, y2 = _feature_box(box, spec)
    p, s = spec.output_size, spec.sampling
    ys = _sample_axis(y1, y2 - y1, p, s)
    xs = _sample_axis(x1, x2 - x1, p, s)
    yidx, ywts = _axis_weights(ys, hf, dtype)
    xidx, xwts = _axis_weights(xs, wf, dtype)
    return yidx, ywts, xidx, xwts


def roi_align_forward(fmap: np.ndarray, box: BBox, batch_index: int,
                      spec: RoiSpec) -> np.ndarray:
    """Pool one box from fmap (B,C,Hf,Wf) into (C,P,P)."""
    if fmap.ndim != 4:
        raise ValueError(f"roi_align: expected (B,C,Hf,Wf), got {fmap.shape}")
    b, c, hf, wf = fmap.shape
    if not 0 <= batch_index < b:
        raise IndexError(f"roi_align: batch_index {batch_index} out of range [0,{b})")
    yidx, ywts, xidx, xwts = _plan(box, spec, hf, wf, fmap.dtype)
    p, s = spec.output_size, spec.sampling
    fm = fmap[batch_index]
    field = None
    for a in range(2):
        wy = ywts[a] + fmap.dtype.type(_FORWARD_WEIGHT_PERTURBATION)
        for bb in range(2):
            w = wy[:, None] * xwts[bb][None, :]
            term = w * fm[:, yidx[a][:, None], xidx[bb][None, :]]
            field = term if field is None else field + term
    return field.reshape(c, p, s, p, s).mean(axis=(2, 4))


def _scatter_box_grad(grad_fmap: np.ndarray, grad_out: np.ndarray, box: BBox,
                      batch_index: int, spec: RoiSpec) -> None:
    """Accumulate one box's adjoint into grad_fmap (in place)."""
    b, c, hf, wf = grad_fmap.shape
    p, s = spec.output_size, spec.sampling
    if grad_out.shape != (c, p, p):
        raise ValueError(
            f"roi_align backward: grad_out {grad_out.shape} vs expected {(c, p, p)}"
        )
    if not 0 <= batch_index < b:
        raise IndexError(f"roi_align: batch_index {batch_index} out of range [0,{b})")
    yidx, ywts, xidx, xwts = _plan(box, spec, hf, wf, grad_fmap.dtype)
    gsample = np.repeat(np.repeat(grad_out, s, axis=1), s, axis=2) / (s * s)
    gsample = np.ascontiguousarray(
        gsample.reshape(c, -1).T, dtype=grad_fmap.dtype
    )  # (n_samples, C)
    gflat = grad_fmap[batch_index].reshape(c, hf * wf).T  # (Hf*Wf, C) view
    for a in range(2):
        for bb in range(2):
            w = (ywts[a][:, None] * xwts[bb][None, :]).ravel()
            idx = (yidx[a][:, None] * wf + xidx[bb][None, :]).ravel()
            np.add.at(gflat, idx, w[:, None] * gsample)


def roi_align_backward(grad_out: np.ndarray, box: BBox, batch_index: int,
                       spec: RoiSpec, fmap_shape: tuple) -> np.ndarray:
    """Scatter (C,P,P) bin gradients back to a zero (B,C,Hf,Wf) map."""
    grad = np.zeros(fmap_shape, dtype=grad_out.dtype)
    _scatter_box_grad(grad, grad_out, box, batch_index, spec)
    return grad


def roi_align_batch(fmap: np.ndarray, boxes, batch_indices,
                    spec: RoiSpec) -> np.ndarray:
    """Pool a list of boxes; returns (len(boxes),C,P,P)."""
    return np.stack([
        roi_align_forward(fmap, bx, bi, spec)
        for bx, bi in zip(boxes, batch_indices)
    ])


def roi_align_batch_backward(grad_out: np.ndarray, boxes, batch_indices,
                             spec: RoiSpec, fmap_shape: tuple) -> np.ndarray:
    grad = np.zeros(fmap_shape, dtype=grad_out.dtype)
    for g, bx, bi in zip(grad_out, boxes, batch_indices):
        _scatter_box_grad(grad, g, bx, bi, spec)
    return grad


def assign_fpn_level(box: BBox, num_levels: int = 4, l0: int = 1,
                     canonical_size: float = 16.0) -> int:
    """Scale-based pyramid level heuristic (diagnostics only; training
    pools every level concurrently)."""
    level = l0 + math.floor(math.log2(math.sqrt(box.area) / canonical_size))
    return int(min(max(level, 0), num_levels - 1))

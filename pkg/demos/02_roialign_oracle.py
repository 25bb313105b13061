#!/usr/bin/env python3
"""Show that the RoIAlign kernel agrees with an independent dense
bilinear-field oracle and that its backward pass is the exact adjoint.

Run: python demos/02_roialign_oracle.py
"""

import numpy as np

from insloc.boxes import BBox
from insloc.roialign import RoiSpec, roi_align_backward, roi_align_forward
from insloc.selfcheck import roi_align_oracle

rng = np.random.default_rng(7)
fmap = rng.standard_normal((1, 2, 8, 8))
box = BBox(3.1, 2.4, 27.6, 29.0)  # image coords; map is stride 4
spec = RoiSpec(output_size=3, sampling=2, spatial_scale=0.25, aligned=True)

pooled = roi_align_forward(fmap, box, 0, spec)
reference = roi_align_oracle(fmap, box, 0, spec)
print("pooled (channel 0):")
print(np.array2string(pooled[0], precision=4))
print(f"max |kernel - dense oracle| = {np.abs(pooled - reference).max():.2e}")

# Adjointness <F(x), g> == <x, F^T(g)> pins the backward pass to the
# forward pass with no free parameters.
g = rng.standard_normal(pooled.shape)
scattered = roi_align_backward(g, box, 0, spec, fmap.shape)
lhs = float((pooled * g).sum())
rhs = float((fmap * scattered).sum())
print(f"<F(x), g> = {lhs:.10f}")
print(f"<x, Ft(g)> = {rhs:.10f}")
print(f"adjointness gap = {abs(lhs - rhs):.2e}")

# Partition of unity: pooling a constant map returns that constant.
const = np.full_like(fmap, 2.5)
print(f"constant-map pooling error = "
      f"{np.abs(roi_align_forward(const, box, 0, spec) - 2.5).max():.2e}")

#!/usr/bin/env python3
"""Walk through the data side of the pretext task: generate the procedural
instance gallery, augment a view, copy-paste it onto a distinct background,
and dump inspectable PPM files.

Run: python demos/01_gallery_and_composition.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from insloc.composition import CompositionParams, make_pair
from insloc.imaging import AugmentParams, generate_gallery, write_ppm
from insloc.rng import substream

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/composition")
out.mkdir(parents=True, exist_ok=True)

# A deterministic, procedurally textured stand-in for a photo collection.
gallery = generate_gallery(k=16, size=64, seed=42)
print(f"gallery: {len(gallery)} instances of {gallery.images.shape[1]}px")
for i in range(4):
    write_ppm(gallery.images[i], out / f"instance_{i}.ppm")

# Two views of instance 3, each pasted onto its own background. The key
# point: the two backgrounds differ from each other and from the instance,
# so the only shared content is the foreground.
aug = AugmentParams()
comp = CompositionParams(composite_size=64)
rng = substream(42, "demo-pair")
query, key = make_pair(gallery, instance_id=3, aug=aug, params=comp, rng=rng)

for name, s in (("query", query), ("key", key)):
    write_ppm(s.image, out / f"{name}.ppm")
    b = s.bbox
    print(f"{name}: instance {s.instance_id} on background {s.background_id}, "
          f"box ({b.x1:.0f},{b.y1:.0f},{b.x2:.0f},{b.y2:.0f})")
    # hard paste: everything outside the box is exactly the background
    mask = np.ones((64, 64), dtype=bool)
    mask[int(b.y1):int(b.y2), int(b.x1):int(b.x2)] = False
    bg = gallery.images[s.background_id]
    print(f"  pixels outside box differing from background: "
          f"{int((np.abs(s.image - bg)[mask] > 0).sum())}")

print(f"wrote PPMs to {out}/")

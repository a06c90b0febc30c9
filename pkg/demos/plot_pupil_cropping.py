"""
Finding the pupil and cropping around it
========================================

Near-eye frames are mostly skin and sclera.  The cropper binarises the
darkest class of pixels, cleans it with a morphological opening, keeps the
largest blob and checks it is round enough to be a pupil.  A 450x200 window
is then cut around the blob's centroid.  Between frames, a cheap event test
decides whether the previous window can be reused.
"""

import numpy as np

from fovtrack.cropper import CropSession, dark_class_threshold, find_pupil, locate_and_crop, roundness
from fovtrack.synth import SceneParams, generate

items = generate(SceneParams(seed=7, eye_center_jitter=(60.0, 40.0)), 6)

for it in items:
    thr = dark_class_threshold(it.frame)
    cc = find_pupil(it.frame)
    win = locate_and_crop(it.frame)
    cx, cy = cc.centroid
    tx, ty = it.pupil_center
    print(f"{it.name}: threshold {thr:3d}, blob area {cc.area:5d}, roundness {roundness(cc):.3f}, "
          f"centroid error {np.hypot(cx - tx, cy - ty):.2f} px, window x0={win.x0} y0={win.y0}")

# %%
# A still eye lets the session reuse its window; a saccade forces a recompute.
print()
base = items[0].frame.astype(np.float64)
noise = np.random.default_rng(1)
still = [np.clip(base + noise.normal(0, 2.0, base.shape), 0, 255).astype(np.uint8) for _ in range(4)]
moving = [it.frame for it in items[1:3]]
session = CropSession()
for frame in still + moving:
    decision, win = session.step(frame)
    print(f"{decision.value:>9}  window {None if win is None else (win.x0, win.y0)}")

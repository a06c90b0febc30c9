"""
How tracking error turns into rendering latency
===============================================

A foveated renderer draws a disc of full resolution around the gaze point.
If the tracker can be off by some angle, the disc has to grow by that angle
to keep the true fovea covered, and a bigger disc costs rendering time.
This script walks through that chain and ends with the depth choice that
minimises the end-to-end latency at each display resolution.
"""

import numpy as np

from fovtrack.geometry import FovealGeometry, bundled_profile, foveal_radius
from fovtrack.selector import SelectionQuery, bundled_depth_profile, render_latency_for_depth, select

# A 5 degree fovea seen from one unit away, measured in display pixels.
geom = FovealGeometry(theta_i=5.0, d=1.0, rho=1000.0)
for err in (0.0, 1.0, 2.0, 4.0, 8.0):
    region = foveal_radius(geom, err)
    print(f"tracking error {err:4.1f} deg -> foveal radius {region.r_f:6.1f} px (+{region.c:5.1f})")

# %%
# The bundled latency curves map the inflated angle to milliseconds.  They are
# clamped below the first knot and extend the last slope beyond the last one.
print()
for res in ("720P", "1080P", "1440P"):
    prof = bundled_profile(res)
    row = "  ".join(f"{t:5.2f}" for t in prof(np.array([5.0, 7.0, 9.0, 12.0])))
    print(f"{res:>6}: latency at 5/7/9/12 deg = {row} ms")

# %%
# Deeper gaze models are slower but tighter.  Each depth trades its own
# tracking time against the rendering time implied by its P95 error.
print()
depths = bundled_depth_profile()
for res in ("720P", "1080P", "1440P"):
    q = SelectionQuery.bundled(res)
    costs = ", ".join(f"d{e.depth}={e.t_tracking_ms + render_latency_for_depth(e, q):.2f}" for e in depths)
    best = select(depths, q)
    print(f"{res:>6}: {costs}")
    print(f"        chosen depth {best.depth}, total {best.t_total_ms:.2f} ms")

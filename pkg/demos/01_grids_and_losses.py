# coding: utf-8

# # Grids, camera frames and the two losses
#
# A walk through the core data types. We build an occupancy grid, look at it
# from a ring of cameras, and score predictions with the per-view 3D loss and
# the cross-view consistency loss.

import numpy as np

from mvcvox.dataset import generate_scene, ground_truth_grids, make_rig
from mvcvox.geometry import relative_transform, resample
from mvcvox.losses import LossConfig, combined, l3d, lmvc


# ## A scene seen by six cameras
#
# `make_rig(6)` places cameras every 60 degrees around the vertical axis.
# Each ground-truth grid lives in its own camera frame: x right, y up, z away
# from the camera.

rig = make_rig(6)
spec = generate_scene(seed=21, rig=rig)
grids = ground_truth_grids(spec, res=32)
print("parts:", len(spec.parts))
print("occupied fraction per view:", [round(float(g.values.mean()), 4) for g in grids])


# The fraction is the same in every view, as it should be: these are the same
# body in different frames. Moving view 0's grid into view 1's frame gets us
# close to view 1's own grid. Trilinear resampling at 60 degrees blurs the
# boundary a little.

moved = resample(grids[0], relative_transform(rig.poses[0], rig.poses[1]))
print("mean |moved - view1|:", float(np.abs(moved.values - grids[1].values).mean()))


# ## The 3D loss
#
# Weighted binary cross entropy per grid, summed over stacks and views.
# `gamma` weights the occupied class; left at `None` it is the fraction of
# empty voxels.

gt = np.stack([g.values for g in grids])
pred = np.clip(gt + np.random.default_rng(0).normal(0, 0.2, gt.shape), 0.02, 0.98)[None]
print("l3d, balanced:", l3d(pred, gt)[0])
print("l3d, gamma 0.5:", l3d(pred, gt, LossConfig(gamma=0.5))[0])


# ## The consistency loss
#
# For every ordered pair of views the second grid is resampled into the
# first one's frame and the squared difference is averaged over voxels that
# stay inside the cube. An opposite pair is an exact voxel permutation, so
# the true grids are perfectly consistent there.

two = make_rig(2)
pair = ground_truth_grids(generate_scene(seed=21, rig=two), 32)
print("lmvc of exact grids, 2 views:", lmvc(np.stack([g.values for g in pair])[None], two)[0])
print("lmvc of exact grids, 6 views:", lmvc(gt[None], rig)[0])


# At 60 degree steps even the exact grids pay a small price, the interpolation
# blur from above. Shrinking predictions towards 0.5 lowers that price, which
# is worth keeping in mind when weighting the term.

for shrink in (1.0, 0.8, 0.6):
    soft = 0.5 + (gt - 0.5) * shrink
    print(f"shrink {shrink}: lmvc {lmvc(soft[None], rig)[0]:.4f}")


# ## Both together
#
# `combined` returns the total `l3d + lambda * lmvc` and the gradient with
# respect to every predicted voxel.

lv = combined(pred, gt, rig, LossConfig(gamma=0.5))
print(f"total {lv.total:.4f} = l3d {lv.l3d:.4f} + 0.2 * lmvc {lv.lmvc:.4f}")
print("gradient shape:", lv.grad.shape)

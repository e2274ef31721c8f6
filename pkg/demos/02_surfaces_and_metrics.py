# coding: utf-8

# # From grids to meshes and back
#
# Marching cubes turns an occupancy grid into a closed triangle mesh.
# Voxelizing the mesh again should give back nearly the same grid. The
# metrics module then compares shapes by IoU and Chamfer distance.

import tempfile
from pathlib import Path

import numpy as np

from mvcvox import fileio
from mvcvox.dataset import generate_scene, ground_truth_grids, make_rig, render_views
from mvcvox.geometry import VoxelGrid
from mvcvox.metrics import evaluate, iou3d
from mvcvox.surface import marching_cubes, voxelize


spec = generate_scene(seed=5, rig=make_rig(1))
grid = ground_truth_grids(spec, 32)[0]
mesh = marching_cubes(grid)
print("triangles:", mesh.n_triangles, "closed:", mesh.is_closed())
print("enclosed volume:", round(mesh.signed_volume(), 4), "voxel volume:", round(grid.values.mean() * 8, 4))


# The round trip keeps the shape.

back = voxelize(mesh, 32, frame=grid.frame)
print("IoU after voxelize(marching_cubes(grid)):", round(iou3d(grid, back), 4))


# ## What the camera sees
#
# Orthographic silhouettes and depth, one image row per voxel row. The
# silhouette is the shadow of the grid along z.

sil, depth = render_views(spec, 64)
shadow = grid.values.max(axis=0)
print("silhouette pixels:", int(sil[0].sum()), "shadow voxels x4:", int(shadow.sum() * 4))
print("depth range:", float(depth[0][depth[0] > 0].min()), float(depth[0].max()))


# ## Comparing shapes
#
# A dilated copy of the grid scores lower IoU and a positive Chamfer distance.
# Per-vertex errors can be written to a PLY quality channel for viewing.

from scipy.ndimage import binary_dilation

fat = VoxelGrid(binary_dilation(grid.values > 0.5).astype(float), grid.extent, grid.frame)
report = evaluate(fat, grid, n=5000, per_vertex=True)
print(f"IoU {report.iou:.4f}  Chamfer {report.chamfer:.4f}")

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / "errors.ply"
    fileio.write_ply(out, marching_cubes(fat), report.per_vertex_error)
    _, quality = fileio.read_ply(out)
    print("max per-vertex error:", float(np.max(quality)))

"""Multi-view consistent voxel reconstruction at desk scale.

Voxel grids and rigid view frames (:mod:`.geometry`), surface extraction
(:mod:`.surface`), the occupancy and consistency losses (:mod:`.losses`),
evaluation metrics (:mod:`.metrics`), a procedural multi-view dataset
(:mod:`.dataset`), a small numpy predictor with its trainer (:mod:`.model`)
and the view-count ablation (:mod:`.ablation`).
"""

from .geometry import (CameraPose, CameraRig, TriangleMesh, VoxelGrid, look_at, relative_transform, resample,
                       resample_with_mask)
from .losses import LossConfig, LossValue, combined, l3d, lmvc
from .metrics import MetricReport, chamfer, iou3d, mesh_to_points, per_vertex_chamfer
from .surface import NonWatertightError, marching_cubes, voxelize

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "CameraRig", "TriangleMesh", "VoxelGrid", "look_at", "relative_transform", "resample",
    "resample_with_mask", "LossConfig", "LossValue", "combined", "l3d", "lmvc", "MetricReport", "chamfer",
    "iou3d", "mesh_to_points", "per_vertex_chamfer", "NonWatertightError", "marching_cubes", "voxelize",
]

"""Voxel grids, camera frames and rigid resampling.

Conventions used throughout the package:

* A grid of resolution ``R`` covers the cube ``[-extent, extent]^3`` centred on
  the origin of its frame.  Voxel ``i`` along an axis has its centre at
  ``((i + 0.5) / R * 2 - 1) * extent``.
* ``VoxelGrid.values`` is a C-ordered array indexed ``[z, y, x]`` so that the
  flat offset of voxel ``(x, y, z)`` is ``x + R * (y + R * z)``.
* A view frame has ``x`` to the right, ``y`` up and ``z`` pointing away from
  the camera.  Frames are subject-centred: the origin is the subject, not the
  camera centre.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

ORTHO_TOL = 1e-9
_SNAP_TOL = 1e-9


def voxel_centers(res: int, extent: float = 1.0) -> np.ndarray:
    """1D coordinates of voxel centres along one axis."""
    return ((np.arange(res) + 0.5) / res * 2.0 - 1.0) * extent


def _readonly(a: np.ndarray) -> np.ndarray:
    a = a.view()
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class VoxelGrid:
    values: np.ndarray
    extent: float = 1.0
    frame: str = "world"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or not (v.shape[0] == v.shape[1] == v.shape[2]):
            raise ValueError(f"grid must be cubic, got shape {v.shape}")
        if v.shape[0] < 2:
            raise ValueError("grid resolution must be >= 2")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        if v.size and (np.isnan(v).any() or v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("grid values must lie in [0, 1]")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        object.__setattr__(self, "values", _readonly(v))
        object.__setattr__(self, "extent", float(self.extent))

    @property
    def res(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / self.res

    def flat(self) -> np.ndarray:
        """Values in the documented linear order ``x + R*(y + R*z)``."""
        return self.values.reshape(-1)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Rigid map ``X -> R @ X + T`` from world coordinates into a view frame."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have det +1")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "CameraPose":
        rt = self.rotation.T
        return CameraPose(rt, -rt @ self.translation)

    def compose(self, first: "CameraPose") -> "CameraPose":
        """``self ∘ first``: apply ``first``, then ``self``."""
        return CameraPose(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
        )

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CameraRig:
    poses: tuple
    azimuths: np.ndarray
    radius: float = 2.5
    elevation: float = 0.0

    def __post_init__(self):
        az = np.asarray(self.azimuths, dtype=np.float64).reshape(-1)
        poses = tuple(self.poses)
        if len(poses) != az.size or az.size < 1:
            raise ValueError("rig needs one azimuth per pose")
        if az[0] < 0 or az[-1] >= 2 * np.pi:
            raise ValueError("azimuths must lie in [0, 2pi)")
        if az.size > 1:
            gaps = np.diff(az)
            if (gaps <= 0).any():
                raise ValueError("azimuths must be strictly increasing")
            if np.abs(gaps - gaps[0]).max() > 1e-9:
                raise ValueError("rig is not equidistant")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "azimuths", _readonly(az))

    def __len__(self) -> int:
        return len(self.poses)

    def __eq__(self, other):
        if not isinstance(other, CameraRig):
            return NotImplemented
        return (self.poses == other.poses and np.array_equal(self.azimuths, other.azimuths)
                and (self.radius, self.elevation) == (other.radius, other.elevation))

    __hash__ = None

    def subset(self, n_views: int) -> "CameraRig":
        """Equidistant sub-rig taking every ``len(self) // n_views``-th camera."""
        if n_views < 1 or len(self) % n_views:
            raise ValueError(f"cannot take {n_views} equidistant views of a {len(self)}-view rig")
        step = len(self) // n_views
        return CameraRig(self.poses[::step], self.azimuths[::step], self.radius, self.elevation)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("triangle index out of range")
            if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
                raise ValueError("triangle repeats a vertex index")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "triangles", _readonly(f))

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edge_counts(self) -> dict:
        """Number of triangles using each undirected edge."""
        f = self.triangles
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(k): int(c) for k, c in zip(keys, counts)}

    def is_closed(self) -> bool:
        if self.is_empty():
            return False
        return all(c == 2 for c in self.edge_counts().values())


def look_at(azimuth: float, elevation: float = 0.0) -> CameraPose:
    """Subject-centred view frame of a camera orbiting the origin.

    At azimuth 0 and elevation 0 the camera sits on the -z axis looking
    along +z, so the view frame coincides with the world frame.
    """
    ce, se = np.cos(elevation), np.sin(elevation)
    position = np.array([ce * np.sin(azimuth), se, -ce * np.cos(azimuth)])
    forward = -position
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, forward)
    x /= np.linalg.norm(x)
    y = np.cross(forward, x)
    return CameraPose(np.stack([x, y, forward]), np.zeros(3))


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def relative_transform(src: CameraPose, dst: CameraPose) -> CameraPose:
    """Map taking coordinates in ``src``'s frame to ``dst``'s frame."""
    return dst.compose(src.inverse())


def _continuous_index(p: np.ndarray, res: int, extent: float) -> np.ndarray:
    u = (p / extent + 1.0) * 0.5 * res - 0.5
    r = np.round(u)
    return np.where(np.abs(u - r) < _SNAP_TOL, r, u)


@lru_cache(maxsize=256)
def _operator_cached(res, extent, rot_bytes, trans_bytes):
    rot = np.frombuffer(rot_bytes).reshape(3, 3)
    trans = np.frombuffer(trans_bytes)
    c = voxel_centers(res, extent)
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    dst = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    # inverse map: destination voxel centre -> source coordinates
    src = (dst - trans) @ rot
    mask = (np.abs(src) <= extent * (1.0 + 1e-12)).all(axis=1)

    u = _continuous_index(src, res, extent)
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    rows, cols, vals = [], [], []
    n = res ** 3
    out_idx = np.arange(n)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                w = (
                    (f[:, 0] if dx else 1.0 - f[:, 0])
                    * (f[:, 1] if dy else 1.0 - f[:, 1])
                    * (f[:, 2] if dz else 1.0 - f[:, 2])
                )
                ok = (
                    mask
                    & (w != 0.0)
                    & (ix >= 0) & (ix < res)
                    & (iy >= 0) & (iy < res)
                    & (iz >= 0) & (iz < res)
                )
                rows.append(out_idx[ok])
                cols.append((ix + res * (iy + res * iz))[ok])
                vals.append(w[ok])
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    mat.sum_duplicates()
    mat.sort_indices()
    mask.flags.writeable = False
    return mat, mask


def resample_operator(res: int, extent: float, xform: CameraPose):
    """Sparse trilinear resampling matrix and in-bounds mask for ``xform``.

    Row ``o`` of the matrix holds the trilinear weights that evaluate the
    source grid at ``xform^-1`` of output voxel centre ``o``; out-of-cube
    samples get an empty row (zero padding) and ``mask[o] = False``.
    Coordinates within 1e-9 voxels of a lattice point are snapped onto it,
    which makes axis-permuting rotations exact.
    """
    rot = np.ascontiguousarray(xform.rotation, dtype=np.float64)
    trans = np.ascontiguousarray(xform.translation, dtype=np.float64)
    return _operator_cached(int(res), float(extent), rot.tobytes(), trans.tobytes())


def inbounds_mask(res: int, extent: float, xform: CameraPose) -> np.ndarray:
    return resample_operator(res, extent, xform)[1].reshape(res, res, res)


def resample(grid: VoxelGrid, xform: CameraPose, frame: str | None = None) -> VoxelGrid:
    """Express ``grid`` in the frame reached by ``xform`` (trilinear, zero padded)."""
    if xform.is_identity():
        return VoxelGrid(grid.values.copy(), grid.extent, frame or grid.frame)
    mat, _ = resample_operator(grid.res, grid.extent, xform)
    out = mat @ grid.flat().astype(np.float64)
    out = np.clip(out, 0.0, 1.0).reshape(grid.values.shape)
    return VoxelGrid(out, grid.extent, frame or grid.frame)


def resample_with_mask(grid: VoxelGrid, xform: CameraPose, frame: str | None = None):
    return resample(grid, xform, frame), inbounds_mask(grid.res, grid.extent, xform)


def poses_of(rig) -> Sequence[CameraPose]:
    """Accept a ``CameraRig`` or any sequence of poses (e.g. a permuted rig)."""
    return rig.poses if isinstance(rig, CameraRig) else tuple(rig)

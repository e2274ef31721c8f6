"""Procedural multi-view dataset: articulated part bodies, a circular camera
rig, orthographic silhouettes/depth and per-view ground-truth grids.

Images are indexed ``[y, x]`` with row 0 at the bottom (``y = -extent``), so
pixel columns line up with the voxel columns of the view-frame grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fileio
from .geometry import CameraRig, VoxelGrid, look_at, relative_transform, resample_operator, rotation_y, voxel_centers

MANIFEST_VERSION = 1
MARGIN_RADIUS = 0.9  # bounding-sphere radius of a body, as a fraction of extent
CONSISTENCY_TOL = 0.05


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Part:
    """A capsule (``radii = (radius, half_length)``) or an ellipsoid
    (``radii = (a, b, c)`` along ``axis`` and two derived perpendiculars)."""

    kind: str
    center: tuple
    axis: tuple
    radii: tuple

    def frame(self) -> np.ndarray:
        """Rows: ``axis`` and two fixed perpendicular unit vectors."""
        a = np.asarray(self.axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        b = np.cross(a, helper)
        b /= np.linalg.norm(b)
        return np.stack([a, b, np.cross(a, b)])

    def bound(self) -> float:
        """Radius of a ball around the origin containing the part."""
        c = np.asarray(self.center)
        if self.kind == "capsule":
            r, h = self.radii
            a = np.asarray(self.axis) * h
            return max(np.linalg.norm(c + a), np.linalg.norm(c - a)) + r
        return float(np.linalg.norm(c) + max(self.radii))

    def moved(self, rot: np.ndarray, shift=np.zeros(3), scale: float = 1.0) -> "Part":
        c = (rot @ np.asarray(self.center) + shift) * scale
        return Part(self.kind, tuple(c.tolist()), tuple((rot @ np.asarray(self.axis)).tolist()),
                    tuple((np.asarray(self.radii) * scale).tolist()))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        if self.kind == "capsule":
            r, h = self.radii
            a = np.asarray(self.axis)
            d = pts - c
            s = np.clip(d @ a, -h, h)
            q = d - s[..., None] * a
            return (q * q).sum(-1) <= r * r
        loc = (pts - c) @ self.frame().T / np.asarray(self.radii)
        return (loc * loc).sum(-1) <= 1.0

    def first_hit(self, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """Ray parameter of the first entry point, ``inf`` where missed."""
        c = np.asarray(self.center)
        if self.kind == "capsule":
            r, h = self.radii
            a = np.asarray(self.axis)
            t = np.minimum(_sphere_hit(origin, direction, c + h * a, r),
                           _sphere_hit(origin, direction, c - h * a, r))
            # lateral surface of the infinite cylinder, kept within the segment
            oc = origin - c
            da = float(direction @ a)
            dp = direction - da * a
            op = oc - (oc @ a)[..., None] * a
            qa = float(dp @ dp)
            if qa < 1e-15:
                return t
            qb = 2.0 * (op @ dp)
            qc = (op * op).sum(-1) - r * r
            disc = qb * qb - 4.0 * qa * qc
            ok = disc >= 0
            tc = (-qb - np.sqrt(np.where(ok, disc, 0.0))) / (2.0 * qa)
            s = oc @ a + tc * da
            tc = np.where(ok & (np.abs(s) <= h), tc, np.inf)
            return np.minimum(t, tc)
        fr = self.frame()
        inv = 1.0 / np.asarray(self.radii)
        o = ((origin - c) @ fr.T) * inv
        d = (direction @ fr.T) * inv
        return _sphere_hit(o, d, np.zeros(3), 1.0)


def _sphere_hit(o, d, c, r):
    oc = o - c
    qa = (d * d).sum(-1)
    qb = 2.0 * (oc * d).sum(-1)
    qc = (oc * oc).sum(-1) - r * r
    disc = qb * qb - 4.0 * qa * qc
    ok = disc >= 0
    return np.where(ok, (-qb - np.sqrt(np.where(ok, disc, 0.0))) / (2.0 * qa), np.inf)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    parts: tuple
    rig: CameraRig
    extent: float = 1.0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        inside = np.zeros(pts.shape[:-1], dtype=bool)
        for p in self.parts:
            inside |= p.contains(pts)
        return inside


@dataclass
class SceneSample:
    """One training item: per-view images and ground truth in view frames."""

    spec: SceneSpec
    silhouettes: np.ndarray  # (N, H, W) in {0, 1}
    gt_occ: np.ndarray  # (N, R, R, R) uint8
    depths: Optional[np.ndarray] = None  # (N, H, W), 16-bit quantized, 0 = background

    @property
    def n_views(self) -> int:
        return len(self.silhouettes)

    @property
    def gt(self) -> list:
        return [VoxelGrid(g.astype(np.float32), self.spec.extent, f"view{k}") for k, g in enumerate(self.gt_occ)]

    @property
    def rig(self) -> CameraRig:
        return self.spec.rig

    def images(self, channels: Sequence[str] = ("silhouette",)) -> np.ndarray:
        """Model input of shape ``(N, C, H, W)``."""
        chans = []
        for ch in channels:
            if ch == "silhouette":
                chans.append(self.silhouettes)
            elif ch == "depth":
                if self.depths is None:
                    raise DatasetError("sample has no depth channel")
                chans.append(self.depths)
            else:
                raise ValueError(f"unknown channel {ch!r}")
        return np.stack(chans, axis=1).astype(np.float32)

    def views(self, n_views: int) -> "SceneSample":
        """Equidistant subset of the views."""
        if n_views == self.n_views:
            return self
        rig = self.rig.subset(n_views)
        step = self.n_views // n_views
        spec = SceneSpec(self.spec.seed, self.spec.parts, rig, self.spec.extent)
        d = None if self.depths is None else self.depths[::step]
        return SceneSample(spec, self.silhouettes[::step], self.gt_occ[::step], d)


def make_rig(n_views: int, radius: float = 2.5, elevation: float = 0.0) -> CameraRig:
    """``n_views`` cameras at azimuths ``2*pi*k/n_views``, all aimed at the origin."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    az = 2.0 * np.pi * np.arange(n_views) / n_views
    return CameraRig(tuple(look_at(a, elevation) for a in az), az, radius, elevation)


def _unit(v):
    return v / np.linalg.norm(v)


def generate_scene(seed: int, n_parts_range=(3, 6), rig: Optional[CameraRig] = None,
                   kind: str = "body", extent: float = 1.0) -> SceneSpec:
    """Random connected articulated body, deterministic in ``seed``.

    The first part is a torso capsule; each further part hangs off an end
    of an earlier capsule, so the union stays connected.  ``kind="sphere"``
    draws a single centred ball instead.  The body is given a random yaw,
    recentred and, if needed, shrunk so that it fits in a ball of radius
    ``0.9 * extent``; it then fits the cube in every view frame.
    """
    lo, hi = n_parts_range
    if lo < 1 or hi < lo:
        raise ValueError("invalid n_parts_range")
    rig = rig if rig is not None else make_rig(6)
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        r = rng.uniform(0.35, 0.75) * extent
        return SceneSpec(int(seed), (Part("ellipsoid", (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (r, r, r)),), rig, extent)
    if kind != "body":
        raise ValueError(f"unknown scene kind {kind!r}")

    n = int(rng.integers(lo, hi + 1))
    tilt = rng.normal(0.0, 0.25, size=3)
    axis = _unit(np.array([0.0, 1.0, 0.0]) + tilt * np.array([1.0, 0.0, 1.0]))
    parts = [Part("capsule", (0.0, 0.0, 0.0), tuple(axis), (rng.uniform(0.17, 0.26), rng.uniform(0.2, 0.35)))]
    ends = [np.array(axis) * parts[0].radii[1], -np.array(axis) * parts[0].radii[1]]
    for _ in range(n - 1):
        joint = ends[int(rng.integers(len(ends)))]
        direction = _unit(rng.normal(size=3))
        if rng.random() < 0.2:
            r = rng.uniform(0.13, 0.19)
            radii = (r * rng.uniform(1.0, 1.3), r, r * rng.uniform(0.8, 1.0))
            center = joint + direction * radii[0] * 0.8
            parts.append(Part("ellipsoid", tuple(center), tuple(direction), radii))
        else:
            r, h = rng.uniform(0.08, 0.14), rng.uniform(0.12, 0.26)
            center = joint + direction * h
            parts.append(Part("capsule", tuple(center), tuple(direction), (r, h)))
            ends.append(center + direction * h)

    yaw = rotation_y(rng.uniform(0.0, 2.0 * np.pi))
    parts = [p.moved(yaw) for p in parts]
    lo_box = np.min([np.asarray(p.center) - _half_size(p) for p in parts], axis=0)
    hi_box = np.max([np.asarray(p.center) + _half_size(p) for p in parts], axis=0)
    shift = -(lo_box + hi_box) / 2.0
    parts = [p.moved(np.eye(3), shift) for p in parts]
    bound = max(p.bound() for p in parts)
    scale = min(1.0, MARGIN_RADIUS * extent / bound)
    # fixed final scale so the stored parts are exactly what was checked
    parts = [p.moved(np.eye(3), np.zeros(3), scale * (1.0 - 1e-9)) for p in parts]
    return SceneSpec(int(seed), tuple(parts), rig, extent)


def _half_size(p: Part) -> np.ndarray:
    if p.kind == "capsule":
        r, h = p.radii
        return np.abs(np.asarray(p.axis)) * h + r
    return np.full(3, max(p.radii))


def scene_bound(spec: SceneSpec) -> float:
    return max((p.bound() for p in spec.parts), default=0.0)


def _view_parts(spec: SceneSpec, k: int):
    pose = spec.rig.poses[k]
    return [p.moved(pose.rotation, pose.translation) for p in spec.parts]


def render_views(spec: SceneSpec, res_img: int = 64):
    """Orthographic silhouettes and normalized depth, one per camera.

    Rays run along +z of each view frame through pixel centres.  Depth is
    ``(extent - z_hit) / (2 * extent)`` (nearer is brighter, background 0),
    quantized to 16 bits so it survives a PGM round trip unchanged.
    Returns ``(silhouettes, depths)`` of shape ``(N, res_img, res_img)``.
    """
    if res_img < 16:
        raise ValueError("res_img must be >= 16")
    e = spec.extent
    c = voxel_centers(res_img, e)
    y, x = np.meshgrid(c, c, indexing="ij")
    origin = np.stack([x, y, np.full_like(x, -2.0 * e)], axis=-1)
    direction = np.array([0.0, 0.0, 1.0])
    n = len(spec.rig)
    sil = np.zeros((n, res_img, res_img))
    depth = np.zeros((n, res_img, res_img))
    for k in range(n):
        t = np.full(x.shape, np.inf)
        for p in _view_parts(spec, k):
            t = np.minimum(t, p.first_hit(origin, direction))
        hit = np.isfinite(t)
        z = origin[..., 2] + t
        d = np.where(hit, (e - z) / (2.0 * e), 0.0)
        d = np.rint(np.clip(d, 0.0, 1.0) * 65535) / 65535
        depth[k] = d
        sil[k] = d > 0
    return sil, depth


def ground_truth_grids(spec: SceneSpec, res: int = 32) -> list:
    """Occupancy of the part union at voxel centres of each view frame."""
    return [VoxelGrid(g.astype(np.float64), spec.extent, f"view{k}")
            for k, g in enumerate(_gt_occupancy(spec, res))]


def _gt_occupancy(spec: SceneSpec, res: int) -> np.ndarray:
    if res < 8:
        raise ValueError("res must be >= 8")
    c = voxel_centers(res, spec.extent)
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([x, y, z], axis=-1)
    out = np.zeros((len(spec.rig), res, res, res), dtype=np.uint8)
    for k, pose in enumerate(spec.rig.poses):
        world = (pts - pose.translation) @ pose.rotation  # R^T (p - T)
        out[k] = spec.contains(world)
    return out


def consistency_error(occ: np.ndarray, rig: CameraRig, extent: float = 1.0) -> float:
    """Worst mean abs difference between view ``k``'s grid and view 0's grid
    resampled into frame ``k`` (over in-bounds voxels)."""
    res = occ.shape[-1]
    ref = occ[0].reshape(-1).astype(np.float64)
    worst = 0.0
    for k in range(1, len(occ)):
        mat, mask = resample_operator(res, extent, relative_transform(rig.poses[0], rig.poses[k]))
        moved = mat @ ref
        diff = np.abs(moved - occ[k].reshape(-1))[mask]
        worst = max(worst, float(diff.mean()) if diff.size else 0.0)
    return worst


def make_sample(spec: SceneSpec, res: int = 32, res_img: int = 64, check: bool = True) -> SceneSample:
    sil, depth = render_views(spec, res_img)
    occ = _gt_occupancy(spec, res)
    if check and len(occ) > 1:
        err = consistency_error(occ, spec.rig, spec.extent)
        if err > CONSISTENCY_TOL:
            raise DatasetError(f"scene {spec.seed}: cross-view ground truth inconsistent ({err:.3f})")
    return SceneSample(spec, sil, occ, depth)


def scene_seeds(seed: int, n: int) -> list:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)]


@dataclass
class DatasetConfig:
    scenes: int = 240
    test_scenes: int = 40
    views: int = 6
    res: int = 32
    img: int = 64
    seed: int = 0
    n_parts_range: tuple = (3, 6)
    kind: str = "body"
    radius: float = 2.5
    elevation: float = 0.0
    extent: float = 1.0
    depth: bool = False

    def rig(self) -> CameraRig:
        return make_rig(self.views, self.radius, self.elevation)

    def specs(self) -> list:
        rig = self.rig()
        return [generate_scene(s, tuple(self.n_parts_range), rig, self.kind, self.extent)
                for s in scene_seeds(self.seed, self.scenes)]

    def split(self, index: int) -> str:
        return "test" if index >= self.scenes - self.test_scenes else "train"


@dataclass
class Dataset:
    config: DatasetConfig
    samples: list
    splits: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [s for s, sp in zip(self.samples, self.splits) if sp == name]


def generate_dataset(cfg: DatasetConfig) -> Dataset:
    if cfg.views < 1:
        raise ValueError("views must be >= 1")
    if not 0 <= cfg.test_scenes <= cfg.scenes:
        raise ValueError("test_scenes must lie in [0, scenes]")
    samples = [make_sample(s, cfg.res, cfg.img) for s in cfg.specs()]
    if not cfg.depth:
        for s in samples:
            s.depths = None
    return Dataset(cfg, samples, [cfg.split(i) for i in range(cfg.scenes)])


def write_dataset(ds: Dataset, out) -> int:
    """Write images, VXG1 grids and ``manifest.json``; returns bytes written."""
    out = Path(out)
    cfg = ds.config
    scenes, total = [], 0
    for idx, (s, split) in enumerate(zip(ds.samples, ds.splits)):
        sid = f"{idx:05d}"
        views = []
        for k in range(s.n_views):
            entry = {"silhouette": f"scenes/{sid}/view{k}.pgm", "gt": f"scenes/{sid}/gt{k}.vxg"}
            blobs = {
                entry["silhouette"]: fileio.pgm_bytes(s.silhouettes[k], 8),
                entry["gt"]: fileio.vxg_bytes(VoxelGrid(s.gt_occ[k].astype(np.float32), cfg.extent)),
            }
            if s.depths is not None:
                entry["depth"] = f"scenes/{sid}/view{k}_depth.pgm"
                blobs[entry["depth"]] = fileio.pgm_bytes(s.depths[k], 16)
            for rel, data in blobs.items():
                fileio.atomic_write(out / rel, data)
                total += len(data)
            views.append(entry)
        scenes.append({"id": sid, "seed": s.spec.seed, "split": split, "views": views})
    manifest = {
        "format": "mvcvox-dataset",
        "version": MANIFEST_VERSION,
        "config": {
            "scenes": cfg.scenes, "test_scenes": cfg.test_scenes, "views": cfg.views,
            "res": cfg.res, "img": cfg.img, "seed": cfg.seed,
            "n_parts_range": list(cfg.n_parts_range), "kind": cfg.kind,
            "radius": cfg.radius, "elevation": cfg.elevation, "extent": cfg.extent,
            "depth": cfg.depth,
        },
        "scenes": scenes,
    }
    data = (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode("utf-8")
    fileio.atomic_write(out / "manifest.json", data)
    return total + len(data)


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise fileio.FormatError(path, f"cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise fileio.FormatError(path, f"invalid JSON ({exc.msg})") from exc
    if manifest.get("format") != "mvcvox-dataset":
        raise fileio.FormatError(path, "not a dataset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise fileio.FormatError(path, f"unsupported manifest version {manifest.get('version')!r}")
    return manifest


def config_from_manifest(manifest: dict) -> DatasetConfig:
    c = dict(manifest["config"])
    c["n_parts_range"] = tuple(c["n_parts_range"])
    return DatasetConfig(**c)


def read_dataset(root, splits: Optional[Sequence[str]] = None) -> Dataset:
    """Load a dataset written by ``write_dataset``.

    Scene geometry (needed for the rig and for re-rendering) is regenerated
    from the recorded seeds; images and grids come from disk.
    """
    root = Path(root)
    manifest = read_manifest(root)
    cfg = config_from_manifest(manifest)
    rig = cfg.rig()
    samples, names = [], []
    for entry in manifest["scenes"]:
        if splits is not None and entry["split"] not in splits:
            continue
        spec = generate_scene(entry["seed"], cfg.n_parts_range, rig, cfg.kind, cfg.extent)
        views = entry["views"]
        if len(views) != cfg.views:
            raise fileio.FormatError(root / "manifest.json", f"scene {entry['id']} lists {len(views)} views")
        sil = np.stack([fileio.read_pgm(root / v["silhouette"]) for v in views])
        occ = []
        for v in views:
            g = fileio.read_vxg(root / v["gt"])
            if g.res != cfg.res:
                raise fileio.FormatError(root / v["gt"], f"grid res {g.res} != manifest res {cfg.res}")
            occ.append(g.values)
        depth = None
        if all("depth" in v for v in views):
            depth = np.stack([fileio.read_pgm(root / v["depth"]) for v in views])
        samples.append(SceneSample(spec, sil, np.stack(occ).astype(np.uint8), depth))
        names.append(entry["split"])
    return Dataset(cfg, samples, names)

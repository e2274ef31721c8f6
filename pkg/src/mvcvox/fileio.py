"""Binary and text file formats.

VXG1 grid::

    b"VXG1" | u32 nx | u32 ny | u32 nz | f32 extent | nx*ny*nz f32 values

values in the order ``x + nx*(y + ny*z)``; everything little-endian.

PRM1 checkpoint::

    b"PRM1" | u32 descriptor length | UTF-8 descriptor | f32 parameters

PGM images are binary (P5), 8-bit for silhouettes and 16-bit big-endian
(as the PGM format mandates) for depth.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, VoxelGrid


class FormatError(ValueError):
    """A file is missing, truncated or not in the expected format."""

    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read ({exc.strerror})") from exc


# -- VXG1 -------------------------------------------------------------------

def vxg_bytes(grid: VoxelGrid) -> bytes:
    r = grid.res
    head = b"VXG1" + struct.pack("<IIIf", r, r, r, grid.extent)
    return head + grid.flat().astype("<f4").tobytes()


def write_vxg(path, grid: VoxelGrid) -> None:
    atomic_write(path, vxg_bytes(grid))


def read_vxg(path, frame: str = "world") -> VoxelGrid:
    raw = _read(path)
    if len(raw) < 20 or raw[:4] != b"VXG1":
        raise FormatError(path, "not a VXG1 grid")
    nx, ny, nz, extent = struct.unpack("<IIIf", raw[4:20])
    if not nx == ny == nz:
        raise FormatError(path, f"non-cubic grid {nx}x{ny}x{nz}")
    need = 20 + 4 * nx * ny * nz
    if len(raw) != need:
        raise FormatError(path, f"truncated or oversized: {len(raw)} bytes, expected {need}")
    vals = np.frombuffer(raw, dtype="<f4", offset=20).astype(np.float64)
    try:
        return VoxelGrid(vals.reshape(nz, ny, nx), float(extent), frame)
    except ValueError as exc:
        raise FormatError(path, str(exc)) from exc


# -- PGM --------------------------------------------------------------------

def pgm_bytes(image: np.ndarray, bits: int = 8) -> bytes:
    """Encode an image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images are 2D")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    h, w = img.shape
    body = q.astype(">u2" if bits == 16 else "u1").tobytes()
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body


def write_pgm(path, image, bits: int = 8) -> None:
    atomic_write(path, pgm_bytes(image, bits))


def read_pgm(path) -> np.ndarray:
    """Decode to floats ``k / maxval``."""
    raw = _read(path)
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, "truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise FormatError(path, "not a binary PGM")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError(path, "malformed PGM header") from exc
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(raw) - pos != need:
        raise FormatError(path, f"pixel data has {len(raw) - pos} bytes, expected {need}")
    px = np.frombuffer(raw, dtype=dtype, offset=pos).reshape(h, w)
    return px.astype(np.float64) / maxval


# -- meshes -----------------------------------------------------------------

def obj_text(mesh: TriangleMesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    return "\n".join(lines) + "\n"


def write_obj(path, mesh: TriangleMesh) -> None:
    atomic_write(path, obj_text(mesh).encode("ascii"))


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for n, line in enumerate(_read(path).decode("ascii", "replace").splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        except ValueError as exc:
            raise FormatError(path, f"line {n}: {exc}") from exc
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def ply_bytes(mesh: TriangleMesh, quality=None) -> bytes:
    """Binary little-endian PLY with double vertices and an optional per-vertex
    float ``quality`` channel (for error maps)."""
    nv, nf = len(mesh.vertices), len(mesh.triangles)
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {nv}",
            "property double x", "property double y", "property double z"]
    vdt = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if quality is not None:
        quality = np.asarray(quality, dtype=np.float64).reshape(-1)
        if quality.size != nv:
            raise ValueError("quality must have one value per vertex")
        head.append("property float quality")
        vdt.append(("quality", "<f4"))
    head += [f"element face {nf}", "property list uchar int vertex_indices", "end_header"]
    v = np.zeros(nv, dtype=vdt)
    v["x"], v["y"], v["z"] = mesh.vertices.T
    if quality is not None:
        v["quality"] = quality
    f = np.zeros(nf, dtype=[("n", "u1"), ("i", "<i4", (3,))])
    f["n"] = 3
    f["i"] = mesh.triangles
    return ("\n".join(head) + "\n").encode("ascii") + v.tobytes() + f.tobytes()


def write_ply(path, mesh: TriangleMesh, quality=None) -> None:
    atomic_write(path, ply_bytes(mesh, quality))


def read_ply(path):
    """Read a PLY written by ``write_ply``; returns ``(mesh, quality or None)``."""
    raw = _read(path)
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(path, "not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(path, "only binary little-endian PLY is supported")
    nv = nf = 0
    has_q = False
    for line in header:
        p = line.split()
        if p[:2] == ["element", "vertex"]:
            nv = int(p[2])
        elif p[:2] == ["element", "face"]:
            nf = int(p[2])
        elif p == ["property", "float", "quality"]:
            has_q = True
    vdt = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")] + ([("quality", "<f4")] if has_q else [])
    fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
    body = raw[end + len(b"end_header\n"):]
    vsize = np.dtype(vdt).itemsize * nv
    if len(body) != vsize + fdt.itemsize * nf:
        raise FormatError(path, "PLY body size does not match header")
    v = np.frombuffer(body[:vsize], dtype=vdt)
    f = np.frombuffer(body[vsize:], dtype=fdt)
    if nf and (f["n"] != 3).any():
        raise FormatError(path, "only triangle faces are supported")
    mesh = TriangleMesh(np.stack([v["x"], v["y"], v["z"]], axis=1), f["i"].astype(np.int64))
    return mesh, (v["quality"].astype(np.float64) if has_q else None)


def write_mesh(path, mesh: TriangleMesh, quality=None) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_obj(path, mesh)
    elif suffix == ".ply":
        write_ply(path, mesh, quality)
    else:
        raise ValueError(f"unsupported mesh format {suffix!r} (use .obj or .ply)")


# -- PRM1 -------------------------------------------------------------------

def prm_bytes(descriptor: str, params: np.ndarray) -> bytes:
    desc = descriptor.encode("utf-8")
    return b"PRM1" + struct.pack("<I", len(desc)) + desc + np.asarray(params, dtype="<f4").tobytes()


def write_prm(path, descriptor: str, params: np.ndarray) -> None:
    atomic_write(path, prm_bytes(descriptor, params))


def read_prm(path):
    """Returns ``(descriptor, float32 parameter vector)``."""
    raw = _read(path)
    if len(raw) < 8 or raw[:4] != b"PRM1":
        raise FormatError(path, "not a PRM1 checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + n or (len(raw) - 8 - n) % 4:
        raise FormatError(path, "truncated checkpoint")
    try:
        desc = raw[8:8 + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(path, "descriptor is not UTF-8") from exc
    return desc, np.frombuffer(raw, dtype="<f4", offset=8 + n).astype(np.float32)

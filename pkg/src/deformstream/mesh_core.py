"""Triangle-mesh data model, OBJ sequence I/O and small geometry helpers."""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyMesh,
    InconsistentTopology,
    InvalidKind,
    InvalidMesh,
    IsolatedVertex,
    MalformedObj,
    MissingDirectory,
)

SYNTHETIC_KINDS = ("rigid_translate", "rigid_rotate", "bend")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable triangle mesh.

    ``vertices`` is a (V, 3) float64 array, ``faces`` a (F, 3) int64 array of
    0-based indices and ``normals`` an optional (V, 3) array that is
    re-normalized on construction.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidMesh("vertex coordinates must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidMesh(f"face index out of range for {len(v)} vertices")
        n = None
        if self.normals is not None:
            n = np.array(self.normals, dtype=np.float64, copy=True).reshape(-1, 3)
            if len(n) != len(v):
                raise InvalidMesh(f"{len(n)} normals for {len(v)} vertices")
            lengths = np.linalg.norm(n, axis=1)
            if not np.all(np.isfinite(n)) or np.any(lengths == 0):
                raise InvalidMesh("normals must be finite and non-zero")
            # rows already unit length to rounding are kept so re-wrapping is lossless
            unit = np.abs(lengths - 1.0) <= 4 * np.finfo(np.float64).eps
            n = _frozen(np.where(unit[:, None], n, n / lengths[:, None]))
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "normals", n)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray, normals: np.ndarray | None = None) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, normals)

    def bbox_diagonal(self) -> float:
        if self.vertex_count == 0:
            raise EmptyMesh("mesh has no vertices")
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def same_topology(self, other: "TriangleMesh") -> bool:
        return self.vertex_count == other.vertex_count and np.array_equal(self.faces, other.faces)

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        if (self.normals is None) != (other.normals is None):
            return False
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
            and (self.normals is None or np.array_equal(self.normals, other.normals))
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class MeshSequence:
    """Frames sharing one vertex count and face list, played at ``fps``."""

    frames: tuple[TriangleMesh, ...]
    fps: int = 30

    def __post_init__(self):
        frames = tuple(self.frames)
        if int(self.fps) != self.fps or self.fps <= 0:
            raise InvalidMesh(f"fps must be a positive integer, got {self.fps}")
        for t, frame in enumerate(frames[1:], start=1):
            if frame.vertex_count != frames[0].vertex_count:
                raise InconsistentTopology(
                    t, f"{frame.vertex_count} vertices, expected {frames[0].vertex_count}"
                )
            if not np.array_equal(frame.faces, frames[0].faces):
                raise InconsistentTopology(t, "face list differs from frame 0")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", int(self.fps))

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return MeshSequence(self.frames[item], self.fps)
        return self.frames[item]

    def __iter__(self):
        return iter(self.frames)

    @property
    def duration_s(self) -> float:
        return len(self.frames) / self.fps

    def __eq__(self, other):
        if not isinstance(other, MeshSequence):
            return NotImplemented
        return self.fps == other.fps and len(self) == len(other) and all(
            a == b for a, b in zip(self.frames, other.frames)
        )

    __hash__ = None


# ---------------------------------------------------------------- OBJ I/O

def read_obj(path: str | os.PathLike) -> TriangleMesh:
    """Read an ASCII OBJ with ``v`` and triangular ``f`` records.

    ``vn`` records are used as vertex normals only when there is exactly one
    per vertex. Texture coordinates, groups and materials are ignored.
    """
    verts: list[list[float]] = []
    normals: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise MalformedObj(lineno, "vertex needs 3 coordinates", str(path))
                try:
                    xyz = [float(x) for x in rest[:3]]
                except ValueError:
                    raise MalformedObj(lineno, "non-numeric vertex coordinate", str(path)) from None
                if not all(math.isfinite(c) for c in xyz):
                    raise MalformedObj(lineno, "non-finite vertex coordinate", str(path))
                verts.append(xyz)
            elif tag == "vn":
                try:
                    normals.append([float(x) for x in rest[:3]])
                except ValueError:
                    raise MalformedObj(lineno, "non-numeric normal", str(path)) from None
            elif tag == "f":
                if len(rest) != 3:
                    raise MalformedObj(lineno, f"expected a triangle, got {len(rest)} corners", str(path))
                tri = []
                for corner in rest:
                    try:
                        idx = int(corner.split("/", 1)[0])
                    except ValueError:
                        raise MalformedObj(lineno, f"bad face index {corner!r}", str(path)) from None
                    if idx < 0:
                        idx = len(verts) + idx + 1
                    if idx < 1 or idx > len(verts):
                        raise MalformedObj(lineno, f"face index {corner} out of range", str(path))
                    tri.append(idx - 1)
                faces.append(tri)
    n = np.array(normals) if normals and len(normals) == len(verts) else None
    try:
        return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), n)
    except InvalidMesh as exc:
        raise MalformedObj(0, str(exc), str(path)) from None


def write_obj(mesh: TriangleMesh, path: str | os.PathLike, precision: int | None = None,
              write_normals: bool = True) -> None:
    """Write ``mesh`` as ASCII OBJ.

    By default every coordinate is written as the shortest decimal string
    that reads back to the identical float. ``precision`` switches to that
    many significant digits (9 is enough to recover float32 values).
    """
    fmt = repr if precision is None else (lambda c: f"%.{precision}g" % c)
    lines = ["v " + " ".join(fmt(c) for c in row) for row in mesh.vertices.tolist()]
    if write_normals and mesh.normals is not None:
        lines += ["vn " + " ".join(fmt(c) for c in row) for row in mesh.normals.tolist()]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in (mesh.faces + 1).tolist()]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in (mesh.faces + 1).tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _pattern_regex(pattern: str) -> re.Pattern:
    parts = re.split(r"(%0?\d*d)", pattern)
    rx = "".join(r"(\d+)" if re.fullmatch(r"%0?\d*d", p) else re.escape(p) for p in parts)
    return re.compile(rx + r"\Z")


def load_obj_sequence(directory_path: str | os.PathLike, pattern: str = "frame_%04d.obj", fps: int = 30) -> MeshSequence:
    """Load every file in ``directory_path`` matching a printf-style ``pattern``.

    Frames are ordered by filename (lexicographically).
    """
    directory = Path(directory_path)
    if not directory.is_dir():
        raise MissingDirectory(f"no such directory: {directory}")
    rx = _pattern_regex(pattern)
    names = sorted(name for name in os.listdir(directory) if rx.match(name))
    if not names:
        raise MissingDirectory(f"no files matching {pattern!r} in {directory}")
    frames = [read_obj(directory / name) for name in names]
    return MeshSequence(tuple(frames), fps)


def write_obj_sequence(sequence: Iterable[TriangleMesh], directory_path: str | os.PathLike,
                       pattern: str = "frame_%04d.obj", precision: int | None = None) -> list[Path]:
    directory = Path(directory_path)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(sequence):
        p = directory / (pattern % t)
        write_obj(frame, p, precision=precision)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- geometry

def compute_vertex_normals(mesh: TriangleMesh) -> TriangleMesh:
    """Return ``mesh`` with area-weighted vertex normals.

    Zero-area faces contribute nothing. A vertex with no incident face, or
    whose incident faces all have zero area, raises :class:`IsolatedVertex`.
    """
    v, f = mesh.vertices, mesh.faces
    referenced = np.zeros(len(v), dtype=bool)
    referenced[f.ravel()] = True
    if not referenced.all():
        raise IsolatedVertex(int(np.flatnonzero(~referenced)[0]))
    # cross product length is twice the face area, so summing it area-weights
    face_n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for corner in range(3):
        np.add.at(acc, f[:, corner], face_n)
    lengths = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(lengths == 0)
    if bad.size:
        raise IsolatedVertex(int(bad[0]), "has no incident face with non-zero area")
    return TriangleMesh(v, f, acc / lengths[:, None])


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def _bend(vertices: np.ndarray, angle: float) -> np.ndarray:
    # bend the x-extent of the mesh into an arc of total ``angle`` in the x-z plane
    x0 = vertices[:, 0].min()
    length = vertices[:, 0].max() - x0
    if length == 0:
        return vertices.copy()
    z0 = 0.5 * (vertices[:, 2].min() + vertices[:, 2].max())
    curvature = angle / length
    rho = 1.0 / curvature
    phi = curvature * (vertices[:, 0] - x0)
    lever = rho - (vertices[:, 2] - z0)
    out = vertices.copy()
    out[:, 0] = x0 + np.sin(phi) * lever
    out[:, 2] = z0 + rho - np.cos(phi) * lever
    return out


def generate_synthetic_sequence(kind: str, base: TriangleMesh, frame_count: int,
                                magnitude: float, fps: int = 30) -> MeshSequence:
    """Animate ``base`` with a synthetic motion.

    Frame ``t`` applies the motion scaled by ``t / (frame_count - 1)``:

    * ``rigid_translate`` shifts by ``(magnitude, 0, 0)``
    * ``rigid_rotate`` rotates by ``magnitude`` radians about the z axis through the origin
    * ``bend`` bends the x-extent of the mesh into an arc of ``magnitude`` radians
    """
    if kind not in SYNTHETIC_KINDS:
        raise InvalidKind(f"unknown motion {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if frame_count < 1:
        raise InvalidKind(f"frame_count must be >= 1, got {frame_count}")
    frames = [base]
    for t in range(1, frame_count):
        amount = magnitude * t / (frame_count - 1)
        if amount == 0:
            frames.append(base)
            continue
        if kind == "rigid_translate":
            v = base.vertices + np.array([amount, 0.0, 0.0])
        elif kind == "rigid_rotate":
            v = base.vertices @ rotation_z(amount).T
        else:
            v = _bend(base.vertices, amount)
        n = None
        if base.normals is not None:
            n = compute_vertex_normals(base.with_vertices(v)).normals
        frames.append(TriangleMesh(v, base.faces, n))
    return MeshSequence(tuple(frames), fps)


# ---------------------------------------------------------------- base shapes

def grid_mesh(nx: int, ny: int, width: float = 1.0, height: float = 1.0) -> TriangleMesh:
    """Planar ``nx`` x ``ny`` vertex grid in z=0, counter-clockwise faces."""
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, height, ny)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    v = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    faces = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriangleMesh(v, faces)


def cylinder_mesh(n_around: int, n_along: int, radius: float = 0.25, length: float = 2.0) -> TriangleMesh:
    """Open tube along the x axis (a stand-in for a limb in bend sequences)."""
    theta = np.linspace(0.0, 2 * math.pi, n_around, endpoint=False)
    xs = np.linspace(0.0, length, n_along)
    X, T = np.meshgrid(xs, theta, indexing="ij")
    v = np.column_stack([X.ravel(), radius * np.cos(T).ravel(), radius * np.sin(T).ravel()])
    idx = np.arange(n_along * n_around).reshape(n_along, n_around)
    nxt = np.roll(idx, -1, axis=1)
    a, b = idx[:-1].ravel(), nxt[:-1].ravel()
    c, d = nxt[1:].ravel(), idx[1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriangleMesh(v, faces)


def uv_sphere(n_lat: int, n_lon: int, radius: float = 1.0) -> TriangleMesh:
    """Closed UV sphere with ``(n_lat - 2) * n_lon + 2`` vertices."""
    rings = []
    for i in range(1, n_lat - 1):
        phi = math.pi * i / (n_lat - 1)
        th = np.linspace(0.0, 2 * math.pi, n_lon, endpoint=False)
        rings.append(np.column_stack([np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.full(n_lon, np.cos(phi))]))
    v = np.vstack([[0.0, 0.0, 1.0], *rings, [0.0, 0.0, -1.0]]) * radius
    faces = []
    top, bottom = 0, len(v) - 1
    ring = lambda i, j: 1 + i * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        faces.append([top, ring(0, j), ring(0, j + 1)])
        faces.append([bottom, ring(n_lat - 3, j + 1), ring(n_lat - 3, j)])
    for i in range(n_lat - 3):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j)
            faces.append([a, d, c])
            faces.append([a, c, b])
    return TriangleMesh(v, np.array(faces))


def cube_mesh(size: float = 1.0) -> TriangleMesh:
    """Axis-aligned cube with 8 corners and outward-facing triangles."""
    v = np.array([[x, y, z] for x in (0, size) for y in (0, size) for z in (0, size)], dtype=np.float64)
    # index = 4x + 2y + z
    quads = [
        (0, 1, 3, 2),  # x = 0
        (4, 6, 7, 5),  # x = 1
        (0, 4, 5, 1),  # y = 0
        (2, 3, 7, 6),  # y = 1
        (0, 2, 6, 4),  # z = 0
        (1, 5, 7, 3),  # z = 1
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [[a, b, c], [a, c, d]]
    return TriangleMesh(v, np.array(faces))

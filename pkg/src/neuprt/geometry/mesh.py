"""Triangle meshes: OBJ IO, builders, area-weighted sampling and ray queries."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ..errors import DataError, InputError
from . import bvh as _bvh

MIN_AREA = 1e-12
NORMAL_TOL = 1e-4


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None
    vertex_transfer: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InputError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if t.size and self.areas.min() <= MIN_AREA:
            bad = int(np.argmin(self.areas))
            raise InputError(f"degenerate triangle {bad} (area {self.areas[bad]:.3g})")
        if self.normals is not None:
            n = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(v):
                raise InputError("need exactly one normal per vertex")
            if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > NORMAL_TOL):
                raise InputError("vertex normals must be unit length")
            object.__setattr__(self, "normals", n)
        if self.vertex_transfer is not None:
            vt = np.asarray(self.vertex_transfer, dtype=np.float64)
            if vt.ndim != 2 or len(vt) != len(v):
                raise InputError("need one transfer vector per vertex")
            object.__setattr__(self, "vertex_transfer", vt)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def _cross(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        return self._cross / np.linalg.norm(self._cross, axis=1, keepdims=True)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    @cached_property
    def bvh(self) -> _bvh.BVH:
        return _bvh.build_bvh(self)

    def with_transfer(self, transfer: np.ndarray) -> TriangleMesh:
        return TriangleMesh(self.vertices, self.triangles, self.normals, transfer)

    def translated(self, offset) -> TriangleMesh:
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64),
                            self.triangles, self.normals, self.vertex_transfer)

    def shading_normals(self, tri: np.ndarray, bary: np.ndarray) -> np.ndarray:
        """Interpolated vertex normals if present, else the geometric face normal."""
        if self.normals is None:
            return self.face_normals[tri]
        n = np.einsum("nk,nkj->nj", bary, self.normals[self.triangles[tri]])
        return n / np.linalg.norm(n, axis=1, keepdims=True)


def merge_meshes(*meshes: TriangleMesh) -> TriangleMesh:
    verts, tris, norms = [], [], []
    offset = 0
    with_normals = all(m.normals is not None for m in meshes)
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        if with_normals:
            norms.append(m.normals)
        offset += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(tris),
                        np.vstack(norms) if with_normals else None)


def quad_mesh(center=(0.0, 0.0, 0.0), size=(1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned rectangle in the z = center.z plane facing +z."""
    cx, cy, cz = center
    hx, hy = size[0] / 2, size[1] / 2
    v = [(cx - hx, cy - hy, cz), (cx + hx, cy - hy, cz), (cx + hx, cy + hy, cz), (cx - hx, cy + hy, cz)]
    return TriangleMesh(v, [(0, 1, 2), (0, 2, 3)], np.tile([0.0, 0.0, 1.0], (4, 1)))


def icosphere(center=(0.0, 0.0, 0.0), radius: float = 1.0, subdivisions: int = 3) -> TriangleMesh:
    g = (1.0 + 5 ** 0.5) / 2
    v = [(-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0), (0, -1, g), (0, 1, g),
         (0, -1, -g), (0, 1, -g), (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    unit = np.array(verts)
    return TriangleMesh(unit * radius + np.asarray(center, dtype=np.float64), faces, unit)


def box_mesh(center=(0.0, 0.0, 0.0), half=(1.0, 1.0, 1.0), inward: bool = False) -> TriangleMesh:
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    faces = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
             (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    if inward:
        faces = [(a, c_, b) for a, b, c_ in faces]
    return TriangleMesh(c + corners * h, faces)


# ----------------------------------------------------------------------- OBJ


def _obj_index(tok: str, n: int, lineno: int, path) -> int:
    try:
        i = int(tok)
    except ValueError:
        raise DataError(f"{path}:{lineno}: bad index {tok!r}") from None
    if i == 0:
        raise DataError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
    j = i - 1 if i > 0 else n + i
    if not 0 <= j < n:
        raise DataError(f"{path}:{lineno}: index {i} out of range")
    return j


def load_obj(path) -> TriangleMesh:
    """Read an ASCII OBJ (v/vn/f); polygons are fan-triangulated."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    pos: list[list[float]] = []
    nrm: list[list[float]] = []
    corners: list[list[tuple[int, int]]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        tag, args = parts[0], parts[1:]
        try:
            if tag == "v":
                pos.append([float(a) for a in args[:3]])
                if len(pos[-1]) != 3:
                    raise ValueError
            elif tag == "vn":
                nrm.append([float(a) for a in args[:3]])
                if len(nrm[-1]) != 3:
                    raise ValueError
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed {tag!r} record") from None
        if tag == "f":
            if len(args) < 3:
                raise DataError(f"{path}:{lineno}: face needs at least 3 vertices")
            face = []
            for a in args:
                fields = a.split("/")
                vi = _obj_index(fields[0], len(pos), lineno, path)
                ni = _obj_index(fields[2], len(nrm), lineno, path) if len(fields) > 2 and fields[2] else -1
                face.append((vi, ni))
            corners.append(face)
    if not corners:
        raise DataError(f"{path}: no faces")
    use_normals = all(ni >= 0 for face in corners for _, ni in face)
    positions = np.asarray(pos, dtype=np.float64)
    if use_normals:
        # split vertices that carry more than one normal
        keys = sorted({key for face in corners for key in face})
        key_to_vertex = {k: i for i, k in enumerate(keys)}
        verts = positions[[k[0] for k in keys]]
        n = np.asarray(nrm, dtype=np.float64)[[k[1] for k in keys]]
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        faces = [[key_to_vertex[k] for k in face] for face in corners]
    else:
        verts, n = positions, None
        faces = [[vi for vi, _ in face] for face in corners]
    tris = [(f[0], f[i], f[i + 1]) for f in faces for i in range(1, len(f) - 1)]
    return TriangleMesh(verts, tris, n)


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.triangles]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ sampling


@dataclass(frozen=True)
class SurfaceSample:
    position: np.ndarray
    normal: np.ndarray


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """A batch of surface points; mesh samples also carry triangle + barycentrics."""

    positions: np.ndarray
    normals: np.ndarray
    triangles: np.ndarray | None = None
    barycentrics: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> SurfaceSample:
        return SurfaceSample(self.positions[i], self.normals[i])


def sample_surface(mesh: TriangleMesh, count: int, seed: int = 0) -> SurfaceSamples:
    """Area-proportional triangle choice (CDF inversion) then a uniform point in the triangle."""
    if mesh.n_triangles == 0:
        raise InputError("cannot sample an empty mesh")
    if count < 1:
        raise InputError("count must be >= 1")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(mesh.areas)
    cdf /= cdf[-1]
    tri = np.minimum(np.searchsorted(cdf, rng.random(count), side="right"), mesh.n_triangles - 1)
    r1, r2 = rng.random(count), rng.random(count)
    su = np.sqrt(r1)
    bary = np.stack([1.0 - su, su * (1.0 - r2), su * r2], axis=1)
    p = np.einsum("nk,nkj->nj", bary, mesh.vertices[mesh.triangles[tri]])
    return SurfaceSamples(p, mesh.shading_normals(tri, bary), tri, bary)


# --------------------------------------------------------------- ray queries


@dataclass(frozen=True, eq=False)
class RayHits:
    """Batched ray hits.  ``t`` is inf where ``hit`` is False."""

    t: np.ndarray
    hit: np.ndarray
    positions: np.ndarray
    normals: np.ndarray
    triangles: np.ndarray | None = None
    barycentrics: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.t)


def _as_rays(origins, dirs):
    o = np.ascontiguousarray(np.atleast_2d(np.asarray(origins, dtype=np.float64)))
    d = np.ascontiguousarray(np.atleast_2d(np.asarray(dirs, dtype=np.float64)))
    if len(o) == 1 and len(d) > 1:
        o = np.ascontiguousarray(np.broadcast_to(o, d.shape))
    return o, d


def _hits_from(mesh, o, d, t, tri, uv) -> RayHits:
    hit = tri >= 0
    pos = o + np.where(hit, t, 0.0)[:, None] * d
    bary = np.stack([1.0 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]], axis=1)
    normals = np.zeros_like(o)
    if hit.any():
        normals[hit] = mesh.face_normals[tri[hit]]
    return RayHits(t, hit, pos, normals, tri, bary)


def intersect_mesh(mesh: TriangleMesh, origins, dirs, t_max: float = np.inf,
                   t_min: float = 0.0) -> RayHits:
    o, d = _as_rays(origins, dirs)
    t, tri, uv = _bvh.bvh_closest_many(o, d, t_min, t_max, *mesh.bvh.arrays)
    return _hits_from(mesh, o, d, t, tri, uv)


def intersect_mesh_brute(mesh: TriangleMesh, origins, dirs, t_max: float = np.inf,
                         t_min: float = 0.0) -> RayHits:
    o, d = _as_rays(origins, dirs)
    b = mesh.bvh
    t, tri, uv = _bvh.brute_closest_many(o, d, t_min, t_max, b.v0, b.v1, b.v2)
    return _hits_from(mesh, o, d, t, tri, uv)

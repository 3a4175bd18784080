"""Ground-truth transfer: Monte Carlo projection of cosine-weighted visibility onto SH."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import sh
from .errors import DataError, FormatError, InputError
from .geometry import (SdfScene, Surface, TraceParams, TriangleMesh, marching_cubes, project_points,
                       sample_surface)
from .geometry import bvh as _bvh
from .geometry import sdf as _sdf

log = logging.getLogger(__name__)

DEFAULT_RAYS = 4096
MC_RES = 128
DISCARD_WARN = 0.05
MAGIC = b"NPRT"
VERSION = 1
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ----------------------------------------------------------------- ray stream


@numba.njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, inline="always")
def hash_uniform(seed, record, j):
    """Counter-based uniform in [0, 1) keyed by (seed, record, j)."""
    z = _mix64(np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(record))
    z = _mix64(z + np.uint64(j) * np.uint64(0xD1B54A32D192ED03) + np.uint64(1))
    return float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True, inline="always")
def ray_dir(seed, record, r, n_rays, offset):
    # z-stratified spherical Fibonacci set with a per-ray jitter in z and a
    # per-record azimuthal rotation
    u = hash_uniform(seed, record, r)
    z = 1.0 - 2.0 * (r + u) / n_rays
    s = np.sqrt(max(0.0, 1.0 - z * z))
    a = r * GOLDEN + offset
    phi = 2.0 * np.pi * (a - np.floor(a))
    return s * np.cos(phi), s * np.sin(phi), z


def ray_directions(n_rays: int, seed: int = 0, record: int = 0) -> np.ndarray:
    """The direction set used for one record (for inspection and tests)."""
    return _dirs(seed, record, n_rays)


@numba.njit(cache=True)
def _dirs(seed, record, n_rays):
    out = np.empty((n_rays, 3))
    offset = hash_uniform(seed, record, n_rays)
    for r in range(n_rays):
        x, y, z = ray_dir(seed, record, r, n_rays, offset)
        out[r, 0] = x
        out[r, 1] = y
        out[r, 2] = z
    return out


# --------------------------------------------------------------------- kernels


@numba.njit(cache=True)
def _bake_mesh(pos, nrm, ids, n_rays, order, knorm, seed, t_eps,
               lo, hi, left, right, start, count, order_idx, v0, v1, v2):
    n = pos.shape[0]
    out = np.zeros((n, order * order))
    ybuf = np.empty(order * order)
    w = 4.0 * np.pi / n_rays
    for i in range(n):
        rec = ids[i]
        offset = hash_uniform(seed, rec, n_rays)
        nx, ny, nz = nrm[i, 0], nrm[i, 1], nrm[i, 2]
        ox = pos[i, 0] + t_eps * nx
        oy = pos[i, 1] + t_eps * ny
        oz = pos[i, 2] + t_eps * nz
        for r in range(n_rays):
            dx, dy, dz = ray_dir(seed, rec, r, n_rays, offset)
            c = dx * nx + dy * ny + dz * nz
            if c <= 0.0:
                continue
            if _bvh.bvh_occluded(ox, oy, oz, dx, dy, dz, 0.0, np.inf, lo, hi, left, right,
                                 start, count, order_idx, v0, v1, v2):
                continue
            sh.sh_eval_into(dx, dy, dz, order, knorm, ybuf)
            for k in range(order * order):
                out[i, k] += c * ybuf[k]
        for k in range(order * order):
            out[i, k] *= w
    return out


@numba.njit(cache=True)
def _bake_sdf(pos, nrm, ids, n_rays, order, knorm, seed, t_eps, prog, t_max, hit_eps,
              max_steps, step_scale):
    n = pos.shape[0]
    out = np.zeros((n, order * order))
    ybuf = np.empty(order * order)
    stack = np.empty(_sdf.STACK_DEPTH)
    w = 4.0 * np.pi / n_rays
    for i in range(n):
        rec = ids[i]
        offset = hash_uniform(seed, rec, n_rays)
        nx, ny, nz = nrm[i, 0], nrm[i, 1], nrm[i, 2]
        ox = pos[i, 0] + t_eps * nx
        oy = pos[i, 1] + t_eps * ny
        oz = pos[i, 2] + t_eps * nz
        for r in range(n_rays):
            dx, dy, dz = ray_dir(seed, rec, r, n_rays, offset)
            c = dx * nx + dy * ny + dz * nz
            if c <= 0.0:
                continue
            t = _sdf.march(prog, ox, oy, oz, dx, dy, dz, 0.0, t_max, hit_eps, max_steps,
                           step_scale, stack)
            if t < np.inf:
                continue
            sh.sh_eval_into(dx, dy, dz, order, knorm, ybuf)
            for k in range(order * order):
                out[i, k] += c * ybuf[k]
        for k in range(order * order):
            out[i, k] *= w
    return out


def bake_transfers(surface: Surface, positions, normals, n_rays: int = DEFAULT_RAYS,
                   order: int = 4, seed: int = 0, record_ids=None,
                   params: TraceParams | None = None) -> np.ndarray:
    """Transfer vectors for a batch of surface points, shape (N, order**2).

    Record ``i`` draws its rays from the stream keyed by ``(seed, record_ids[i])``
    so results do not depend on batch composition or order.
    """
    if n_rays < 64:
        raise InputError(f"n_rays must be >= 64, got {n_rays}")
    pos = np.ascontiguousarray(np.asarray(positions, dtype=np.float64).reshape(-1, 3))
    nrm = np.ascontiguousarray(np.asarray(normals, dtype=np.float64).reshape(-1, 3))
    ids = np.arange(len(pos), dtype=np.int64) if record_ids is None else \
        np.ascontiguousarray(record_ids, dtype=np.int64)
    knorm = sh.norm_table(order)
    t_eps = 1e-4 * surface.diagonal
    if isinstance(surface, TriangleMesh):
        return _bake_mesh(pos, nrm, ids, n_rays, order, knorm, seed, t_eps, *surface.bvh.arrays)
    steps, hit_eps, t_max = surface.resolve(params)
    # start the shadow ray clear of the hit threshold
    return _bake_sdf(pos, nrm, ids, n_rays, order, knorm, seed, t_eps + hit_eps,
                     surface.program, t_max, hit_eps, steps, surface.step_scale)


def bake_transfer(surface: Surface, sample, n_rays: int = DEFAULT_RAYS, order: int = 4,
                  seed: int = 0) -> sh.SHVector:
    t = bake_transfers(surface, sample.position, sample.normal, n_rays, order, seed)
    return sh.SHVector(t[0], order)


def bake_vertices(mesh: TriangleMesh, n_rays: int = DEFAULT_RAYS, order: int = 4,
                  seed: int = 0) -> TriangleMesh:
    """Per-vertex baseline storage: bake at every vertex and attach to the mesh."""
    normals = mesh.normals if mesh.normals is not None else _vertex_normals(mesh)
    return mesh.with_transfer(bake_transfers(mesh, mesh.vertices, normals, n_rays, order, seed))


def _vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    acc = np.zeros_like(mesh.vertices)
    weighted = mesh.face_normals * mesh.areas[:, None]
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], weighted)
    return acc / np.linalg.norm(acc, axis=1, keepdims=True)


# --------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class BakeConfig:
    n_rays: int = DEFAULT_RAYS
    order: int = 4
    seed: int = 0
    mc_res: int = MC_RES
    trace: TraceParams | None = None


@dataclass(eq=False)
class TransferDataset:
    positions: np.ndarray        # (N, 3) float32
    normals: np.ndarray          # (N, 3) float32
    transfers: np.ndarray        # (N, order**2) float32
    center: np.ndarray           # (3,) float32
    half_extent: float
    scale: float
    order: int = 4
    scene_id: str = ""
    discarded: int = field(default=0, compare=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32).reshape(-1, 3)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float32).reshape(-1, 3)
        self.transfers = np.ascontiguousarray(self.transfers, dtype=np.float32).reshape(
            -1, self.order * self.order)
        self.center = np.asarray(self.center, dtype=np.float32).reshape(3)
        self.half_extent = float(np.float32(self.half_extent))
        self.scale = float(np.float32(self.scale))
        if not (len(self.positions) == len(self.normals) == len(self.transfers)):
            raise InputError("positions, normals and transfers must have equal length")

    def __len__(self) -> int:
        return len(self.positions)

    def normalized_positions(self) -> np.ndarray:
        return (self.positions.astype(np.float64) - self.center) / self.half_extent

    def subset(self, idx) -> TransferDataset:
        return TransferDataset(self.positions[idx], self.normals[idx], self.transfers[idx],
                               self.center, self.half_extent, self.scale, self.order,
                               self.scene_id)

    def renormalized(self, lo, hi) -> TransferDataset:
        center, half = normalization_for(lo, hi, pad=0.0)
        scale = dataset_scale(self.transfers)
        return TransferDataset(self.positions, self.normals, self.transfers, center, half,
                               scale, self.order, self.scene_id)


def normalization_for(lo, hi, pad: float = 0.01) -> tuple[np.ndarray, float]:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return (lo + hi) / 2, float((hi - lo).max() / 2 * (1.0 + pad))


def dataset_scale(transfers: np.ndarray) -> float:
    s = float(np.abs(transfers).max()) if transfers.size else 1.0
    return s if s > 0 else 1.0


def sample_for_bake(surface: Surface, count: int, seed: int = 0, mc_res: int = MC_RES):
    """Surface points + normals and the AABB they live in.

    SDF scenes go through an extracted mesh: sample it by area, then pull each
    sample back onto the zero set.  Non-converged samples are dropped.
    """
    if isinstance(surface, TriangleMesh):
        s = sample_surface(surface, count, seed)
        lo, hi = surface.bounds
        return s.positions, s.normals, lo, hi, 0
    mesh = marching_cubes(surface, mc_res)
    s = sample_surface(mesh, count, seed)
    proj, ok = project_points(surface, s.positions)
    cell = (surface.bounds[1] - surface.bounds[0]) / mc_res
    lo, hi = mesh.bounds
    return proj.positions[ok], proj.normals[ok], lo - cell, hi + cell, int((~ok).sum())


def bake_dataset(surface: Surface, count: int, cfg: BakeConfig = BakeConfig(),
                 scene_id: str = "") -> TransferDataset:
    if count < 1:
        raise InputError("count must be >= 1")
    pos, nrm, lo, hi, dropped = sample_for_bake(surface, count, cfg.seed, cfg.mc_res)
    if dropped > DISCARD_WARN * count:
        log.warning("discarded %d of %d samples that failed to project onto the surface",
                    dropped, count)
    T = bake_transfers(surface, pos, nrm, cfg.n_rays, cfg.order, cfg.seed, params=cfg.trace)
    center, half = normalization_for(lo, hi)
    ds = TransferDataset(pos, nrm, T, center, half, dataset_scale(T.astype(np.float32)),
                         cfg.order, scene_id)
    ds.discarded = dropped
    return ds


_HEADER = struct.Struct("<4sIIQ3fff")


def save_dataset(ds: TransferDataset, path) -> None:
    n2 = ds.order * ds.order
    rec = np.empty((len(ds), 6 + n2), dtype="<f4")
    rec[:, 0:3] = ds.positions
    rec[:, 3:6] = ds.normals
    rec[:, 6:] = ds.transfers
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, ds.order, len(ds), *ds.center.tolist(),
                              ds.half_extent, ds.scale))
        fh.write(rec.tobytes())


def load_dataset(path) -> TransferDataset:
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, order, count, cx, cy, cz, half, scale = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if not 1 <= order <= sh.MAX_ORDER:
        raise FormatError(f"{path}: bad SH order {order}")
    width = 6 + order * order
    if len(raw) != _HEADER.size + count * width * 4:
        raise FormatError(f"{path}: expected {count} records, file length disagrees")
    rec = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, width)
    return TransferDataset(rec[:, 0:3], rec[:, 3:6], rec[:, 6:], (cx, cy, cz), half, scale,
                           order, Path(path).stem)

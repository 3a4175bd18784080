"""Isosurface extraction from SDF scenes."""

from __future__ import annotations

import numpy as np
from skimage import measure

from ..errors import DataError, InputError
from .mesh import MIN_AREA, TriangleMesh
from .sdf import SdfScene, sdf_grid, sdf_normals


def marching_cubes(scene: SdfScene, grid_res: int = 128, bounds=None) -> TriangleMesh:
    """Zero isosurface on a ``grid_res``-cell lattice over ``bounds`` (scene bounds by default).

    Uses the classic 256-case Lorensen table with linear edge interpolation.
    Vertex normals come from the distance-field gradient.
    """
    if not 8 <= grid_res <= 512:
        raise InputError(f"grid_res must be in [8, 512], got {grid_res}")
    lo, hi = scene.bounds if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    step = (hi - lo) / grid_res
    n = grid_res + 1
    vol = sdf_grid(scene.program, lo, step, n, n, n)
    if vol.min() >= 0.0 or vol.max() <= 0.0:
        raise DataError("no zero crossing inside bounds; marching cubes produced an empty mesh")
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=tuple(step),
                                                method="lorensen", allow_degenerate=True)
    verts = verts.astype(np.float64) + lo
    p = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    faces = faces[area > MIN_AREA]
    if len(faces) == 0:
        raise DataError("marching cubes produced only degenerate triangles")
    used, faces = np.unique(faces, return_inverse=True)
    verts = verts[used]
    faces = faces.reshape(-1, 3)
    normals, ok = sdf_normals(scene, verts)
    if not ok.all():
        normals[~ok] = _face_average(verts, faces)[~ok]
    # orient triangles so their winding agrees with the outward gradient
    p = verts[faces]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = np.einsum("ij,ij->i", fn, normals[faces].sum(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    return TriangleMesh(verts, faces, normals)


def _face_average(verts, faces):
    p = verts[faces]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    acc = np.zeros_like(verts)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    return acc / np.maximum(np.linalg.norm(acc, axis=1, keepdims=True), 1e-300)

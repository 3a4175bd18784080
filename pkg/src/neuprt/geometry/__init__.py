"""Surface representations and the queries the baker and renderer need."""

from __future__ import annotations

from typing import Union as _U

import numpy as np

from .marching import marching_cubes
from .mesh import (RayHits, SurfaceSample, SurfaceSamples, TriangleMesh, box_mesh, icosphere,
                   intersect_mesh, intersect_mesh_brute, load_obj, merge_meshes, quad_mesh,
                   sample_surface, save_obj)
from .sdf import (Box, Cylinder, Intersection, Plane, SdfScene, SmoothUnion, Sphere, Subtraction,
                  Torus, TraceParams, Union, load_scene, parse_scene, project_points,
                  project_to_sdf_surface, sdf_eval, sdf_normal, sdf_normals, sphere_trace)

Surface = _U[TriangleMesh, SdfScene]


def surface_bounds(surface: Surface) -> tuple[np.ndarray, np.ndarray]:
    return surface.bounds


def ray_intersect(surface: Surface, origins, dirs, t_max: float = np.inf,
                  params: TraceParams | None = None) -> RayHits:
    """Nearest hit for a batch of rays against either representation."""
    if isinstance(surface, TriangleMesh):
        return intersect_mesh(surface, origins, dirs, t_max)
    if params is None and np.isfinite(t_max):
        params = TraceParams(t_max=t_max)
    return sphere_trace(surface, origins, dirs, params)


def load_surface(path) -> Surface:
    """``.obj`` files load as meshes, anything else as an SDF scene file."""
    from pathlib import Path

    return load_obj(path) if Path(path).suffix.lower() == ".obj" else load_scene(path)


__all__ = [
    "Box", "Cylinder", "Intersection", "Plane", "RayHits", "SdfScene", "SmoothUnion", "Sphere",
    "Subtraction", "Surface", "SurfaceSample", "SurfaceSamples", "Torus", "TraceParams",
    "TriangleMesh", "Union", "box_mesh", "icosphere", "intersect_mesh", "intersect_mesh_brute",
    "load_obj", "load_scene", "load_surface", "marching_cubes", "merge_meshes", "parse_scene",
    "project_points", "project_to_sdf_surface", "quad_mesh", "ray_intersect", "sample_surface",
    "save_obj", "sdf_eval", "sdf_normal", "sdf_normals", "sphere_trace", "surface_bounds",
]

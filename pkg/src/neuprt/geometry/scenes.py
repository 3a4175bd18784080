"""Desk-scale fixture scenes: a sphere hovering over a ground slab, in both representations."""

from __future__ import annotations

from .mesh import TriangleMesh, icosphere, merge_meshes, quad_mesh
from .sdf import Box, SdfScene, Sphere, Union

GROUND_HALF = 1.5
SPHERE_CENTER = (0.0, 0.0, 0.55)
SPHERE_RADIUS = 0.5

TOY_SCENE_TEXT = f"""\
# sphere hovering over a ground slab (z up)
bounds min=-1.6,-1.6,-0.2 max=1.6,1.6,1.2
box id=ground c=0,0,-0.05 h={GROUND_HALF},{GROUND_HALF},0.05
sphere id=ball c={SPHERE_CENTER[0]},{SPHERE_CENTER[1]},{SPHERE_CENTER[2]} r={SPHERE_RADIUS}
op union id=scene a=ground b=ball
"""


def toy_sdf() -> SdfScene:
    ground = Box((0.0, 0.0, -0.05), (GROUND_HALF, GROUND_HALF, 0.05))
    return SdfScene(Union(ground, Sphere(SPHERE_CENTER, SPHERE_RADIUS)),
                    ((-1.6, -1.6, -0.2), (1.6, 1.6, 1.2)))


def toy_mesh(subdivisions: int = 4) -> TriangleMesh:
    ground = quad_mesh((0.0, 0.0, 0.0), (2 * GROUND_HALF, 2 * GROUND_HALF))
    return merge_meshes(ground, icosphere(SPHERE_CENTER, SPHERE_RADIUS, subdivisions))

"""Analytic signed distance scenes.

A scene is an expression tree of primitives and CSG operators.  The tree is
compiled to a postfix program (one row per node) that numba kernels evaluate
with a small value stack, so tracing, projection and baking never call back
into Python.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union as _U

import numba
import numpy as np

from ..errors import DataError, DegenerateNormalError, InputError, ProjectionError
from .mesh import RayHits, SurfaceSamples, _as_rays

OP_SPHERE, OP_BOX, OP_TORUS, OP_PLANE, OP_CYLINDER = 0, 1, 2, 3, 4
OP_UNION, OP_INTERSECT, OP_SUBTRACT, OP_SMOOTH_UNION = 10, 11, 12, 13
PROG_WIDTH = 10
STACK_DEPTH = 64
SMOOTH_STEP_SCALE = 0.9
DEGENERATE_GRAD = 1e-9


def _vec(v) -> tuple[float, float, float]:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    return float(a[0]), float(a[1]), float(a[2])


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def _row(self):
        return [OP_SPHERE, *_vec(self.center), self.radius]


@dataclass(frozen=True)
class Box:
    center: tuple = (0.0, 0.0, 0.0)
    half: tuple = (1.0, 1.0, 1.0)
    rounding: float = 0.0

    def _row(self):
        return [OP_BOX, *_vec(self.center), *_vec(self.half), self.rounding]


@dataclass(frozen=True)
class Torus:
    """Ring in the plane z = center.z."""

    center: tuple = (0.0, 0.0, 0.0)
    major: float = 1.0
    minor: float = 0.25

    def _row(self):
        return [OP_TORUS, *_vec(self.center), self.major, self.minor]


@dataclass(frozen=True)
class Plane:
    """Half-space ``dot(p, normal) + offset <= 0``."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def _row(self):
        n = np.asarray(self.normal, dtype=np.float64)
        return [OP_PLANE, *_vec(n / np.linalg.norm(n)), self.offset]


@dataclass(frozen=True)
class Cylinder:
    """Capped cylinder along z."""

    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    half_height: float = 0.5
    rounding: float = 0.0

    def _row(self):
        return [OP_CYLINDER, *_vec(self.center), self.radius, self.half_height, self.rounding]


@dataclass(frozen=True)
class Union:
    a: "Node"
    b: "Node"
    _op = OP_UNION

    def _row(self):
        return [self._op]


@dataclass(frozen=True)
class Intersection(Union):
    _op = OP_INTERSECT


@dataclass(frozen=True)
class Subtraction(Union):
    """``a`` with ``b`` carved out."""

    _op = OP_SUBTRACT


@dataclass(frozen=True)
class SmoothUnion:
    a: "Node"
    b: "Node"
    k: float = 0.1

    def _row(self):
        return [OP_SMOOTH_UNION, self.k]


Node = _U[Sphere, Box, Torus, Plane, Cylinder, Union, Intersection, Subtraction, SmoothUnion]
PRIMITIVES = (Sphere, Box, Torus, Plane, Cylinder)


def compile_tree(root: Node) -> np.ndarray:
    rows: list[list[float]] = []

    def visit(node):
        if not isinstance(node, PRIMITIVES):
            visit(node.a)
            visit(node.b)
        row = node._row()
        rows.append(row + [0.0] * (PROG_WIDTH - len(row)))

    visit(root)
    return np.ascontiguousarray(rows, dtype=np.float64)


def _has_smooth(node) -> bool:
    if isinstance(node, PRIMITIVES):
        return False
    return isinstance(node, SmoothUnion) or _has_smooth(node.a) or _has_smooth(node.b)


# -------------------------------------------------------------------- kernels


@numba.njit(cache=True)
def sdf_point(prog, x, y, z, stack):
    sp = 0
    for r in range(prog.shape[0]):
        op = int(prog[r, 0])
        if op == OP_SPHERE:
            dx = x - prog[r, 1]
            dy = y - prog[r, 2]
            dz = z - prog[r, 3]
            d = np.sqrt(dx * dx + dy * dy + dz * dz) - prog[r, 4]
        elif op == OP_BOX:
            rr = prog[r, 7]
            qx = abs(x - prog[r, 1]) - (prog[r, 4] - rr)
            qy = abs(y - prog[r, 2]) - (prog[r, 5] - rr)
            qz = abs(z - prog[r, 3]) - (prog[r, 6] - rr)
            mx = max(qx, 0.0)
            my = max(qy, 0.0)
            mz = max(qz, 0.0)
            d = np.sqrt(mx * mx + my * my + mz * mz) + min(max(qx, max(qy, qz)), 0.0) - rr
        elif op == OP_TORUS:
            dx = x - prog[r, 1]
            dy = y - prog[r, 2]
            dz = z - prog[r, 3]
            qx = np.sqrt(dx * dx + dy * dy) - prog[r, 4]
            d = np.sqrt(qx * qx + dz * dz) - prog[r, 5]
        elif op == OP_PLANE:
            d = x * prog[r, 1] + y * prog[r, 2] + z * prog[r, 3] + prog[r, 4]
        elif op == OP_CYLINDER:
            rr = prog[r, 6]
            dx = x - prog[r, 1]
            dy = y - prog[r, 2]
            qx = np.sqrt(dx * dx + dy * dy) - (prog[r, 4] - rr)
            qz = abs(z - prog[r, 3]) - (prog[r, 5] - rr)
            mx = max(qx, 0.0)
            mz = max(qz, 0.0)
            d = min(max(qx, qz), 0.0) + np.sqrt(mx * mx + mz * mz) - rr
        else:
            b = stack[sp - 1]
            a = stack[sp - 2]
            sp -= 2
            if op == OP_UNION:
                d = min(a, b)
            elif op == OP_INTERSECT:
                d = max(a, b)
            elif op == OP_SUBTRACT:
                d = max(a, -b)
            else:
                k = prog[r, 1]
                h = max(k - abs(a - b), 0.0) / k
                d = min(a, b) - h * h * k * 0.25
        stack[sp] = d
        sp += 1
    return stack[0]


@numba.njit(cache=True)
def sdf_many(prog, pts):
    stack = np.empty(STACK_DEPTH)
    out = np.empty(pts.shape[0])
    for i in range(pts.shape[0]):
        out[i] = sdf_point(prog, pts[i, 0], pts[i, 1], pts[i, 2], stack)
    return out


@numba.njit(cache=True)
def sdf_grid(prog, lo, step, nx, ny, nz):
    stack = np.empty(STACK_DEPTH)
    out = np.empty((nx, ny, nz))
    for i in range(nx):
        x = lo[0] + i * step[0]
        for j in range(ny):
            y = lo[1] + j * step[1]
            for k in range(nz):
                out[i, j, k] = sdf_point(prog, x, y, lo[2] + k * step[2], stack)
    return out


@numba.njit(cache=True)
def sdf_gradient(prog, x, y, z, h, stack):
    gx = sdf_point(prog, x + h, y, z, stack) - sdf_point(prog, x - h, y, z, stack)
    gy = sdf_point(prog, x, y + h, z, stack) - sdf_point(prog, x, y - h, z, stack)
    gz = sdf_point(prog, x, y, z + h, stack) - sdf_point(prog, x, y, z - h, stack)
    s = 0.5 / h
    return gx * s, gy * s, gz * s


@numba.njit(cache=True)
def normals_many(prog, pts, h):
    stack = np.empty(STACK_DEPTH)
    n = pts.shape[0]
    out = np.empty((n, 3))
    mag = np.empty(n)
    for i in range(n):
        gx, gy, gz = sdf_gradient(prog, pts[i, 0], pts[i, 1], pts[i, 2], h, stack)
        g = np.sqrt(gx * gx + gy * gy + gz * gz)
        mag[i] = g
        if g < DEGENERATE_GRAD:
            out[i, 0] = 0.0
            out[i, 1] = 0.0
            out[i, 2] = 0.0
        else:
            out[i, 0] = gx / g
            out[i, 1] = gy / g
            out[i, 2] = gz / g
    return out, mag


@numba.njit(cache=True)
def march(prog, ox, oy, oz, dx, dy, dz, t_start, t_max, hit_eps, max_steps, step_scale, stack):
    """Sphere trace one ray; returns hit distance or inf."""
    t = t_start
    for _ in range(max_steps):
        if t > t_max:
            return np.inf
        d = sdf_point(prog, ox + t * dx, oy + t * dy, oz + t * dz, stack)
        if d < hit_eps:
            return t
        t += d * step_scale
    return np.inf


@numba.njit(cache=True)
def march_many(prog, origins, dirs, t_start, t_max, hit_eps, max_steps, step_scale):
    stack = np.empty(STACK_DEPTH)
    n = origins.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = march(prog, origins[i, 0], origins[i, 1], origins[i, 2],
                       dirs[i, 0], dirs[i, 1], dirs[i, 2], t_start, t_max, hit_eps,
                       max_steps, step_scale, stack)
    return out


@numba.njit(cache=True)
def project_many(prog, pts, h, iters, tol):
    stack = np.empty(STACK_DEPTH)
    n = pts.shape[0]
    out = pts.copy()
    ok = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        x = out[i, 0]
        y = out[i, 1]
        z = out[i, 2]
        for _ in range(iters + 1):
            d = sdf_point(prog, x, y, z, stack)
            if abs(d) < tol:
                ok[i] = True
                break
            gx, gy, gz = sdf_gradient(prog, x, y, z, h, stack)
            g = np.sqrt(gx * gx + gy * gy + gz * gz)
            if g < DEGENERATE_GRAD:
                break
            x -= d * gx / g
            y -= d * gy / g
            z -= d * gz / g
        out[i, 0] = x
        out[i, 1] = y
        out[i, 2] = z
    return out, ok


# ---------------------------------------------------------------------- scene


@dataclass(frozen=True)
class TraceParams:
    """Sphere-tracing knobs; ``None`` resolves against the scene diagonal."""

    max_steps: int = 256
    hit_eps: float | None = None
    t_max: float | None = None


@dataclass(frozen=True, eq=False)
class SdfScene:
    root: Node
    bounds: tuple[np.ndarray, np.ndarray] = field(default=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)))

    def __post_init__(self):
        lo = np.asarray(self.bounds[0], dtype=np.float64).reshape(3)
        hi = np.asarray(self.bounds[1], dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise InputError("scene bounds must have max > min on every axis")
        object.__setattr__(self, "bounds", (lo, hi))

    @cached_property
    def program(self) -> np.ndarray:
        return compile_tree(self.root)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    @property
    def step_scale(self) -> float:
        return SMOOTH_STEP_SCALE if _has_smooth(self.root) else 1.0

    @property
    def grad_step(self) -> float:
        return 1e-4 * self.diagonal

    @property
    def hit_eps(self) -> float:
        return 1e-4 * self.diagonal

    def resolve(self, params: TraceParams | None) -> tuple[int, float, float]:
        p = params or TraceParams()
        return (p.max_steps,
                self.hit_eps if p.hit_eps is None else p.hit_eps,
                4.0 * self.diagonal if p.t_max is None else p.t_max)

    def __call__(self, p) -> np.ndarray:
        return sdf_eval(self, p)


def sdf_eval(scene: SdfScene, p):
    pts = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise InputError("query point must be finite")
    out = sdf_many(scene.program, np.ascontiguousarray(pts.reshape(-1, 3)))
    return float(out[0]) if pts.ndim == 1 else out


def sdf_normals(scene: SdfScene, pts, h: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batched normals plus a validity mask (False where the gradient vanishes)."""
    p = np.ascontiguousarray(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
    n, mag = normals_many(scene.program, p, scene.grad_step if h is None else h)
    return n, mag >= DEGENERATE_GRAD


def sdf_normal(scene: SdfScene, p, h: float | None = None) -> np.ndarray:
    pts = np.asarray(p, dtype=np.float64)
    n, ok = sdf_normals(scene, pts, h)
    if not ok.all():
        raise DegenerateNormalError(f"distance gradient vanishes at {pts.reshape(-1, 3)[~ok][0]}")
    return n[0] if pts.ndim == 1 else n


def sphere_trace(scene: SdfScene, origins, dirs, params: TraceParams | None = None,
                 t_start: float = 0.0) -> RayHits:
    o, d = _as_rays(origins, dirs)
    steps, eps, t_max = scene.resolve(params)
    t = march_many(scene.program, o, d, t_start, t_max, eps, steps, scene.step_scale)
    hit = np.isfinite(t)
    pos = o + np.where(hit, t, 0.0)[:, None] * d
    normals = np.zeros_like(o)
    if hit.any():
        nh, _ = normals_many(scene.program, np.ascontiguousarray(pos[hit]), scene.grad_step)
        normals[hit] = nh
    return RayHits(t, hit, pos, normals)


def project_points(scene: SdfScene, pts, iters: int = 16, tol: float | None = None):
    """Newton-style projection onto the zero set; returns (samples, converged mask)."""
    p = np.ascontiguousarray(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
    out, ok = project_many(scene.program, p, scene.grad_step, iters,
                           scene.hit_eps if tol is None else tol)
    n, nok = normals_many(scene.program, out, scene.grad_step)
    ok &= nok >= DEGENERATE_GRAD
    return SurfaceSamples(out, n), ok


def project_to_sdf_surface(scene: SdfScene, p, iters: int = 16, tol: float | None = None):
    samples, ok = project_points(scene, p, iters, tol)
    if not ok[0]:
        raise ProjectionError(f"projection of {np.asarray(p)} did not converge in {iters} iterations")
    return samples[0]


# ------------------------------------------------------------------ scene file


def _floats(s: str, n: int, where: str) -> tuple:
    try:
        vals = tuple(float(x) for x in s.split(","))
    except ValueError:
        raise DataError(f"{where}: bad number list {s!r}") from None
    if len(vals) != n:
        raise DataError(f"{where}: expected {n} values, got {s!r}")
    return vals if n > 1 else vals[0]


_PRIM_FIELDS = {
    "sphere": (Sphere, {"c": ("center", 3), "r": ("radius", 1)}),
    "box": (Box, {"c": ("center", 3), "h": ("half", 3), "r": ("rounding", 1)}),
    "round_box": (Box, {"c": ("center", 3), "h": ("half", 3), "r": ("rounding", 1)}),
    "torus": (Torus, {"c": ("center", 3), "R": ("major", 1), "r": ("minor", 1)}),
    "plane": (Plane, {"n": ("normal", 3), "h": ("offset", 1)}),
    "cylinder": (Cylinder, {"c": ("center", 3), "r": ("radius", 1), "hh": ("half_height", 1),
                            "round": ("rounding", 1)}),
}
_OPS = {"union": Union, "intersection": Intersection, "subtraction": Subtraction,
        "smooth_union": SmoothUnion}


def parse_scene(text: str, name: str = "<scene>") -> SdfScene:
    """Parse the line-oriented scene format (see README for the grammar)."""
    nodes: dict[str, object] = {}
    free: list[str] = []
    pending_k: list[str] = []
    bounds = None
    root_id = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        where = f"{name}:{lineno}"
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        kind, rest = toks[0], toks[1:]
        if kind == "root":
            if len(rest) != 1:
                raise DataError(f"{where}: usage 'root <id>'")
            root_id = rest[0]
            continue
        if kind == "op":
            if not rest:
                raise DataError(f"{where}: missing operator name")
            kind, rest = "op:" + rest[0], rest[1:]
        kv = {}
        for tok in rest:
            if "=" not in tok:
                raise DataError(f"{where}: expected key=value, got {tok!r}")
            k, v = tok.split("=", 1)
            kv[k] = v
        if kind == "bounds":
            try:
                bounds = (_floats(kv["min"], 3, where), _floats(kv["max"], 3, where))
            except KeyError as e:
                raise DataError(f"{where}: bounds needs {e.args[0]}=") from None
            continue
        nid = kv.pop("id", str(len(nodes)))
        if nid in nodes:
            raise DataError(f"{where}: duplicate id {nid!r}")
        if kind in _PRIM_FIELDS:
            cls, fields = _PRIM_FIELDS[kind]
            args = {}
            for k, v in kv.items():
                if k not in fields:
                    raise DataError(f"{where}: unknown field {k!r} for {kind}")
                attr, n = fields[k]
                args[attr] = _floats(v, n, where)
            node = cls(**args)
        elif kind.startswith("op:") and kind[3:] in _OPS:
            opname = kind[3:]
            try:
                a, b = nodes[kv.pop("a")], nodes[kv.pop("b")]
            except KeyError as e:
                raise DataError(f"{where}: operator needs a=<id> b=<id> naming earlier nodes "
                                f"(missing {e.args[0]!r})") from None
            for ref in (a, b):
                for fid in list(free):
                    if nodes[fid] is ref:
                        free.remove(fid)
            if opname == "smooth_union":
                if "k" in kv:
                    node = SmoothUnion(a, b, _floats(kv.pop("k"), 1, where))
                else:
                    node = SmoothUnion(a, b, -1.0)
                    pending_k.append(nid)
            else:
                node = _OPS[opname](a, b)
            if kv:
                raise DataError(f"{where}: unknown field(s) {sorted(kv)}")
        else:
            raise DataError(f"{where}: unknown record {toks[0]!r}")
        nodes[nid] = node
        free.append(nid)
    if not nodes:
        raise DataError(f"{name}: scene defines no geometry")
    if bounds is None:
        raise DataError(f"{name}: missing 'bounds min=... max=...' record")
    if root_id is not None:
        if root_id not in nodes:
            raise DataError(f"{name}: unknown root {root_id!r}")
        root = nodes[root_id]
    else:
        root = nodes[free[0]]
        for fid in free[1:]:
            root = Union(root, nodes[fid])
    scene = SdfScene(root, bounds)
    if pending_k:
        root = _fill_k(root, 0.1 * scene.diagonal)
        scene = SdfScene(root, bounds)
    return scene


def _fill_k(node, k):
    if isinstance(node, PRIMITIVES):
        return node
    a, b = _fill_k(node.a, k), _fill_k(node.b, k)
    if isinstance(node, SmoothUnion):
        return SmoothUnion(a, b, k if node.k < 0 else node.k)
    return type(node)(a, b)


def load_scene(path) -> SdfScene:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    return parse_scene(path.read_text(), str(path))

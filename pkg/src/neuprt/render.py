"""Deferred CPU renderer: G-buffer, fragment packing, SH shading."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import sh
from .bake import DEFAULT_RAYS, bake_transfers
from .errors import InputError
from .geometry import SdfScene, Surface, TriangleMesh, TraceParams, ray_intersect
from .images import Image
from .nn import MlpModel, forward


# ---------------------------------------------------------------------- camera


@dataclass(frozen=True)
class Camera:
    eye: tuple = (0.0, -3.0, 1.5)
    look_at: tuple = (0.0, 0.0, 0.3)
    up: tuple = (0.0, 0.0, 1.0)
    fov: float = 45.0
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not 1.0 < self.fov < 179.0:
            raise InputError(f"fov must be in (1, 179) degrees, got {self.fov}")
        if self.width < 1 or self.height < 1:
            raise InputError("image size must be positive")
        f = self.forward
        up = np.asarray(self.up, dtype=np.float64)
        if np.linalg.norm(np.cross(f, up)) < 1e-9 * np.linalg.norm(up):
            raise InputError("camera up vector is parallel to the view direction")

    @property
    def forward(self) -> np.ndarray:
        f = np.asarray(self.look_at, dtype=np.float64) - np.asarray(self.eye, dtype=np.float64)
        n = np.linalg.norm(f)
        if n == 0:
            raise InputError("camera eye and look_at coincide")
        return f / n

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Primary rays through pixel centres in row-major order (row 0 = top)."""
        f = self.forward
        right = np.cross(f, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, f)
        th = math.tan(math.radians(self.fov) / 2)
        aspect = self.width / self.height
        xs = (2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0) * th * aspect
        ys = (1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height) * th
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        d = f + xx[..., None] * right + yy[..., None] * up
        d = d.reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(np.asarray(self.eye, dtype=np.float64), d.shape).copy()
        return o, d


def orbit_cameras(n: int = 30, radius: float = 3.2, height: float = 1.6, look_at=(0.0, 0.0, 0.3),
                  **kw) -> list[Camera]:
    """``n`` evenly spaced views on a horizontal circle around ``look_at``."""
    cams = []
    for i in range(n):
        a = 2 * math.pi * i / n
        eye = (look_at[0] + radius * math.sin(a), look_at[1] - radius * math.cos(a), height)
        cams.append(Camera(eye, tuple(look_at), **kw))
    return cams


# ---------------------------------------------------------------------- light


@dataclass(frozen=True, eq=False)
class EnvironmentLight:
    """Per-channel SH coefficients, shape (3, order**2)."""

    coeffs: np.ndarray
    source: str | None = None

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != 3 or int(math.isqrt(c.shape[1])) ** 2 != c.shape[1]:
            raise InputError(f"expected (3, n*n) light coefficients, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InputError("light coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @property
    def order(self) -> int:
        return math.isqrt(self.coeffs.shape[1])

    def channel(self, c: int) -> sh.SHVector:
        return sh.SHVector(self.coeffs[c], self.order)

    @classmethod
    def constant(cls, rgb=(1.0, 1.0, 1.0), order: int = 4) -> EnvironmentLight:
        c = np.zeros((3, order * order))
        c[:, 0] = 2.0 * math.sqrt(math.pi) * np.asarray(rgb, dtype=np.float64)
        return cls(c)


def equirect_directions(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre directions (H, W, 3) and solid angles (H, W); theta measured from +z."""
    if width <= 0 or height <= 0:
        raise InputError("environment map dimensions must be positive")
    theta = np.pi * (np.arange(height) + 0.5) / height
    phi = 2.0 * np.pi * (np.arange(width) + 0.5) / width
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    st = np.sin(th)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=-1)
    dw = (2.0 * np.pi / width) * (np.pi / height) * st
    return dirs, dw


def project_envmap(env: np.ndarray, order: int = 4, source: str | None = None) -> EnvironmentLight:
    env = np.asarray(env, dtype=np.float64)
    if env.ndim != 3 or env.shape[2] != 3 or env.shape[0] <= 0 or env.shape[1] <= 0:
        raise InputError(f"expected an (H, W, 3) environment map, got {env.shape}")
    dirs, dw = equirect_directions(env.shape[1], env.shape[0])
    Y = sh.sh_basis(dirs.reshape(-1, 3), order)
    w = dw.reshape(-1, 1)
    return EnvironmentLight((env.reshape(-1, 3) * w).T @ Y, source)


def procedural_envmap(kind: str = "sky", width: int = 256, height: int = 128) -> np.ndarray:
    """Synthetic equirectangular maps: ``sky`` (gradient + warm sun lobe), ``sunset``,
    ``constant`` (unit radiance) and ``hemisphere`` (upper half 1, lower 0)."""
    dirs, _ = equirect_directions(width, height)
    z = dirs[..., 2]
    if kind == "constant":
        return np.ones((height, width, 3), dtype=np.float32)
    if kind == "hemisphere":
        return np.repeat((z > 0).astype(np.float32)[..., None], 3, axis=2)
    if kind in ("sky", "sunset"):
        sun = np.array([0.5, -0.6, 0.62]) if kind == "sky" else np.array([-0.8, 0.3, 0.2])
        sun /= np.linalg.norm(sun)
        up = np.clip(z, 0.0, 1.0)[..., None]
        horizon = np.array([0.55, 0.6, 0.7]) if kind == "sky" else np.array([0.8, 0.45, 0.3])
        zenith = np.array([0.25, 0.4, 0.8]) if kind == "sky" else np.array([0.2, 0.2, 0.45])
        ground = np.array([0.12, 0.1, 0.08])
        col = np.where(z[..., None] > 0, horizon + (zenith - horizon) * up, ground)
        lobe = np.clip(dirs @ sun, 0.0, 1.0) ** 24
        tint = np.array([1.0, 0.9, 0.7]) if kind == "sky" else np.array([1.0, 0.6, 0.35])
        return (col + 1.8 * lobe[..., None] * tint).astype(np.float32)
    raise InputError(f"unknown procedural environment {kind!r}")


# ------------------------------------------------------------------- material


@dataclass(frozen=True)
class Diffuse:
    albedo: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        _check_albedo(self.albedo)


@dataclass(frozen=True)
class GlossyPhong:
    albedo: tuple = (0.8, 0.8, 0.8)
    exponent: float = 32.0

    def __post_init__(self):
        _check_albedo(self.albedo)
        if not (math.isfinite(self.exponent) and self.exponent > 0):
            raise InputError("Phong exponent must be finite and > 0")

    def lobe(self, order: int) -> sh.ZonalCoeffs:
        """Zonal coefficients of the lobe normalised by (e + 1) / (2 pi)."""
        return sh.phong_zonal_coeffs(self.exponent, order).scaled((self.exponent + 1) / (2 * math.pi))


Material = Diffuse | GlossyPhong


def _check_albedo(a) -> None:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (3,) or np.any(a < 0) or np.any(a > 1):
        raise InputError("albedo must be an RGB triple in [0, 1]")


# -------------------------------------------------------------------- gbuffer


@dataclass(eq=False)
class GBuffer:
    hit: np.ndarray                 # (H, W) bool
    position: np.ndarray            # (H, W, 3)
    normal: np.ndarray              # (H, W, 3) shading normal, zero on misses
    view: np.ndarray                # (H, W, 3) unit vector towards the eye
    triangle: np.ndarray | None = None
    barycentric: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.hit.shape

    @property
    def coverage(self) -> float:
        return float(self.hit.mean())


def trace_gbuffer(surface: Surface, camera: Camera, params: TraceParams | None = None) -> GBuffer:
    o, d = camera.rays()
    hits = ray_intersect(surface, o, d, params=params)
    h, w = camera.height, camera.width
    hit = hits.hit
    normals = np.zeros_like(o)
    tri = bary = None
    if isinstance(surface, TriangleMesh):
        tri = np.where(hit, hits.triangles, -1)
        bary = np.where(hit[:, None], hits.barycentrics, 0.0)
        if hit.any():
            normals[hit] = surface.shading_normals(tri[hit], bary[hit])
        tri, bary = tri.reshape(h, w), bary.reshape(h, w, 3)
    else:
        normals[hit] = hits.normals[hit]
    pos = np.where(hit[:, None], hits.positions, 0.0)
    view = np.where(hit[:, None], -d, 0.0)
    return GBuffer(hit.reshape(h, w), pos.reshape(h, w, 3), normals.reshape(h, w, 3),
                   view.reshape(h, w, 3), tri, bary)


@dataclass(eq=False)
class Fragments:
    """Hit pixels gathered into dense arrays, row-major order."""

    index: np.ndarray
    positions: np.ndarray
    normals: np.ndarray
    views: np.ndarray
    triangles: np.ndarray | None = None
    barycentrics: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.index)


@dataclass(frozen=True, eq=False)
class IndexMap:
    index: np.ndarray
    shape: tuple[int, int]


def pack_fragments(gb: GBuffer) -> tuple[Fragments, IndexMap]:
    flat = np.flatnonzero(gb.hit.ravel())
    take = lambda a: None if a is None else a.reshape(-1, *a.shape[2:])[flat]
    frags = Fragments(flat, take(gb.position), take(gb.normal), take(gb.view),
                      take(gb.triangle), take(gb.barycentric))
    return frags, IndexMap(flat, gb.shape)


def unpack(values: np.ndarray, imap: IndexMap, fill: float = 0.0) -> np.ndarray:
    values = np.asarray(values)
    if len(values) != len(imap.index):
        raise InputError(f"unpack: {len(values)} values for {len(imap.index)} fragments")
    h, w = imap.shape
    out = np.full((h * w,) + values.shape[1:], fill, dtype=values.dtype)
    out[imap.index] = values
    return out.reshape((h, w) + values.shape[1:])


# ------------------------------------------------------------ transfer sources


class TransferSource(Protocol):
    def transfer(self, frags: Fragments) -> np.ndarray: ...


@dataclass(eq=False)
class LearntTransfer:
    model: MlpModel
    evaluations: int = 0

    def transfer(self, frags: Fragments) -> np.ndarray:
        self.evaluations += len(frags)
        if not len(frags):
            return np.zeros((0, self.model.order ** 2))
        return forward(self.model, frags.positions, frags.normals)


@dataclass(eq=False)
class ClusteredTransfer:
    model: object   # partition.ClusteredModel
    evaluations: int = 0

    def transfer(self, frags: Fragments) -> np.ndarray:
        self.evaluations += len(frags)
        return self.model.predict(frags.positions, frags.normals)


@dataclass(eq=False)
class VertexTransfer:
    """Per-vertex baked transfer, barycentrically interpolated (the classic baseline)."""

    mesh: TriangleMesh

    def __post_init__(self):
        if self.mesh.vertex_transfer is None:
            raise InputError("mesh carries no per-vertex baked transfer; run bake_vertices first")

    def transfer(self, frags: Fragments) -> np.ndarray:
        if frags.triangles is None:
            raise InputError("vertex-baked transfer needs a mesh G-buffer")
        vt = self.mesh.vertex_transfer[self.mesh.triangles[frags.triangles]]
        return np.einsum("nk,nkj->nj", frags.barycentrics, vt)


@dataclass(eq=False)
class BruteForceTransfer:
    """Bake transfer on the fly at every fragment (per-pixel ground truth)."""

    surface: Surface
    n_rays: int = DEFAULT_RAYS
    order: int = 4
    seed: int = 0
    params: TraceParams | None = None

    def transfer(self, frags: Fragments) -> np.ndarray:
        return bake_transfers(self.surface, frags.positions, frags.normals, self.n_rays,
                              self.order, self.seed, record_ids=frags.index, params=self.params)


@dataclass(eq=False)
class FixedTransfer:
    values: np.ndarray

    def transfer(self, frags: Fragments) -> np.ndarray:
        if len(self.values) != len(frags):
            raise InputError("fixed transfer length does not match fragment count")
        return self.values


def as_source(obj) -> TransferSource:
    if hasattr(obj, "transfer"):
        return obj
    if isinstance(obj, MlpModel):
        return LearntTransfer(obj)
    if isinstance(obj, TriangleMesh):
        return VertexTransfer(obj)
    if isinstance(obj, np.ndarray):
        return FixedTransfer(obj)
    if hasattr(obj, "predict"):
        return ClusteredTransfer(obj)
    raise InputError(f"cannot use {type(obj).__name__} as a transfer source")


# ---------------------------------------------------------------------- shade


def shade_fragments(T: np.ndarray, normals: np.ndarray, views: np.ndarray, light: EnvironmentLight,
                    material: Material, tau: sh.TripleProductTensor | None = None) -> np.ndarray:
    """RGB radiance (M, 3) for transfer vectors ``T`` (M, n*n)."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape[1] != light.coeffs.shape[1]:
        raise InputError(f"transfer has {T.shape[1]} coefficients, light has {light.coeffs.shape[1]}")
    albedo = np.asarray(material.albedo, dtype=np.float64)
    if isinstance(material, Diffuse):
        rgb = (T @ light.coeffs.T) * (albedo / math.pi)
    else:
        if tau is None:
            raise InputError("glossy shading needs the triple product tensor")
        if tau.order != light.order:
            raise InputError("tensor order does not match light order")
        scale = sh.band_scale(material.lobe(light.order))
        r = 2.0 * np.einsum("ij,ij->i", normals, views)[:, None] * normals - views
        r /= np.linalg.norm(r, axis=1, keepdims=True)
        Y = sh.sh_basis(r, light.order) * scale if len(r) else np.zeros((0, T.shape[1]))
        rgb = np.empty((len(T), 3))
        for c in range(3):
            H = T @ tau.light_matrix(light.coeffs[c])
            rgb[:, c] = albedo[c] * np.einsum("ij,ij->i", H, Y)
    return np.maximum(rgb, 0.0)


def shade(gb: GBuffer, source, light: EnvironmentLight, material: Material,
          tau: sh.TripleProductTensor | None = None) -> Image:
    frags, imap = pack_fragments(gb)
    T = as_source(source).transfer(frags)
    rgb = shade_fragments(T, frags.normals, frags.views, light, material, tau)
    return Image(unpack(rgb.astype(np.float32), imap))


def fragment_transfer(gb: GBuffer, source) -> np.ndarray:
    """Transfer vectors for each hit pixel (row-major), without shading."""
    frags, _ = pack_fragments(gb)
    return as_source(source).transfer(frags)


@dataclass
class CompareResult:
    learnt: Image
    reference: Image
    metrics: "object"
    transfers: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)


def render_compare(gb: GBuffer, learnt, reference, light: EnvironmentLight, material: Material,
                   tau: sh.TripleProductTensor | None = None) -> CompareResult:
    """Shade one G-buffer with both transfer sources and score learnt against reference."""
    from .metrics import compare_images

    frags, imap = pack_fragments(gb)
    t_learnt = as_source(learnt).transfer(frags)
    t_ref = as_source(reference).transfer(frags)
    imgs = [Image(unpack(shade_fragments(t, frags.normals, frags.views, light, material, tau)
                         .astype(np.float32), imap)) for t in (t_learnt, t_ref)]
    return CompareResult(imgs[0], imgs[1], compare_images(imgs[0], imgs[1]), (t_learnt, t_ref))


def reference_source(surface: Surface, mode: str = "bruteforce", n_rays: int = DEFAULT_RAYS,
                     order: int = 4, seed: int = 0, params: TraceParams | None = None):
    if mode == "bruteforce":
        return BruteForceTransfer(surface, n_rays, order, seed, params)
    if mode == "vertex":
        if not isinstance(surface, TriangleMesh):
            raise InputError("vertex reference needs a triangle mesh")
        from .bake import bake_vertices

        mesh = surface if surface.vertex_transfer is not None else bake_vertices(surface, n_rays, order, seed)
        return VertexTransfer(mesh)
    raise InputError(f"unknown reference mode {mode!r}")

"""Real spherical harmonics: basis, projection, triple products and zonal kernels.

Convention: orthonormal real SH without the Condon-Shortley phase, flat index
``i = l*(l+1) + m``.  Band 1 is ``c*(y, z, x)`` with ``c = sqrt(3/(4*pi))``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numba
import numpy as np
from scipy import integrate, special

from .errors import DataError, FormatError, InputError

MAX_ORDER = 8
UNIT_TOL = 1e-6
TAU_EPS = 1e-6
Y00 = 0.5 / math.sqrt(math.pi)


def sh_index(l: int, m: int) -> int:
    return l * (l + 1) + m


def norm_table(order: int) -> np.ndarray:
    """Normalisation constants K_lm (times sqrt 2 for m != 0) in flat index order."""
    k = np.zeros(order * order)
    for l in range(order):
        for m in range(l + 1):
            v = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
            if m:
                v *= math.sqrt(2.0)
                k[sh_index(l, -m)] = v
            k[sh_index(l, m)] = v
    return k


@numba.njit(cache=True)
def sh_eval_into(x, y, z, order, knorm, out):
    # Q_l^m = P_l^m / sin^m(theta); (c + i s) = (x + i y)^m carries the azimuth.
    c = 1.0
    s = 0.0
    qmm = 1.0
    for m in range(order):
        if m > 0:
            qmm *= 2 * m - 1
        q2 = 0.0
        q1 = 0.0
        for l in range(m, order):
            if l == m:
                q = qmm
            elif l == m + 1:
                q = z * (2 * m + 1) * qmm
            else:
                q = ((2 * l - 1) * z * q1 - (l + m - 1) * q2) / (l - m)
            q2 = q1
            q1 = q
            base = l * (l + 1)
            if m == 0:
                out[base] = knorm[base] * q
            else:
                out[base + m] = knorm[base + m] * q * c
                out[base - m] = knorm[base - m] * q * s
        c, s = c * x - s * y, c * y + s * x


@numba.njit(cache=True)
def _sh_eval_many(dirs, order, knorm):
    n = dirs.shape[0]
    out = np.empty((n, order * order))
    for i in range(n):
        sh_eval_into(dirs[i, 0], dirs[i, 1], dirs[i, 2], order, knorm, out[i])
    return out


def _check_order(order: int, hi: int = MAX_ORDER) -> None:
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= hi:
        raise InputError(f"SH order must be in [1, {hi}], got {order!r}")


def _check_unit(dirs: np.ndarray) -> None:
    norms = np.linalg.norm(dirs, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= UNIT_TOL):
        raise InputError("direction(s) must be unit length within 1e-6")


def sh_basis(dirs, order: int = 4) -> np.ndarray:
    """Evaluate all ``order**2`` basis functions at one direction or an (N, 3) batch."""
    _check_order(order)
    d = np.asarray(dirs, dtype=np.float64)
    _check_unit(d)
    single = d.ndim == 1
    d2 = np.ascontiguousarray(d.reshape(-1, 3))
    out = _sh_eval_many(d2, order, norm_table(order))
    return out[0] if single else out


def sh_basis_eval(dir, order: int = 4) -> np.ndarray:
    return sh_basis(np.asarray(dir, dtype=np.float64).reshape(3), order)


@dataclass(frozen=True)
class SHVector:
    coeffs: np.ndarray
    order: int = 4

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if c.size != self.order * self.order:
            raise InputError(f"expected {self.order ** 2} coefficients, got {c.size}")
        if not np.all(np.isfinite(c)):
            raise InputError("SH coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, order: int = 4) -> SHVector:
        return cls(np.zeros(order * order), order)

    @classmethod
    def basis(cls, index: int, order: int = 4, scale: float = 1.0) -> SHVector:
        c = np.zeros(order * order)
        c[index] = scale
        return cls(c, order)

    def __add__(self, other: SHVector) -> SHVector:
        _same_order(self, other)
        return SHVector(self.coeffs + other.coeffs, self.order)

    def __mul__(self, k: float) -> SHVector:
        return SHVector(self.coeffs * k, self.order)

    __rmul__ = __mul__

    def __len__(self) -> int:
        return self.coeffs.size


@dataclass(frozen=True)
class ZonalCoeffs:
    values: np.ndarray
    order: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size != self.order:
            raise InputError(f"expected {self.order} zonal values, got {v.size}")
        object.__setattr__(self, "values", v)

    def scaled(self, k: float) -> ZonalCoeffs:
        return ZonalCoeffs(self.values * k, self.order)


def _same_order(*vs) -> int:
    orders = {v.order for v in vs}
    if len(orders) != 1:
        raise InputError(f"SH order mismatch: {sorted(orders)}")
    return orders.pop()


# ---------------------------------------------------------------- quadrature


def uniform_sphere(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Map (u, v) in [0,1)^2 to the sphere; area preserving (z uniform, phi uniform)."""
    z = 1.0 - 2.0 * u
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = 2.0 * np.pi * v
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


@dataclass(frozen=True)
class Quadrature:
    """Spherical quadrature rule.

    ``kind``:
      * ``"mc"``      stratified uniform-sphere Monte Carlo, weight 4*pi/N.
      * ``"latlong"`` midpoint latitude-longitude product rule.
      * ``"gauss"``   Gauss-Legendre in cos(theta) times uniform azimuth;
                      ``n`` is the number of cos(theta) nodes and the rule is
                      exact for polynomials of degree < 2n.
    """

    kind: str = "mc"
    n: int = 262144
    seed: int = 0

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "mc":
            nz = max(1, int(round(math.sqrt(self.n))))
            nphi = max(1, self.n // nz)
            rng = np.random.default_rng(self.seed)
            iz, ip = np.meshgrid(np.arange(nz), np.arange(nphi), indexing="ij")
            u = (iz.ravel() + rng.random(nz * nphi)) / nz
            v = (ip.ravel() + rng.random(nz * nphi)) / nphi
            dirs = uniform_sphere(u, v)
            return dirs, np.full(len(dirs), 4.0 * np.pi / len(dirs))
        if self.kind == "latlong":
            nt = max(1, int(round(math.sqrt(self.n / 2))))
            npf = 2 * nt
            theta = np.pi * (np.arange(nt) + 0.5) / nt
            phi = 2.0 * np.pi * (np.arange(npf) + 0.5) / npf
            th, ph = np.meshgrid(theta, phi, indexing="ij")
            st = np.sin(th)
            dirs = np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=-1).reshape(-1, 3)
            w = (st * (np.pi / nt) * (2.0 * np.pi / npf)).ravel()
            return dirs, w
        if self.kind == "gauss":
            zs, wz = np.polynomial.legendre.leggauss(self.n)
            npf = 2 * self.n
            phi = 2.0 * np.pi * (np.arange(npf) + 0.5) / npf
            zz, ph = np.meshgrid(zs, phi, indexing="ij")
            r = np.sqrt(1.0 - zz * zz)
            dirs = np.stack([r * np.cos(ph), r * np.sin(ph), zz], axis=-1).reshape(-1, 3)
            w = np.repeat(wz * (2.0 * np.pi / npf), npf)
            return dirs, w
        raise InputError(f"unknown quadrature kind {self.kind!r}")


def exact_quadrature(degree: int) -> Quadrature:
    """Smallest Gauss product rule integrating polynomials of total degree <= degree exactly."""
    return Quadrature("gauss", n=degree // 2 + 1)


def project_function(f: Callable[[np.ndarray], np.ndarray], order: int = 4,
                     quad: Quadrature | None = None) -> SHVector:
    """Project a vectorised spherical function ``f((N,3)) -> (N,)`` onto the SH basis."""
    _check_order(order)
    dirs, w = (quad or Quadrature()).nodes()
    vals = np.asarray(f(dirs), dtype=np.float64).reshape(-1)
    if vals.shape[0] != dirs.shape[0]:
        raise DataError("sampled function returned the wrong number of values")
    if not np.all(np.isfinite(vals)):
        raise DataError("sampled function returned non-finite values")
    Y = _sh_eval_many(np.ascontiguousarray(dirs), order, norm_table(order))
    return SHVector(Y.T @ (vals * w), order)


# ------------------------------------------------------------ triple product


@dataclass(frozen=True)
class TripleProductTensor:
    """tau_ijk = integral of y_i y_j y_k, stored dense with sub-epsilon entries zeroed."""

    order: int
    dense: np.ndarray = field(repr=False)

    @property
    def entries(self) -> dict[tuple[int, int, int], float]:
        idx = np.argwhere(self.dense != 0.0)
        return {tuple(int(a) for a in ijk): float(self.dense[tuple(ijk)]) for ijk in idx}

    def __getitem__(self, ijk) -> float:
        return float(self.dense[ijk])

    def light_matrix(self, light: np.ndarray) -> np.ndarray:
        """M[i, k] = sum_j tau_ijk L_j, so transferred radiance is ``T @ M``."""
        return np.einsum("ijk,j->ik", self.dense, np.asarray(light, dtype=np.float64))

    def save(self, path) -> None:
        nz = np.argwhere(self.dense != 0.0)
        with open(path, "wb") as fh:
            fh.write(b"TPT1")
            fh.write(struct.pack("<IQ", self.order, len(nz)))
            rec = np.zeros(len(nz), dtype=[("i", "<u2"), ("j", "<u2"), ("k", "<u2"), ("v", "<f8")])
            rec["i"], rec["j"], rec["k"] = nz[:, 0], nz[:, 1], nz[:, 2]
            rec["v"] = self.dense[nz[:, 0], nz[:, 1], nz[:, 2]]
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> TripleProductTensor:
        raw = Path(path).read_bytes()
        if raw[:4] != b"TPT1":
            raise FormatError(f"{path}: bad magic {raw[:4]!r}")
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated header")
        order, count = struct.unpack_from("<IQ", raw, 4)
        dt = np.dtype([("i", "<u2"), ("j", "<u2"), ("k", "<u2"), ("v", "<f8")])
        if len(raw) != 16 + count * dt.itemsize:
            raise FormatError(f"{path}: expected {count} records")
        rec = np.frombuffer(raw, dtype=dt, offset=16, count=count)
        n2 = order * order
        if count and max(rec["i"].max(), rec["j"].max(), rec["k"].max()) >= n2:
            raise FormatError(f"{path}: index out of range for order {order}")
        dense = np.zeros((n2, n2, n2))
        dense[rec["i"], rec["j"], rec["k"]] = rec["v"]
        return cls(order, dense)


def triple_product_tensor(order: int = 4, quad: Quadrature | None = None,
                          eps: float = TAU_EPS) -> TripleProductTensor:
    """Integrate all triple products of the basis; default rule is exact for band-limited products."""
    _check_order(order, hi=6)
    quad = quad or exact_quadrature(3 * (order - 1))
    dirs, w = quad.nodes()
    Y = _sh_eval_many(np.ascontiguousarray(dirs), order, norm_table(order))
    n2 = order * order
    pair = (Y[:, :, None] * Y[:, None, :]).reshape(len(Y), n2 * n2)
    tau = ((Y * w[:, None]).T @ pair).reshape(n2, n2, n2)
    tau = (tau + tau.transpose(0, 2, 1) + tau.transpose(1, 0, 2)
           + tau.transpose(1, 2, 0) + tau.transpose(2, 0, 1) + tau.transpose(2, 1, 0)) / 6.0
    # copy the sorted-index entry everywhere so permutations agree bit for bit
    ijk = np.sort(np.indices(tau.shape).reshape(3, -1), axis=0)
    tau = tau[ijk[0], ijk[1], ijk[2]].reshape(tau.shape)
    tau[np.abs(tau) <= eps] = 0.0
    return TripleProductTensor(order, tau)


def load_or_build_tensor(order: int = 4, cache: str | Path | None = None) -> TripleProductTensor:
    if cache is not None and Path(cache).exists():
        tau = TripleProductTensor.load(cache)
        if tau.order != order:
            raise FormatError(f"{cache}: cached order {tau.order} != {order}")
        return tau
    tau = triple_product_tensor(order)
    if cache is not None:
        tau.save(cache)
    return tau


def transferred_radiance(T: SHVector, L: SHVector, tau: TripleProductTensor) -> SHVector:
    if T.order != L.order or T.order != tau.order:
        raise InputError(f"SH order mismatch: T={T.order} L={L.order} tau={tau.order}")
    return SHVector(T.coeffs @ tau.light_matrix(L.coeffs), T.order)


def diffuse_shade(T: SHVector, L: SHVector) -> float:
    _same_order(T, L)
    return float(np.dot(T.coeffs, L.coeffs))


# ------------------------------------------------------------- zonal kernels


def phong_zonal_coeffs(exponent: float, order: int = 4) -> ZonalCoeffs:
    """Zonal projection of the unnormalised lobe max(cos, 0)**exponent about +z."""
    if not math.isfinite(exponent) or exponent < 0:
        raise InputError(f"Phong exponent must be finite and >= 0, got {exponent}")
    if order < 1:
        raise InputError("order must be >= 1")
    vals = np.empty(order)
    for l in range(order):
        nl = math.sqrt((2 * l + 1) / (4 * math.pi))
        integral, _ = integrate.quad(lambda t: t ** exponent * special.eval_legendre(l, t),
                                     0.0, 1.0, limit=200, epsabs=1e-13, epsrel=1e-11)
        vals[l] = 2.0 * math.pi * nl * integral
    return ZonalCoeffs(vals, order)


def zonal_convolve(f: SHVector, h: ZonalCoeffs) -> SHVector:
    if f.order != h.order:
        raise InputError(f"SH order mismatch: f={f.order} h={h.order}")
    return SHVector(f.coeffs * band_scale(h), f.order)


def band_scale(h: ZonalCoeffs) -> np.ndarray:
    """Per-coefficient multiplier sqrt(4pi/(2l+1)) h_l expanded to flat index order."""
    ls = np.repeat(np.arange(h.order), 2 * np.arange(h.order) + 1)
    return np.sqrt(4.0 * np.pi / (2 * ls + 1)) * h.values[ls]


def sh_eval_expansion(f: SHVector, dir) -> float:
    return float(sh_basis_eval(dir, f.order) @ f.coeffs)

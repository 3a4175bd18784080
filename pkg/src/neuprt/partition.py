"""Grid partitioning of large scenes into clusters of cells, one small network per cluster."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bake import TransferDataset, dataset_scale, normalization_for
from .errors import DataError, FormatError, InputError, RoutingError
from .nn import (MlpConfig, MlpModel, PositionalEncodingConfig, TrainConfig, forward,
                 model_from_dict, model_to_dict, train)

log = logging.getLogger(__name__)

DEFAULT_DELTA = 0.1
VAR_RTOL = 1e-12


@dataclass(frozen=True)
class PartitionGrid:
    """Axis-aligned grid over the scene box.

    Cells are half-open ``[lo, hi)`` per axis, except that the last cell on each
    axis also owns the box's max face, so routing is total over the closed box.
    """

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    dims: tuple[int, int, int]
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        dims = tuple(int(v) for v in self.dims)
        if len(lo) != 3 or len(hi) != 3 or len(dims) != 3:
            raise InputError("grid needs 3D bounds and three dimensions")
        if not all(h > l for l, h in zip(lo, hi)):
            raise InputError(f"empty grid box {lo} .. {hi}")
        if min(dims) < 1:
            raise InputError(f"grid dimensions must be >= 1, got {dims}")
        if not 0.0 <= self.delta < 0.5:
            raise InputError(f"delta must be in [0, 0.5), got {self.delta}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "delta", float(self.delta))

    @classmethod
    def around(cls, positions, dims, delta: float = DEFAULT_DELTA, pad: float = 0.01) -> PartitionGrid:
        """Grid over the bounding box of ``positions`` grown by ``pad`` times its diagonal,
        so surface points between samples still route."""
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if not len(p):
            raise InputError("cannot fit a grid around zero points")
        lo, hi = p.min(axis=0), p.max(axis=0)
        margin = pad * float(np.linalg.norm(hi - lo)) if pad > 0 else 0.0
        lo, hi = lo - margin, hi + margin
        flat = hi <= lo
        lo, hi = np.where(flat, lo - 0.5, lo), np.where(flat, hi + 0.5, hi)
        return cls(tuple(lo), tuple(hi), tuple(dims), delta)

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.dims)

    def index(self, ix, iy, iz):
        nx, ny, _ = self.dims
        return ix + nx * (iy + ny * iz)

    def coords(self, cell: int) -> tuple[int, int, int]:
        nx, ny, _ = self.dims
        return cell % nx, (cell // nx) % ny, cell // (nx * ny)

    def cell_box(self, cell: int) -> tuple[np.ndarray, np.ndarray]:
        c = np.array(self.coords(cell))
        lo = np.array(self.lo) + c * self.extent
        return lo, lo + self.extent

    def expanded_box(self, cell: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.cell_box(cell)
        d = self.delta * self.extent
        return lo - d, hi + d

    def neighbors(self, cell: int) -> list[int]:
        c = self.coords(cell)
        out = []
        for axis in range(3):
            for step in (-1, 1):
                q = list(c)
                q[axis] += step
                if 0 <= q[axis] < self.dims[axis]:
                    out.append(self.index(*q))
        return sorted(out)

    def _cell_coords(self, p: np.ndarray) -> np.ndarray:
        lo, hi = np.array(self.lo), np.array(self.hi)
        outside = np.any((p < lo) | (p > hi) | ~np.isfinite(p), axis=1)
        if np.any(outside):
            bad = p[np.argmax(outside)]
            raise RoutingError(f"{int(outside.sum())} point(s) outside the grid box, e.g. {bad.tolist()}")
        c = np.floor((p - lo) / self.extent).astype(np.int64)
        return np.minimum(c, np.array(self.dims) - 1)

    def cell_of(self, p) -> np.ndarray | int:
        q = np.asarray(p, dtype=np.float64)
        c = self._cell_coords(q.reshape(-1, 3))
        idx = self.index(c[:, 0], c[:, 1], c[:, 2])
        return int(idx[0]) if q.ndim == 1 else idx

    def to_dict(self) -> dict:
        return {"aabb": [list(self.lo), list(self.hi)], "dims": list(self.dims), "delta": self.delta}

    @classmethod
    def from_dict(cls, d: dict) -> PartitionGrid:
        try:
            return cls(tuple(d["aabb"][0]), tuple(d["aabb"][1]), tuple(d["dims"]), d["delta"])
        except (KeyError, IndexError, TypeError) as e:
            raise FormatError(f"malformed grid object: {e}") from None


def parse_dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise InputError(f"grid dims must look like 3x2x2, got {text!r}") from None
    if len(dims) != 3:
        raise InputError(f"grid dims must look like 3x2x2, got {text!r}")
    return dims


# ---------------------------------------------------------------- assignment


def assign_indices(positions, grid: PartitionGrid) -> list[np.ndarray]:
    """Record indices per cell: the containing cell plus every cell whose
    delta-expanded box holds the point strictly inside."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    home = grid._cell_coords(p)
    home_idx = grid.index(home[:, 0], home[:, 1], home[:, 2])
    lists: list[list[np.ndarray]] = [[] for _ in range(grid.n_cells)]
    dims = np.array(grid.dims)
    ext = grid.extent
    lo0 = np.array(grid.lo)
    d = grid.delta * ext
    for off in itertools.product((-1, 0, 1), repeat=3):
        c = home + np.array(off)
        valid = np.all((c >= 0) & (c < dims), axis=1)
        if off == (0, 0, 0):
            sel = np.ones(len(p), dtype=bool)
        else:
            clo = lo0 + c * ext - d
            chi = clo + ext + 2 * d
            sel = valid & np.all((p > clo) & (p < chi), axis=1)
        if not sel.any():
            continue
        rows = np.nonzero(sel)[0]
        cells = home_idx[rows] if off == (0, 0, 0) else grid.index(c[rows, 0], c[rows, 1], c[rows, 2])
        order = np.argsort(cells, kind="stable")
        rows, cells = rows[order], cells[order]
        bounds = np.searchsorted(cells, np.arange(grid.n_cells + 1))
        for cell in range(grid.n_cells):
            if bounds[cell + 1] > bounds[cell]:
                lists[cell].append(rows[bounds[cell]:bounds[cell + 1]])
    return [np.sort(np.concatenate(l)) if l else np.zeros(0, dtype=np.int64) for l in lists]


def _box_dataset(ds: TransferDataset, idx: np.ndarray, lo, hi) -> TransferDataset:
    sub = ds.subset(idx)
    center, half = normalization_for(lo, hi, pad=0.0)
    return TransferDataset(sub.positions, sub.normals, sub.transfers, center, half,
                           dataset_scale(sub.transfers), ds.order, ds.scene_id)


def assign_samples(ds: TransferDataset, grid: PartitionGrid) -> list[TransferDataset]:
    """Per-cell datasets (overlap inclusive), each normalised to its expanded cell box."""
    members = assign_indices(ds.positions, grid)
    return [_box_dataset(ds, idx, *grid.expanded_box(c)) for c, idx in enumerate(members)]


# ---------------------------------------------------------------- clustering


@dataclass
class CellStats:
    """Per-cell transfer moments: count, coefficient sum, and sum of squared
    deviations from the mean (so variance = m2 / count is the covariance trace)."""

    count: np.ndarray      # (C,)
    mean: np.ndarray       # (C, K)
    m2: np.ndarray         # (C,)

    @property
    def variance(self) -> np.ndarray:
        return np.where(self.count > 0, self.m2 / np.maximum(self.count, 1), 0.0)


def cell_stats(ds: TransferDataset, grid: PartitionGrid) -> CellStats:
    """Moments over each cell's own samples (no overlap)."""
    cells = np.atleast_1d(grid.cell_of(ds.positions.astype(np.float64))) if len(ds) else np.zeros(0, int)
    t = ds.transfers.astype(np.float64)
    k = t.shape[1]
    count = np.zeros(grid.n_cells)
    mean = np.zeros((grid.n_cells, k))
    m2 = np.zeros(grid.n_cells)
    for c in range(grid.n_cells):
        tc = t[cells == c]
        if len(tc):
            count[c] = len(tc)
            mean[c] = tc.mean(axis=0)
            m2[c] = ((tc - mean[c]) ** 2).sum()
    return CellStats(count, mean, _flush(m2, count, mean))


def _flush(m2, count, mean):
    # treat rounding-level spread of a constant signal as exactly zero
    ref = np.maximum(count, 1) * np.maximum((mean ** 2).sum(axis=-1), 1e-300)
    return np.where(m2 <= VAR_RTOL * ref, 0.0, m2)


def _merge(a: tuple, b: tuple) -> tuple:
    na, ma, va = a
    nb, mb, vb = b
    n = na + nb
    if n == 0:
        return 0.0, ma, 0.0
    mean = (na * ma + nb * mb) / n
    m2 = va + vb + float(((ma - mb) ** 2).sum()) * na * nb / n
    return n, mean, float(_flush(np.array(m2), np.array(n), mean))


def cluster_cells(stats: CellStats, grid: PartitionGrid, theta: float,
                  min_clusters: int = 1) -> np.ndarray:
    """Greedy merging of face-adjacent clusters by smallest merged total variance.

    Stops when the cheapest merge would exceed ``theta`` or only ``min_clusters``
    remain.  Ties go to the pair with the lowest cell indices.  Returns the
    cell -> cluster map with clusters numbered by their lowest cell.
    """
    if min_clusters < 1:
        raise InputError("min_clusters must be >= 1")
    members = {c: [c] for c in range(grid.n_cells)}
    moments = {c: (float(stats.count[c]), stats.mean[c], float(stats.m2[c])) for c in members}
    owner = list(range(grid.n_cells))
    while len(members) > min_clusters:
        best = None
        for a in sorted(members):
            adj = {owner[n] for c in members[a] for n in grid.neighbors(c)} - {a}
            for b in sorted(x for x in adj if x > a):
                n, _, m2 = _merge(moments[a], moments[b])
                var = m2 / n if n else 0.0
                key = (var, a, b)
                if best is None or key < best:
                    best = key
        if best is None or best[0] > theta:
            break
        _, a, b = best
        moments[a] = _merge(moments[a], moments[b])
        for c in members[b]:
            owner[c] = a
        members[a] = sorted(members[a] + members.pop(b))
        del moments[b]
        log.debug("merged cluster %d into %d (variance %.4g)", b, a, best[0])
    return _relabel(np.array(owner))


def _relabel(owner: np.ndarray) -> np.ndarray:
    ids = {}
    out = np.empty_like(owner)
    for c, o in enumerate(owner):
        out[c] = ids.setdefault(int(o), len(ids))
    return out


def absorb_empty(cell_map: np.ndarray, members: list[np.ndarray], grid: PartitionGrid) -> np.ndarray:
    """Fold clusters without samples into an adjacent non-empty cluster."""
    cell_map = cell_map.copy()
    sizes = lambda k: sum(len(members[c]) for c in np.nonzero(cell_map == k)[0])
    if all(sizes(k) == 0 for k in np.unique(cell_map)):
        raise DataError("partition has no samples at all")
    changed = True
    while changed:
        changed = False
        for k in np.unique(cell_map):
            cells = np.nonzero(cell_map == k)[0]
            if len(cells) == 0 or sizes(k) > 0:
                continue
            adj = sorted({int(cell_map[n]) for c in cells for n in grid.neighbors(c)} - {int(k)},
                         key=lambda j: np.nonzero(cell_map == j)[0][0])
            full = [j for j in adj if sizes(j) > 0]
            if full:
                cell_map[cells] = full[0]
                changed = True
    return _relabel(cell_map)


# ------------------------------------------------------------------ training


@dataclass(eq=False)
class ClusteredModel:
    grid: PartitionGrid
    cell_cluster: np.ndarray          # (n_cells,) cluster id per cell
    models: list[MlpModel] = field(default_factory=list)

    def __post_init__(self):
        self.cell_cluster = np.asarray(self.cell_cluster, dtype=np.int64)
        if self.cell_cluster.shape != (self.grid.n_cells,):
            raise InputError("every cell needs a cluster")
        if set(np.unique(self.cell_cluster).tolist()) != set(range(len(self.models))):
            raise InputError("cluster ids must be 0..K-1 with one model each")

    @property
    def n_clusters(self) -> int:
        return len(self.models)

    @property
    def order(self) -> int:
        return self.models[0].order

    def cluster_of(self, p):
        return self.cell_cluster[self.grid.cell_of(p)]

    def cells(self, k: int) -> list[int]:
        return np.nonzero(self.cell_cluster == k)[0].tolist()

    def predict(self, p, n) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        single = p.ndim == 1
        p2, n2 = p.reshape(-1, 3), n.reshape(-1, 3)
        route = np.atleast_1d(self.cell_cluster[self.grid.cell_of(p2)])
        out = np.zeros((len(p2), self.order ** 2))
        for k in np.unique(route):
            sel = route == k
            out[sel] = forward(self.models[k], p2[sel], n2[sel])
        return out[0] if single else out


def cluster_datasets(ds: TransferDataset, grid: PartitionGrid, cell_map: np.ndarray,
                     members: list[np.ndarray] | None = None) -> list[TransferDataset]:
    """Training set per cluster: union of its cells' overlap-inclusive samples,
    normalised to the union of their expanded boxes."""
    if members is None:
        members = assign_indices(ds.positions, grid)
    out = []
    for k in range(int(cell_map.max()) + 1):
        cells = np.nonzero(cell_map == k)[0]
        idx = np.unique(np.concatenate([members[c] for c in cells]))
        boxes = [grid.expanded_box(c) for c in cells]
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        out.append(_box_dataset(ds, idx, lo, hi))
    return out


def train_clustered(ds: TransferDataset, grid: PartitionGrid, theta: float,
                    mlp_cfg: MlpConfig = MlpConfig(), cfg: TrainConfig = TrainConfig(),
                    pe: PositionalEncodingConfig = PositionalEncodingConfig(),
                    min_clusters: int = 1) -> ClusteredModel:
    members = assign_indices(ds.positions, grid)
    cell_map = cluster_cells(cell_stats(ds, grid), grid, theta, min_clusters)
    cell_map = absorb_empty(cell_map, members, grid)
    models = []
    for k, cds in enumerate(cluster_datasets(ds, grid, cell_map, members)):
        log.info("cluster %d: %d cells, %d samples", k, int((cell_map == k).sum()), len(cds))
        model, _ = train(cds, mlp_cfg, cfg, pe)
        models.append(model)
    return ClusteredModel(grid, cell_map, models)


# ---------------------------------------------------------------- serialise


def clustered_to_dict(cm: ClusteredModel) -> dict:
    return {"grid": cm.grid.to_dict(),
            "clusters": [{"cells": cm.cells(k), "model": model_to_dict(m)}
                         for k, m in enumerate(cm.models)]}


def clustered_from_dict(d: dict) -> ClusteredModel:
    if "grid" not in d or "clusters" not in d:
        raise FormatError("clustered model needs 'grid' and 'clusters'")
    grid = PartitionGrid.from_dict(d["grid"])
    cell_map = np.full(grid.n_cells, -1, dtype=np.int64)
    models = []
    for k, c in enumerate(d["clusters"]):
        if "cells" not in c or "model" not in c:
            raise FormatError(f"cluster {k} needs 'cells' and 'model'")
        cell_map[np.asarray(c["cells"], dtype=np.int64)] = k
        models.append(model_from_dict(c["model"]))
    if np.any(cell_map < 0):
        raise FormatError("clustered model leaves cells unmapped")
    return ClusteredModel(grid, cell_map, models)


def save_clustered(cm: ClusteredModel, path) -> None:
    Path(path).write_text(json.dumps(clustered_to_dict(cm)))


def load_clustered(path) -> ClusteredModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    return clustered_from_dict(d)

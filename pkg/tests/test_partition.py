import logging
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuprt import nn
from neuprt.bake import TransferDataset
from neuprt.errors import DataError, FormatError, InputError, RoutingError
from neuprt.partition import (CellStats, ClusteredModel, PartitionGrid, absorb_empty, assign_indices,
                              assign_samples, cell_stats, cluster_cells, cluster_datasets,
                              clustered_from_dict, clustered_to_dict, load_clustered, parse_dims,
                              save_clustered, train_clustered)

UNIT = PartitionGrid((0, 0, 0), (1, 1, 1), (2, 2, 2), 0.1)


def make_dataset(p, t):
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    n = np.tile([0.0, 0.0, 1.0], (len(p), 1))
    lo, hi = p.min(axis=0), p.max(axis=0)
    return TransferDataset(p, n, t, (lo + hi) / 2, float((hi - lo).max() / 2) or 1.0,
                           float(np.abs(t).max()) or 1.0)


def is_connected(cells, grid):
    cells = set(cells)
    start = min(cells)
    seen, todo = {start}, deque([start])
    while todo:
        c = todo.popleft()
        for n in grid.neighbors(c):
            if n in cells and n not in seen:
                seen.add(n)
                todo.append(n)
    return seen == cells


class TestGrid:
    def test_validation(self):
        with pytest.raises(InputError):
            PartitionGrid((0, 0, 0), (1, 1, 1), (2, 2, 2), 0.5)
        with pytest.raises(InputError):
            PartitionGrid((0, 0, 0), (0, 1, 1), (1, 1, 1))
        with pytest.raises(InputError):
            PartitionGrid((0, 0, 0), (1, 1, 1), (0, 1, 1))

    def test_cells_tile_box(self):
        g = PartitionGrid((-1, 0, 2), (3, 1, 5), (4, 2, 3))
        vol = sum(np.prod(g.cell_box(c)[1] - g.cell_box(c)[0]) for c in range(g.n_cells))
        assert vol == pytest.approx(4 * 1 * 3)
        for c in range(g.n_cells):
            assert g.index(*g.coords(c)) == c

    def test_index_layout(self):
        g = PartitionGrid((0, 0, 0), (3, 2, 2), (3, 2, 2))
        assert g.cell_of([2.5, 0.5, 0.5]) == 2
        assert g.cell_of([0.5, 1.5, 0.5]) == 3
        assert g.cell_of([0.5, 0.5, 1.5]) == 6

    def test_half_open_routing(self):
        assert UNIT.cell_of([0.5, 0.2, 0.2]) == 1     # shared face goes to the upper cell
        assert UNIT.cell_of([1.0, 1.0, 1.0]) == 7     # max face belongs to the last cell
        assert UNIT.cell_of([0.0, 0.0, 0.0]) == 0

    @pytest.mark.parametrize("p", [[1.0001, 0.5, 0.5], [-1e-9, 0.5, 0.5], [np.nan, 0.5, 0.5]])
    def test_outside_raises(self, p):
        with pytest.raises(RoutingError):
            UNIT.cell_of(p)

    def test_neighbors(self):
        g = PartitionGrid((0, 0, 0), (3, 3, 3), (3, 3, 3))
        assert g.neighbors(13) == [4, 10, 12, 14, 16, 22]
        assert g.neighbors(0) == [1, 3, 9]

    @pytest.mark.parametrize("text,dims", [("3x2x2", (3, 2, 2)), ("1X1X4", (1, 1, 4))])
    def test_parse_dims(self, text, dims):
        assert parse_dims(text) == dims

    @pytest.mark.parametrize("text", ["3x2", "axbxc", "3x2x2x1"])
    def test_parse_dims_bad(self, text):
        with pytest.raises(InputError):
            parse_dims(text)

    def test_around_contains_points(self):
        p = np.random.default_rng(0).uniform(-2, 3, (100, 3))
        g = PartitionGrid.around(p, (3, 2, 2))
        assert np.all(np.array(g.lo) < p.min(axis=0)) and np.all(np.array(g.hi) > p.max(axis=0))


class TestAssignment:
    def test_center_single_cell(self):
        members = assign_indices([[0.25, 0.25, 0.25]], UNIT)
        assert [c for c, m in enumerate(members) if len(m)] == [0]

    def test_near_face_two_cells(self):
        # 0.03 from the x = 0.5 face, inside the 0.05 overlap band only along x
        members = assign_indices([[0.47, 0.25, 0.25]], UNIT)
        assert [c for c, m in enumerate(members) if len(m)] == [0, 1]

    def test_near_edge_four_cells(self):
        members = assign_indices([[0.47, 0.52, 0.25]], UNIT)
        assert [c for c, m in enumerate(members) if len(m)] == [0, 1, 2, 3]

    def test_delta_zero_exact_partition(self):
        g = PartitionGrid((0, 0, 0), (1, 1, 1), (3, 2, 2), 0.0)
        p = np.random.default_rng(1).uniform(0, 1, (2000, 3))
        members = assign_indices(p, g)
        allidx = np.concatenate(members)
        assert len(allidx) == 2000 and np.array_equal(np.sort(allidx), np.arange(2000))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 0.2), st.floats(0.0, 0.2), st.integers(0, 1000))
    def test_delta_monotone(self, d1, d2, seed):
        lo_d, hi_d = sorted((d1, d2))
        p = np.random.default_rng(seed).uniform(0, 1, (300, 3))
        a = assign_indices(p, PartitionGrid((0, 0, 0), (1, 1, 1), (3, 2, 2), lo_d))
        b = assign_indices(p, PartitionGrid((0, 0, 0), (1, 1, 1), (3, 2, 2), hi_d))
        for x, y in zip(a, b):
            assert len(x) <= len(y) and set(x) <= set(y)

    def test_home_cell_always_included(self):
        p = np.random.default_rng(2).uniform(0, 1, (500, 3))
        members = assign_indices(p, UNIT)
        home = UNIT.cell_of(p)
        for i, c in enumerate(home):
            assert i in set(members[c])

    def test_per_cell_normalisation(self):
        p = np.random.default_rng(3).uniform(0, 1, (400, 3))
        ds = make_dataset(p, np.random.default_rng(4).normal(size=(400, 16)))
        for c, sub in enumerate(assign_samples(ds, UNIT)):
            assert np.abs(sub.normalized_positions()).max() <= 1.0
            lo, hi = UNIT.expanded_box(c)
            np.testing.assert_allclose(sub.center, (lo + hi) / 2)
            # transfers are copied, never re-baked
            assert np.isin(sub.transfers[:, 0], ds.transfers[:, 0]).all()

    def test_outside_sample(self):
        with pytest.raises(RoutingError):
            assign_indices([[2.0, 0.5, 0.5]], UNIT)


def cell_center_dataset(grid, values):
    """Two samples per cell at its centre offset along x; values[c] = (mean, spread)."""
    p, t = [], []
    for c, (mean, spread) in enumerate(values):
        lo, hi = grid.cell_box(c)
        mid = (lo + hi) / 2
        for s in (-1, 1):
            p.append(mid + [0.1 * s * grid.extent[0], 0, 0])
            row = np.zeros(16)
            row[0] = mean + s * spread
            t.append(row)
    return make_dataset(p, t)


class TestClustering:
    def test_identical_cells_merge_to_min(self):
        ds = cell_center_dataset(UNIT, [(0.3, 0.0)] * 8)
        for k in (1, 3):
            cmap = cluster_cells(cell_stats(ds, UNIT), UNIT, theta=1e-12, min_clusters=k)
            assert len(np.unique(cmap)) == k

    def test_theta_zero_no_merges(self):
        ds = cell_center_dataset(UNIT, [(c * 0.1, 0.01) for c in range(8)])
        cmap = cluster_cells(cell_stats(ds, UNIT), UNIT, theta=0.0)
        assert np.array_equal(cmap, np.arange(8))

    def test_theta_infinite_single_cluster(self):
        ds = cell_center_dataset(UNIT, [(c * 0.1, 0.01) for c in range(8)])
        cmap = cluster_cells(cell_stats(ds, UNIT), UNIT, theta=np.inf)
        assert not cmap.any()

    def test_twelve_cell_fixture(self, caplog):
        # 4x3 grid; the middle row is nearly constant, outer rows carry distinct means
        g = PartitionGrid((0, 0, 0), (4, 3, 1), (4, 3, 1))
        values = [(10.0 + c, 0.5) for c in range(12)]
        values[4:8] = [(0.0, 0.01), (0.0, 0.01), (0.0, 0.02), (0.0, 0.02)]
        ds = cell_center_dataset(g, values)
        stats = cell_stats(ds, g)
        np.testing.assert_allclose(stats.variance[4:8], [1e-4, 1e-4, 4e-4, 4e-4])
        with caplog.at_level(logging.DEBUG, logger="neuprt.partition"):
            cmap = cluster_cells(stats, g, theta=0.01)
        assert len(np.unique(cmap)) == 9
        assert len(set(cmap[4:8])) == 1 and len(set(cmap[[0, 1, 2, 3, 8, 9, 10, 11]])) == 8
        # hand-computed merged variances: {4,5} 1e-4, then +6 -> 2e-4, then +7 -> 2.5e-4
        merges = [r.getMessage() for r in caplog.records if "merged" in r.getMessage()]
        assert merges == ["merged cluster 5 into 4 (variance 0.0001)",
                          "merged cluster 6 into 4 (variance 0.0002)",
                          "merged cluster 7 into 4 (variance 0.00025)"]

    def test_tie_break_lowest_index(self):
        g = PartitionGrid((0, 0, 0), (3, 1, 1), (3, 1, 1))
        ds = cell_center_dataset(g, [(0.0, 0.1)] * 3)
        cmap = cluster_cells(cell_stats(ds, g), g, theta=1.0, min_clusters=2)
        assert cmap.tolist() == [0, 0, 1]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 2.0))
    def test_clusters_connected(self, seed, theta):
        g = PartitionGrid((0, 0, 0), (1, 1, 1), (3, 3, 2))
        rng = np.random.default_rng(seed)
        stats = CellStats(rng.integers(1, 20, g.n_cells).astype(float), rng.normal(size=(g.n_cells, 4)),
                          rng.uniform(0, 5, g.n_cells))
        cmap = cluster_cells(stats, g, theta)
        assert set(cmap.tolist()) == set(range(cmap.max() + 1))
        for k in range(cmap.max() + 1):
            assert is_connected(np.nonzero(cmap == k)[0].tolist(), g)

    def test_pooled_moments_match_direct(self):
        from neuprt.partition import _merge

        g = PartitionGrid((0, 0, 0), (2, 1, 1), (2, 1, 1))
        rng = np.random.default_rng(5)
        p = rng.uniform(0, 2, (200, 3)) * [1, 0.5, 0.5]
        ds = make_dataset(p, rng.normal(size=(200, 16)))
        t = ds.transfers.astype(np.float64)
        s = cell_stats(ds, g)
        n, _, m2 = _merge(*[(s.count[c], s.mean[c], s.m2[c]) for c in (0, 1)])
        direct = np.trace(np.cov(t.T, bias=True))
        assert m2 / n == pytest.approx(direct, rel=1e-12)
        one = PartitionGrid((0, 0, 0), (2, 1, 1), (1, 1, 1))
        assert cell_stats(ds, one).variance[0] == pytest.approx(direct, rel=1e-12)

    def test_min_clusters_validated(self):
        with pytest.raises(InputError):
            cluster_cells(CellStats(np.ones(8), np.zeros((8, 16)), np.zeros(8)), UNIT, 1.0, 0)


class TestAbsorbEmpty:
    def test_empty_cluster_joins_neighbour(self):
        g = PartitionGrid((0, 0, 0), (3, 1, 1), (3, 1, 1))
        members = [np.array([0, 1]), np.zeros(0, int), np.array([2])]
        out = absorb_empty(np.array([0, 1, 2]), members, g)
        assert out.tolist() == [0, 0, 1]

    def test_chain_of_empty(self):
        g = PartitionGrid((0, 0, 0), (4, 1, 1), (4, 1, 1))
        members = [np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.array([0])]
        assert absorb_empty(np.arange(4), members, g).tolist() == [0, 0, 0, 0]

    def test_all_empty(self):
        with pytest.raises(DataError):
            absorb_empty(np.arange(8), [np.zeros(0, int)] * 8, UNIT)


def toy_dataset(n=600, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, (n, 3))
    t = np.sin(3 * p @ rng.normal(size=(3, 16))) * 0.5
    return make_dataset(p, t)


class TestClusteredModel:
    def test_single_cell_matches_unpartitioned(self):
        ds = toy_dataset()
        g = PartitionGrid.around(ds.positions, (1, 1, 1))
        cfg = nn.TrainConfig(epochs=3, batch=128, seed=2)
        cm = train_clustered(ds, g, theta=0.0, mlp_cfg=nn.MlpConfig(16, 2), cfg=cfg)
        (cds,) = cluster_datasets(ds, g, np.zeros(1, int))
        assert len(cds) == len(ds)
        ref, _ = nn.train(cds, nn.MlpConfig(16, 2), cfg)
        assert all(np.array_equal(a, b) for a, b in zip(cm.models[0].weights, ref.weights))
        np.testing.assert_array_equal(cm.predict(ds.positions, ds.normals), nn.forward(ref, ds.positions, ds.normals))

    def test_routing_and_roundtrip(self, tmp_path):
        ds = toy_dataset()
        g = PartitionGrid.around(ds.positions, (2, 1, 1), 0.1)
        cm = train_clustered(ds, g, theta=0.0, mlp_cfg=nn.MlpConfig(16, 2), cfg=nn.TrainConfig(epochs=2))
        assert cm.n_clusters == 2 and cm.cells(0) == [0] and cm.cells(1) == [1]
        left = np.array([[g.lo[0] + 0.01, 0.5, 0.5]])
        z = np.array([[0.0, 0.0, 1.0]])
        np.testing.assert_array_equal(cm.predict(left, z), nn.forward(cm.models[0], left, z))
        save_clustered(cm, tmp_path / "cm.json")
        back = load_clustered(tmp_path / "cm.json")
        assert back.grid == cm.grid and np.array_equal(back.cell_cluster, cm.cell_cluster)
        np.testing.assert_array_equal(back.predict(ds.positions, ds.normals), cm.predict(ds.positions, ds.normals))

    def test_predict_outside(self):
        ds = toy_dataset(200)
        g = PartitionGrid.around(ds.positions, (1, 1, 1))
        cm = ClusteredModel(g, np.zeros(1, int), [nn.init_model(nn.MlpConfig(16, 2))])
        with pytest.raises(RoutingError):
            cm.predict([5.0, 5.0, 5.0], [0, 0, 1.0])

    def test_invalid_map(self):
        with pytest.raises(InputError):
            ClusteredModel(UNIT, np.zeros(8, int), [])

    def test_schema(self):
        cm = ClusteredModel(UNIT, np.array([0, 0, 1, 1, 0, 0, 1, 1]),
                            [nn.init_model(nn.MlpConfig(16, 2)), nn.init_model(nn.MlpConfig(16, 2), seed=1)])
        d = clustered_to_dict(cm)
        assert d["grid"] == {"aabb": [[0.0] * 3, [1.0] * 3], "dims": [2, 2, 2], "delta": 0.1}
        assert d["clusters"][1]["cells"] == [2, 3, 6, 7]
        del d["clusters"][1]
        with pytest.raises(FormatError):
            clustered_from_dict(d)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_clustered(tmp_path / "none.json")

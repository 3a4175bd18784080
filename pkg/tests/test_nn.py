import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuprt import nn
from neuprt.bake import TransferDataset
from neuprt.errors import DataError, FormatError, InputError, NumericError


def random_net(dims, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    ws = [rng.normal(scale=scale, size=(o, i)) for i, o in zip(dims[:-1], dims[1:])]
    bs = [rng.normal(scale=0.1, size=o) for o in dims[1:]]
    return ws, bs


def finite_difference_check(dims, n=32, h=1e-4, seed=0):
    rng = np.random.default_rng(seed)
    ws, bs = random_net(dims, seed)
    x = rng.normal(size=(n, dims[0]))
    y = rng.uniform(-0.9, 0.9, size=(n, dims[-1]))
    _, gw, gb = nn.loss_and_grad(ws, bs, x, y, 0.01)
    worst = 0.0
    for params, grads in ((ws, gw), (bs, gb)):
        for p, g in zip(params, grads):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = p[idx]
                p[idx] = old + h
                lp, _, _ = nn.loss_and_grad(ws, bs, x, y, 0.01)
                p[idx] = old - h
                lm, _, _ = nn.loss_and_grad(ws, bs, x, y, 0.01)
                p[idx] = old
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), abs(g[idx]), 1e-6)
                worst = max(worst, abs(fd - g[idx]) / denom)
    return worst


class TestEncoding:
    def test_origin(self):
        e = nn.positional_encode(np.zeros(3), np.array([0, 0, 1.0]))
        assert e.shape == (66,)
        pos = e[3:39].reshape(6, 2, 3)
        assert np.all(pos[:, 0] == 0) and np.all(pos[:, 1] == 1)

    def test_integer_multiple_of_pi(self):
        e = nn.positional_encode(np.array([1.0, 0, 0]), np.array([0, 0, 1.0]))
        assert e[3] == pytest.approx(0.0, abs=1e-15) and e[6] == pytest.approx(-1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10), st.integers(0, 10), st.booleans())
    def test_dimension_formula(self, fp, fn, raw):
        if fp == fn == 0 and not raw:
            with pytest.raises(InputError):
                nn.PositionalEncodingConfig(fp, fn, raw)
            return
        cfg = nn.PositionalEncodingConfig(fp, fn, raw)
        e = nn.positional_encode(np.full((4, 3), 0.3), np.tile([0, 1.0, 0], (4, 1)), cfg)
        assert e.shape == (4, 3 * (raw + 2 * fp) + 3 * (raw + 2 * fn)) == (4, cfg.dim)

    def test_out_of_range(self):
        with pytest.raises(InputError):
            nn.positional_encode(np.array([1.01, 0, 0]), np.array([0, 0, 1.0]))


class TestForward:
    def test_zero_model(self):
        m = nn.init_model()
        for w, b in zip(m.weights, m.biases):
            w[:] = 0
            b[:] = 0
        m.scale = 2.5
        assert np.array_equal(nn.forward(m, [0.2, 0.1, 0.0], [0, 0, 1.0]), np.zeros(16))

    def test_identity_hidden_layer(self):
        pe = nn.PositionalEncodingConfig(0, 0, True)
        x = nn.positional_encode(np.array([0.2, 0.3, 0.4]), np.array([0.0, 0.6, 0.8]), pe)
        assert np.all(x >= 0)
        h = nn.forward_encoded([np.eye(6)], [np.zeros(6)], x[None], 0.01)
        np.testing.assert_allclose(h[0], np.tanh(x))
        hidden = nn.forward_encoded([np.eye(6), np.eye(6)], [np.zeros(6)] * 2, x[None], 0.01)
        np.testing.assert_allclose(hidden[0], np.tanh(x))

    def test_output_bounded_by_scale(self):
        m = nn.init_model(seed=3, scale=0.7)
        for w in m.weights:
            w *= 20
        rng = np.random.default_rng(0)
        p = rng.uniform(-1, 1, (200, 3))
        n = rng.normal(size=(200, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        out = nn.forward(m, p, n)
        assert np.abs(out).max() <= 0.7

    def test_non_finite_reports_layer(self):
        ws, bs = random_net([4, 8, 8, 2])
        ws[1][0, 0] = 1e308
        with np.errstate(over="ignore"), pytest.raises(NumericError, match="layer 1"):
            nn.forward_encoded(ws, bs, np.full((1, 4), 1e3), 0.01)

    def test_broken_chain(self):
        with pytest.raises(InputError):
            nn.MlpModel([np.zeros((8, 66)), np.zeros((16, 9))], [np.zeros(8), np.zeros(16)])

    @pytest.mark.parametrize("width,depth", [(8, 4), (600, 4), (64, 1)])
    def test_config_limits(self, width, depth):
        with pytest.raises(InputError):
            nn.MlpConfig(width, depth)


class TestGradients:
    def test_finite_differences_small(self):
        assert finite_difference_check([10, 8, 8, 4], n=16) < 1e-4

    def test_zero_residual(self):
        ws, bs = random_net([5, 8, 3])
        x = np.random.default_rng(1).normal(size=(7, 5))
        y = nn.forward_encoded(ws, bs, x, 0.01)
        loss, gw, gb = nn.loss_and_grad(ws, bs, x, y, 0.01)
        assert loss == 0.0
        assert all(not g.any() for g in gw + gb)

    def test_scale_invariance(self):
        # targets and scale multiplied together leave the normalised loss alone
        ws, bs = random_net([5, 8, 3])
        rng = np.random.default_rng(2)
        x, t = rng.normal(size=(9, 5)), rng.uniform(-1, 1, (9, 3))
        for s in (0.5, 3.0):
            assert nn.loss_and_grad(ws, bs, x, (t * s) / s, 0.01)[0] == pytest.approx(
                nn.loss_and_grad(ws, bs, x, t, 0.01)[0], rel=1e-12)

    def test_adam_on_convex_problem(self):
        rng = np.random.default_rng(0)
        A, b = rng.normal(size=(40, 5)), rng.normal(size=40)
        w = np.zeros(5)
        opt = nn.Adam([w], lr=1e-3)
        losses = []
        for _ in range(3000):
            r = A @ w - b
            losses.append(float(r @ r) / len(b))
            opt.step([2 * A.T @ r / len(b)])
        assert np.all(np.diff(losses) <= 1e-12)  # small steps keep momentum from overshooting
        w_star = np.linalg.lstsq(A, b, rcond=None)[0]
        assert losses[-1] == pytest.approx(float(np.sum((A @ w_star - b) ** 2)) / len(b), rel=1e-3)


def tiny_dataset(n=100, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    t = np.sin(p @ rng.normal(size=(3, 16))) * 0.8 + 0.1 * nrm[:, :1]
    return TransferDataset(p, nrm, t, (0, 0, 0), 1.0, float(np.abs(t).max()))


class TestTraining:
    def test_overfit_small_dataset(self):
        model, report = nn.train(tiny_dataset(), nn.MlpConfig(64, 4), nn.TrainConfig(epochs=500, val_split=0.0))
        assert report.train_l1[-1] < 0.01
        assert len(report.train_l1) == 500 and report.n_val == 0

    def test_deterministic(self):
        ds = tiny_dataset(300)
        cfg = nn.TrainConfig(epochs=5, batch=64, seed=3)
        a, _ = nn.train(ds, nn.MlpConfig(32, 3), cfg)
        b, _ = nn.train(ds, nn.MlpConfig(32, 3), cfg)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights + a.biases, b.weights + b.biases))

    def test_record_order_invariance(self):
        ds = tiny_dataset(300)
        perm = np.random.default_rng(9).permutation(len(ds))
        cfg = nn.TrainConfig(epochs=3, batch=50, seed=1)
        a, _ = nn.train(ds, nn.MlpConfig(16, 3), cfg)
        b, _ = nn.train(ds.subset(perm), nn.MlpConfig(16, 3), cfg)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_validation_report(self):
        _, report = nn.train(tiny_dataset(400), nn.MlpConfig(32, 3), nn.TrainConfig(epochs=4, val_split=0.25))
        assert report.n_val == 100 and report.n_train == 300 and len(report.val_l1) == 4

    def test_embeds_normalization(self):
        ds = tiny_dataset()
        ds = TransferDataset(ds.positions * 2 + 5, ds.normals, ds.transfers, (5, 5, 5), 2.0, ds.scale)
        m, _ = nn.train(ds, nn.MlpConfig(16, 2), nn.TrainConfig(epochs=1))
        np.testing.assert_allclose(m.center, 5.0)
        assert m.half_extent == 2.0 and m.scale == pytest.approx(ds.scale)

    def test_empty(self):
        ds = tiny_dataset().subset(np.arange(0))
        with pytest.raises(InputError):
            nn.train(ds)

    def test_divergence(self):
        ds = tiny_dataset()
        ds.transfers[0, 0] = np.nan
        with pytest.raises(NumericError, match="epoch 0"):
            nn.train(ds, nn.MlpConfig(16, 2), nn.TrainConfig(epochs=2))


class TestSerialization:
    def test_roundtrip_bit_identical(self, tmp_path):
        m = nn.init_model(seed=5, center=(0.1, 0.2, 0.3), half_extent=1.7, scale=0.9)
        nn.save_model(m, tmp_path / "m.json")
        back = nn.load_model(tmp_path / "m.json")
        rng = np.random.default_rng(0)
        p = rng.uniform(-1, 1, (50, 3))
        n = np.tile([0, 0, 1.0], (50, 1))
        assert np.array_equal(nn.forward(m, p, n), nn.forward(back, p, n))

    def test_schema(self):
        d = nn.model_to_dict(nn.init_model(nn.MlpConfig(16, 2)))
        assert set(d) == {"version", "sh_order", "pe", "norm", "scale", "layers", "hidden_activation",
                          "output_activation"}
        assert d["layers"][0]["rows"] == 16 and d["layers"][0]["cols"] == 66
        assert d["hidden_activation"] == {"type": "leaky_relu", "alpha": 0.01}

    def test_missing_scale_names_field(self, tmp_path):
        d = nn.model_to_dict(nn.init_model(nn.MlpConfig(16, 2)))
        del d["scale"]
        (tmp_path / "m.json").write_text(json.dumps(d))
        with pytest.raises(FormatError, match="scale"):
            nn.load_model(tmp_path / "m.json")

    def test_broken_chain_rejected(self):
        d = nn.model_to_dict(nn.init_model(nn.MlpConfig(16, 3)))
        d["layers"][1]["cols"], d["layers"][1]["rows"] = 8, 32
        with pytest.raises(FormatError):
            nn.model_from_dict(d)

    def test_not_json(self, tmp_path):
        (tmp_path / "m.json").write_text("{")
        with pytest.raises(FormatError):
            nn.load_model(tmp_path / "m.json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            nn.load_model(tmp_path / "none.json")

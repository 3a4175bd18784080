import os
import re
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuprt import nn, shader
from neuprt.errors import CodegenError

GOLDEN = Path(__file__).parent / "data" / "golden_k16_l2.frag"


def random_inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, (n, 3))
    d = rng.normal(size=(n, 3))
    return p, d / np.linalg.norm(d, axis=1, keepdims=True)


def golden_model():
    return nn.init_model(nn.MlpConfig(16, 2), seed=0, center=(0.5, 0.0, -0.25), half_extent=2.0, scale=1.5)


class TestPacking:
    @pytest.mark.parametrize("rows,cols,expected", [(64, 66, 272), (16, 64, 64), (64, 64, 256), (5, 3, 2)])
    def test_block_count(self, rows, cols, expected):
        assert shader.pack_matrix(np.ones((rows, cols))).n_blocks == expected

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31))
    def test_unpack_identity(self, rows, cols, seed):
        w = np.random.default_rng(seed).normal(size=(rows, cols))
        layer = shader.pack_matrix(w, np.ones(rows))
        assert np.array_equal(layer.unpack(), w)
        full = layer.blocks.transpose(0, 2, 1, 3).reshape(layer.blocks.shape[0] * 4, -1)
        assert not full[rows:].any() and not full[:, cols:].any()
        assert not layer.bias[rows:].any()

    def test_block_orientation(self):
        # block (r, c) holds W[4r:4r+4, 4c:4c+4]
        w = np.arange(8 * 12, dtype=float).reshape(8, 12)
        blocks = shader.pack_matrix(w).blocks
        assert np.array_equal(blocks[1, 2], w[4:8, 8:12])

    def test_model_counts(self):
        pm = shader.pack_model(nn.init_model(nn.MlpConfig(64, 4)))
        assert [layer.n_blocks for layer in pm.layers] == [272, 256, 256, 64]


class TestEmit:
    def test_block_counts_in_text(self):
        m = nn.init_model(nn.MlpConfig(64, 4), seed=1)
        src = shader.emit_shader(m)
        pm = shader.pack_model(m)
        for i, layer in enumerate(pm.layers):
            body = re.search(rf"const mat4 W{i}\[(\d+)\] = mat4\[\d+\]\((.*?)\);\n", src, re.S)
            assert int(body.group(1)) == layer.n_blocks
            assert body.group(2).count("mat4(") == layer.n_blocks

    def test_deterministic(self):
        m = nn.init_model(nn.MlpConfig(32, 3), seed=2)
        assert shader.emit_shader(m) == shader.emit_shader(m)

    def test_version_pragma(self):
        src = shader.emit_shader(golden_model(), glsl_version=450)
        assert src.startswith("#version 450")

    @pytest.mark.parametrize("width", [64, 128])
    def test_parse_back(self, width):
        m = nn.init_model(nn.MlpConfig(width, 3), seed=width)
        src = shader.emit_shader(m)
        for i, (w, b) in enumerate(zip(m.weights, m.biases)):
            blocks, bias = shader.parse_layer_constants(src, i)
            layer = shader.pack_matrix(w, b)
            np.testing.assert_array_equal(blocks.reshape(layer.blocks.shape).astype(np.float32),
                                          layer.blocks.astype(np.float32))
            np.testing.assert_array_equal(bias.astype(np.float32), layer.bias.astype(np.float32))

    def test_width_limit(self):
        with pytest.raises(CodegenError):
            shader.emit_shader(nn.init_model(nn.MlpConfig(256, 2)))

    def test_golden(self):
        src = shader.emit_shader(golden_model())
        if os.environ.get("NEUPRT_UPDATE_GOLDEN"):
            GOLDEN.write_text(src)
        assert src == GOLDEN.read_text()

    def test_contains_stages(self):
        src = shader.emit_shader(golden_model())
        for needle in ("void encode(", "void transfer(", "tanh(", "OUT_SCALE", "u_light[", "u_light_matrix["):
            assert needle in src


class TestPackedEvaluator:
    @pytest.mark.parametrize("width,depth", [(16, 2), (64, 4), (128, 3)])
    def test_matches_forward(self, width, depth):
        m = nn.init_model(nn.MlpConfig(width, depth), seed=width + depth, scale=2.0)
        p, n = random_inputs(1000, width)
        ref = nn.forward(m, p, n)
        got = shader.reference_eval_packed(shader.pack_model(m), p, n)
        assert got.dtype == np.float32
        assert np.abs(got - ref).max() < 1e-5

    def test_zero_model(self):
        m = nn.init_model(nn.MlpConfig(32, 3))
        for w, b in zip(m.weights, m.biases):
            w[:] = 0
            b[:] = 0
        p, n = random_inputs(20)
        assert not shader.reference_eval_packed(shader.pack_model(m), p, n).any()

    def test_padding_isolation(self):
        m = nn.init_model(nn.MlpConfig(16, 2), seed=4)
        pm = shader.pack_model(m)
        p, n = random_inputs(50)
        before = shader.reference_eval_packed(pm, p, n)
        first = pm.layers[0]
        saved = first.blocks.copy()
        first.blocks[:, -1, :, 2:] = 1e3   # input columns 66, 67 do not exist
        first.blocks[:] = saved
        assert np.array_equal(shader.reference_eval_packed(pm, p, n), before)

    def test_padding_columns_are_inert(self):
        # the padded input lanes are zero, so even nonzero weights there do nothing
        m = nn.init_model(nn.MlpConfig(16, 2), seed=4)
        pm = shader.pack_model(m)
        p, n = random_inputs(50)
        before = shader.reference_eval_packed(pm, p, n)
        pm.layers[0].blocks[:, -1, :, 2:] = 7.0
        assert np.array_equal(shader.reference_eval_packed(pm, p, n), before)

    def test_single_point(self):
        m = golden_model()
        got = shader.reference_eval_packed(shader.pack_model(m), [0.5, 0.1, 0.0], [0, 0, 1.0])
        assert got.shape == (16,)


def emulate_main(u, T, normal, view):
    """numpy transcription of the emitted main() for one fragment."""
    from neuprt import sh

    t4 = np.zeros(len(u["u_light"]) // 3 * 4)
    t4[:len(T)] = T
    t4 = t4.reshape(-1, 4)
    nb = len(t4)
    rgb = np.zeros(3)
    if not u["u_glossy"]:
        for ch in range(3):
            b = sum(t4[i] @ u["u_light"][ch * nb + i] for i in range(nb))
            rgb[ch] = u["u_albedo"][ch] / np.pi * b
    else:
        r = 2.0 * (normal @ view) * normal - view
        Y = sh.sh_basis_eval(r / np.linalg.norm(r), len(u["u_lobe"]))
        for ch in range(3):
            b = 0.0
            for k in range(nb):
                hk = sum(u["u_light_matrix"][(ch * nb + i) * nb + k].T @ t4[i] for i in range(nb))
                for j in range(4):
                    idx = 4 * k + j
                    if idx < len(Y):
                        b += hk[j] * u["u_lobe"][int(np.sqrt(idx))] * Y[idx]
            rgb[ch] = u["u_albedo"][ch] * b
    return np.maximum(rgb, 0.0)


class TestUniforms:
    @pytest.mark.parametrize("glossy", [False, True])
    def test_shading_matches_renderer(self, glossy):
        from neuprt import sh
        from neuprt.render import Diffuse, EnvironmentLight, GlossyPhong, shade_fragments

        rng = np.random.default_rng(0)
        light = EnvironmentLight(rng.normal(size=(3, 16)))
        mat = GlossyPhong((0.9, 0.6, 0.3), 12.0) if glossy else Diffuse((0.5, 0.7, 0.2))
        tau = sh.triple_product_tensor(4)
        u = shader.shader_uniforms(light, mat, tau)
        T = rng.normal(size=(5, 16))
        n = np.tile([0.0, 0.0, 1.0], (5, 1))
        v = rng.normal(size=(5, 3)) + [0, 0, 2]
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        ref = shade_fragments(T, n, v, light, mat, tau)
        got = np.array([emulate_main(u, T[i], n[i], v[i]) for i in range(5)])
        np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_shapes_and_missing_tensor(self):
        from neuprt import sh
        from neuprt.render import Diffuse, EnvironmentLight, GlossyPhong

        light = EnvironmentLight(np.random.default_rng(0).normal(size=(3, 16)))
        u = shader.shader_uniforms(light, Diffuse((0.5, 0.5, 0.5)))
        assert u["u_light"].shape == (12, 4) and u["u_glossy"] == 0
        g = shader.shader_uniforms(light, GlossyPhong((1, 1, 1), 8.0), sh.triple_product_tensor(4))
        assert g["u_light_matrix"].shape == (48, 4, 4) and g["u_lobe"].shape == (4,)
        with pytest.raises(CodegenError):
            shader.shader_uniforms(light, GlossyPhong((1, 1, 1), 8.0))

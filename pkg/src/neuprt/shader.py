"""Pack network weights into mat4 blocks and emit a GLSL fragment shader.

Layout: a layer's weight matrix W (rows x cols) is zero-padded to multiples of
4 and cut into 4x4 blocks.  Block (r, c) maps input vec4 ``c`` into output
vec4 ``r`` (``y_r += B_rc * x_c``, column-vector convention).  Blocks are
listed in row-major block order; each GLSL ``mat4`` literal is column-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import sh
from .errors import CodegenError
from .nn import MlpModel, PositionalEncodingConfig

MAX_SHADER_WIDTH = 128


@dataclass(eq=False)
class PackedLayer:
    blocks: np.ndarray     # (rows/4, cols/4, 4, 4), padded entries exactly 0
    bias: np.ndarray       # (rows/4 * 4,)
    rows: int
    cols: int

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0] * self.blocks.shape[1]

    def unpack(self) -> np.ndarray:
        rb, cb = self.blocks.shape[:2]
        full = self.blocks.transpose(0, 2, 1, 3).reshape(rb * 4, cb * 4)
        return full[:self.rows, :self.cols].copy()


@dataclass(eq=False)
class PackedModel:
    layers: list[PackedLayer]
    pe: PositionalEncodingConfig
    center: np.ndarray
    half_extent: float
    scale: float
    alpha: float
    order: int


def _ceil4(n: int) -> int:
    return -(-n // 4)


def pack_matrix(w: np.ndarray, b: np.ndarray | None = None) -> PackedLayer:
    rows, cols = w.shape
    rb, cb = _ceil4(rows), _ceil4(cols)
    pad = np.zeros((rb * 4, cb * 4), dtype=w.dtype)
    pad[:rows, :cols] = w
    bias = np.zeros(rb * 4, dtype=w.dtype)
    if b is not None:
        bias[:rows] = b
    return PackedLayer(pad.reshape(rb, 4, cb, 4).transpose(0, 2, 1, 3).copy(), bias, rows, cols)


def pack_model(model: MlpModel) -> PackedModel:
    return PackedModel([pack_matrix(w, b) for w, b in zip(model.weights, model.biases)], model.pe,
                       model.center.copy(), model.half_extent, model.scale, model.alpha, model.order)


# ------------------------------------------------------------ host evaluator


def _encode_f32(pm: PackedModel, p, n) -> np.ndarray:
    f32 = np.float32
    pn = (np.asarray(p, dtype=f32) - pm.center.astype(f32)) / f32(pm.half_extent)
    nn_ = np.asarray(n, dtype=f32)
    parts = []
    for v, freqs in ((pn, pm.pe.freq_pos), (nn_, pm.pe.freq_norm)):
        if pm.pe.include_raw:
            parts.append(v)
        for k in range(freqs):
            # exact power-of-two scaling, then reduce the argument modulo 2
            a = f32(math.pi) * np.mod(v * f32(2.0 ** k), f32(2.0))
            parts += [np.sin(a), np.cos(a)]
    return np.concatenate(parts, axis=1).astype(f32)


def reference_eval_packed(pm: PackedModel, p, n) -> np.ndarray:
    """Evaluate the packed network with 4-wide f32 block arithmetic, as the shader does."""
    single = np.asarray(p).ndim == 1
    x = _encode_f32(pm, np.reshape(p, (-1, 3)), np.reshape(n, (-1, 3)))
    f32 = np.float32
    h = np.zeros((len(x), pm.layers[0].blocks.shape[1] * 4), dtype=f32)
    h[:, :x.shape[1]] = x
    last = len(pm.layers) - 1
    for i, layer in enumerate(pm.layers):
        rb, cb = layer.blocks.shape[:2]
        xin = h.reshape(len(h), cb, 4)
        blocks = layer.blocks.astype(f32)
        acc = np.broadcast_to(layer.bias.astype(f32).reshape(rb, 4), (len(h), rb, 4)).copy()
        for c in range(cb):
            acc += np.einsum("rij,nj->nri", blocks[:, c], xin[:, c])
        z = acc.reshape(len(h), rb * 4)
        h = np.tanh(z) if i == last else np.where(z > 0, z, f32(pm.alpha) * z).astype(f32)
    out = (f32(pm.scale) * h[:, :pm.layers[-1].rows]).astype(f32)
    return out[0] if single else out


# ---------------------------------------------------------------------- emit


def _lit(v) -> str:
    return np.format_float_positional(np.float32(v), unique=True, trim="0")


def _mat4(block: np.ndarray) -> str:
    # GLSL mat4 constructors take columns first
    return "mat4(" + ", ".join(_lit(block[r, c]) for c in range(4) for r in range(4)) + ")"


def _vec4(v) -> str:
    return "vec4(" + ", ".join(_lit(x) for x in v) + ")"


def emit_shader(model: MlpModel, glsl_version: int = 330) -> str:
    if model.width > MAX_SHADER_WIDTH:
        raise CodegenError(f"width {model.width} exceeds the shader limit of {MAX_SHADER_WIDTH}")
    pm = pack_model(model)
    order = model.order
    n2 = order * order
    n4 = _ceil4(n2)
    pe = model.pe
    enc_dim = pe.dim
    in4 = pm.layers[0].blocks.shape[1]
    out = [f"#version {glsl_version} core",
           "// Learnt SH transfer network and PRT shading.",
           f"// layers={len(pm.layers)} width={model.width} inputs={enc_dim} outputs={n2}",
           "// Weights: 4x4 blocks of the zero-padded matrix in row-major block order.",
           "// Block (r, c) is column-major and maps input vec4 c into output vec4 r (y = M x).",
           "",
           "in vec3 v_position;", "in vec3 v_normal;", "out vec4 frag_color;", "",
           "uniform vec3 u_eye;", "uniform vec3 u_albedo;", "uniform int u_glossy;",
           f"uniform vec4 u_light[{3 * n4}];            // SH light, per channel",
           f"uniform mat4 u_light_matrix[{3 * n4 * n4}]; // sum_j tau_ijk L_j, per channel, row-major blocks",
           f"uniform float u_lobe[{order}];              // normalised Phong zonal terms times sqrt(4pi/(2l+1))",
           "", "const float PI = 3.14159265358979;",
           f"const vec3 NORM_CENTER = vec3({', '.join(_lit(c) for c in pm.center)});",
           f"const float NORM_HALF = {_lit(pm.half_extent)};",
           f"const float OUT_SCALE = {_lit(pm.scale)};",
           f"const float ALPHA = {_lit(pm.alpha)};", ""]
    for i, layer in enumerate(pm.layers):
        rb, cb = layer.blocks.shape[:2]
        out.append(f"// layer {i}: {layer.rows}x{layer.cols}, {rb}x{cb} blocks")
        mats = ",\n    ".join(_mat4(layer.blocks[r, c]) for r in range(rb) for c in range(cb))
        out.append(f"const mat4 W{i}[{rb * cb}] = mat4[{rb * cb}](\n    {mats});")
        biases = ", ".join(_vec4(layer.bias[4 * r:4 * r + 4]) for r in range(rb))
        out.append(f"const vec4 B{i}[{rb}] = vec4[{rb}]({biases});")
        out.append("")

    # positional encoding
    out += [f"void encode(vec3 p, vec3 n, out vec4 x[{in4}]) {{",
            f"    float e[{in4 * 4}];",
            f"    for (int i = 0; i < {in4 * 4}; ++i) e[i] = 0.0;",
            "    int k = 0;"]
    for var, freqs in (("p", pe.freq_pos), ("n", pe.freq_norm)):
        if pe.include_raw:
            out.append(f"    for (int c = 0; c < 3; ++c) e[k++] = {var}[c];")
        if freqs:
            out += [f"    for (int f = 0; f < {freqs}; ++f) {{",
                    f"        vec3 a = PI * mod({var} * exp2(float(f)), 2.0);",
                    "        for (int c = 0; c < 3; ++c) e[k++] = sin(a[c]);",
                    "        for (int c = 0; c < 3; ++c) e[k++] = cos(a[c]);",
                    "    }"]
    out += [f"    for (int i = 0; i < {in4}; ++i) x[i] = vec4(e[4*i], e[4*i+1], e[4*i+2], e[4*i+3]);",
            "}", ""]

    # forward pass
    out.append(f"void transfer(vec3 p, vec3 n, out float T[{n2}]) {{")
    out.append(f"    vec4 h0[{in4}];")
    out.append("    encode((p - NORM_CENTER) / NORM_HALF, n, h0);")
    last = len(pm.layers) - 1
    for i, layer in enumerate(pm.layers):
        rb, cb = layer.blocks.shape[:2]
        act = "tanh(acc)" if i == last else "max(acc, ALPHA * acc)"
        out += [f"    vec4 h{i + 1}[{rb}];",
                f"    for (int r = 0; r < {rb}; ++r) {{",
                f"        vec4 acc = B{i}[r];",
                f"        for (int c = 0; c < {cb}; ++c) acc += W{i}[r * {cb} + c] * h{i}[c];",
                f"        h{i + 1}[r] = {act};",
                "    }"]
    out += [f"    for (int i = 0; i < {n2}; ++i) T[i] = OUT_SCALE * h{len(pm.layers)}[i / 4][i % 4];",
            "}", ""]

    # SH basis (same recurrence as the host code)
    knorm = sh.norm_table(order)
    out += [f"const float KNORM[{n2}] = float[{n2}]({', '.join(_lit(k) for k in knorm)});",
            f"void sh_basis(vec3 d, out float Y[{n2}]) {{",
            "    float c = 1.0, s = 0.0, qmm = 1.0;",
            f"    for (int m = 0; m < {order}; ++m) {{",
            "        if (m > 0) qmm *= float(2 * m - 1);",
            "        float q1 = 0.0, q2 = 0.0;",
            f"        for (int l = m; l < {order}; ++l) {{",
            "            float q;",
            "            if (l == m) q = qmm;",
            "            else if (l == m + 1) q = d.z * float(2 * m + 1) * qmm;",
            "            else q = (float(2 * l - 1) * d.z * q1 - float(l + m - 1) * q2) / float(l - m);",
            "            q2 = q1; q1 = q;",
            "            int b = l * (l + 1);",
            "            if (m == 0) Y[b] = KNORM[b] * q;",
            "            else { Y[b + m] = KNORM[b + m] * q * c; Y[b - m] = KNORM[b - m] * q * s; }",
            "        }",
            "        float c2 = c * d.x - s * d.y;",
            "        s = c * d.y + s * d.x;",
            "        c = c2;",
            "    }",
            "}", ""]

    # shading entry point
    out += ["void main() {",
            "    vec3 n = normalize(v_normal);",
            f"    float T[{n2}];",
            "    transfer(v_position, n, T);",
            f"    vec4 t4[{n4}];",
            f"    for (int i = 0; i < {n4}; ++i) t4[i] = vec4(T[4*i], T[4*i+1], T[4*i+2], T[4*i+3]);",
            "    vec3 rgb = vec3(0.0);",
            "    if (u_glossy == 0) {",
            "        for (int ch = 0; ch < 3; ++ch) {",
            "            float b = 0.0;",
            f"            for (int i = 0; i < {n4}; ++i) b += dot(t4[i], u_light[ch * {n4} + i]);",
            "            rgb[ch] = u_albedo[ch] / PI * b;",
            "        }",
            "    } else {",
            "        vec3 v = normalize(u_eye - v_position);",
            "        vec3 r = normalize(2.0 * dot(n, v) * n - v);",
            f"        float Y[{n2}];",
            "        sh_basis(r, Y);",
            "        for (int ch = 0; ch < 3; ++ch) {",
            "            float b = 0.0;",
            f"            for (int k = 0; k < {n4}; ++k) {{",
            "                vec4 hk = vec4(0.0);",
            f"                for (int i = 0; i < {n4}; ++i) hk += transpose(u_light_matrix[(ch * {n4} + i) * {n4} + k]) * t4[i];",
            "                for (int j = 0; j < 4; ++j) {",
            "                    int idx = 4 * k + j;",
            f"                    if (idx < {n2}) b += hk[j] * u_lobe[int(sqrt(float(idx)))] * Y[idx];",
            "                }",
            "            }",
            "            rgb[ch] = u_albedo[ch] * b;",
            "        }",
            "    }",
            "    frag_color = vec4(max(rgb, vec3(0.0)), 1.0);",
            "}", ""]
    return "\n".join(out)


def shader_uniforms(light, material, tau: sh.TripleProductTensor | None = None) -> dict:
    """Host-side uniform values matching ``emit_shader``'s interface."""
    from .render import GlossyPhong

    order = light.order
    n2 = order * order
    n4 = _ceil4(n2)
    lpad = np.zeros((3, n4 * 4))
    lpad[:, :n2] = light.coeffs
    u = {"u_light": lpad.reshape(3 * n4, 4), "u_albedo": np.asarray(material.albedo, float),
         "u_glossy": int(isinstance(material, GlossyPhong))}
    if isinstance(material, GlossyPhong):
        if tau is None:
            raise CodegenError("glossy uniforms need the triple product tensor")
        mats = [pack_matrix(tau.light_matrix(light.coeffs[c])).blocks for c in range(3)]
        u["u_light_matrix"] = np.concatenate([m.reshape(-1, 4, 4) for m in mats])
        lobe = material.lobe(order)
        u["u_lobe"] = lobe.values * np.sqrt(4 * np.pi / (2 * np.arange(order) + 1))
    return u


def parse_layer_constants(source: str, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Recover the (blocks, bias) literals of one layer from emitted source."""
    import re

    m = re.search(rf"const mat4 W{layer}\[(\d+)\] = mat4\[\d+\]\((.*?)\);\n", source, re.S)
    b = re.search(rf"const vec4 B{layer}\[(\d+)\] = vec4\[\d+\]\((.*?)\);\n", source, re.S)
    if not m or not b:
        raise CodegenError(f"layer {layer} not found in shader source")
    mats = re.findall(r"mat4\(([^)]*)\)", m.group(2))
    blocks = np.array([[float(x) for x in s.split(",")] for s in mats]).reshape(-1, 4, 4).transpose(0, 2, 1)
    vecs = re.findall(r"vec4\(([^)]*)\)", b.group(2))
    bias = np.array([float(x) for s in vecs for x in s.split(",")])
    return blocks, bias

"""Coordinate MLP mapping (position, normal) to SH transfer, trained with l1 + Adam."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bake import TransferDataset
from .errors import DataError, FormatError, InputError, NumericError

log = logging.getLogger(__name__)

RANGE_TOL = 1e-6
MODEL_VERSION = 1


@dataclass(frozen=True)
class PositionalEncodingConfig:
    freq_pos: int = 6
    freq_norm: int = 4
    include_raw: bool = True

    def __post_init__(self):
        if self.freq_pos < 0 or self.freq_norm < 0:
            raise InputError("frequency counts must be non-negative")
        if self.dim == 0:
            raise InputError("positional encoding is empty")

    @property
    def dim(self) -> int:
        raw = int(self.include_raw)
        return 3 * (raw + 2 * self.freq_pos) + 3 * (raw + 2 * self.freq_norm)


def _ladder(v: np.ndarray, freqs: int, include_raw: bool) -> list[np.ndarray]:
    parts = [v] if include_raw else []
    for f in range(freqs):
        a = (2.0 ** f) * np.pi * v
        parts += [np.sin(a), np.cos(a)]
    return parts


def positional_encode(p, n, cfg: PositionalEncodingConfig = PositionalEncodingConfig()) -> np.ndarray:
    """Encode normalised positions in [-1, 1]^3 and unit normals; (N, cfg.dim) or (cfg.dim,)."""
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    single = p.ndim == 1
    p2, n2 = p.reshape(-1, 3), n.reshape(-1, 3)
    if np.any(np.abs(p2) > 1.0 + RANGE_TOL):
        raise InputError("position outside [-1, 1]^3 after normalisation")
    out = np.concatenate(_ladder(p2, cfg.freq_pos, cfg.include_raw)
                         + _ladder(n2, cfg.freq_norm, cfg.include_raw), axis=1)
    return out[0] if single else out


@dataclass(frozen=True)
class MlpConfig:
    width: int = 64
    depth: int = 4
    alpha: float = 0.01

    def __post_init__(self):
        if not 16 <= self.width <= 512:
            raise InputError(f"width must be in [16, 512], got {self.width}")
        if self.depth < 2:
            raise InputError(f"depth must be >= 2, got {self.depth}")


@dataclass(eq=False)
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    pe: PositionalEncodingConfig = PositionalEncodingConfig()
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    half_extent: float = 1.0
    scale: float = 1.0
    alpha: float = 0.01
    order: int = 4

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        check_chain(self.weights, self.biases, self.pe.dim, self.order * self.order)
        if not self.scale > 0:
            raise InputError("scale must be > 0")
        if not self.half_extent > 0:
            raise InputError("half_extent must be > 0")

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def normalize(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.center) / self.half_extent

    def encode(self, p, n) -> np.ndarray:
        return positional_encode(self.normalize(p), n, self.pe)

    def copy(self) -> MlpModel:
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.pe, self.center.copy(), self.half_extent, self.scale, self.alpha,
                        self.order)


def check_chain(weights, biases, in_dim: int, out_dim: int) -> None:
    if len(weights) != len(biases) or len(weights) < 1:
        raise InputError("need one bias per weight matrix")
    prev = in_dim
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2 or w.shape[1] != prev:
            raise InputError(f"layer {i}: expected {prev} input columns, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise InputError(f"layer {i}: bias length {b.shape} != rows {w.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InputError(f"layer {i}: non-finite parameters")
        prev = w.shape[0]
    if prev != out_dim:
        raise InputError(f"final layer has {prev} outputs, expected {out_dim}")


def init_model(cfg: MlpConfig = MlpConfig(), pe: PositionalEncodingConfig = PositionalEncodingConfig(),
               center=(0.0, 0.0, 0.0), half_extent: float = 1.0, scale: float = 1.0,
               order: int = 4, seed: int = 0) -> MlpModel:
    rng = np.random.default_rng(seed)
    dims = [pe.dim] + [cfg.width] * (cfg.depth - 1) + [order * order]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    weights[-1] *= np.sqrt(fan_in / (fan_in + fan_out))
    return MlpModel(weights, biases, pe, np.asarray(center, float), half_extent, scale, cfg.alpha, order)


# --------------------------------------------------------------- forward/back


def forward_encoded(weights, biases, x: np.ndarray, alpha: float, check: bool = True) -> np.ndarray:
    """tanh output of the network for encoded inputs (before target scaling)."""
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w.T + b
        h = np.tanh(z) if i == last else np.where(z > 0, z, alpha * z)
        if check and not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite activations after layer {i}")
    return h


def forward(model: MlpModel, p, n) -> np.ndarray:
    """Predicted transfer vectors, (N, order**2) or (order**2,) for one point."""
    single = np.asarray(p).ndim == 1
    x = model.encode(np.reshape(p, (-1, 3)), np.reshape(n, (-1, 3)))
    out = model.scale * forward_encoded(model.weights, model.biases, x, model.alpha)
    return out[0] if single else out


def loss_and_grad(weights, biases, x: np.ndarray, target: np.ndarray, alpha: float):
    """Mean absolute error over batch and coefficients, with reverse-mode gradients.

    ``target`` must already be divided by the model scale.  The subgradient of
    |r| at r = 0 is taken as 0.
    """
    acts = [x]
    pre = []
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w.T + b
        pre.append(z)
        h = np.tanh(z) if i == last else np.where(z > 0, z, alpha * z)
        acts.append(h)
    r = h - target
    loss = float(np.abs(r).mean())
    g = np.sign(r) / r.size
    g = g * (1.0 - h * h)
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for i in range(last, -1, -1):
        gw[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        if i:
            g = g @ weights[i]
            g = g * np.where(pre[i - 1] > 0, 1.0, alpha).astype(g.dtype)
    return loss, gw, gb


# -------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 8192
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_final: float = 1.0     # final step size as a fraction of lr (cosine decay); 1 = constant
    seed: int = 0
    val_split: float = 0.05
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 1:
            raise InputError("batch and epochs must be >= 1")
        if not 0.0 <= self.val_split < 1.0:
            raise InputError("val_split must be in [0, 1)")


@dataclass
class TrainReport:
    train_l1: list[float] = field(default_factory=list)
    val_l1: list[float] = field(default_factory=list)
    seconds: float = 0.0
    n_train: int = 0
    n_val: int = 0


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr=None):
        self.t += 1
        lr = self.lr if lr is None else lr
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def canonical_order(ds: TransferDataset) -> np.ndarray:
    """A record order that depends only on record contents."""
    keys = np.concatenate([ds.positions, ds.normals], axis=1).astype(np.float64)
    return np.lexsort(keys.T[::-1])


def train(ds: TransferDataset, mlp_cfg: MlpConfig = MlpConfig(), cfg: TrainConfig = TrainConfig(),
          pe: PositionalEncodingConfig = PositionalEncodingConfig()) -> tuple[MlpModel, TrainReport]:
    if len(ds) == 0:
        raise InputError("cannot train on an empty dataset")
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    ds = ds.subset(canonical_order(ds))
    perm = rng.permutation(len(ds))
    n_val = int(round(cfg.val_split * len(ds))) if len(ds) > 1 else 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]

    model = init_model(mlp_cfg, pe, ds.center, ds.half_extent, ds.scale, ds.order, seed=cfg.seed)
    x_all = positional_encode(ds.normalized_positions(), ds.normals.astype(np.float64), pe).astype(dtype)
    y_all = (ds.transfers.astype(np.float64) / model.scale).astype(dtype)
    x_tr, y_tr = x_all[tr_idx], y_all[tr_idx]
    x_va, y_va = x_all[val_idx], y_all[val_idx]

    weights = [w.astype(dtype) for w in model.weights]
    biases = [b.astype(dtype) for b in model.biases]
    opt = Adam(weights + biases, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    nl = len(weights)
    report = TrainReport(n_train=len(tr_idx), n_val=n_val)
    steps_per_epoch = -(-len(tr_idx) // cfg.batch)
    total = steps_per_epoch * cfg.epochs
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tr_idx))
        acc = 0.0
        for s in range(0, len(order), cfg.batch):
            b = order[s:s + cfg.batch]
            loss, gw, gb = loss_and_grad(weights, biases, x_tr[b], y_tr[b], model.alpha)
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}")
            frac = opt.t / max(1, total - 1)
            lr = cfg.lr * (cfg.lr_final + (1.0 - cfg.lr_final) * 0.5 * (1.0 + np.cos(np.pi * frac)))
            opt.step(gw + gb, lr)
            acc += loss * len(b)
        report.train_l1.append(acc / len(order) * model.scale)
        if n_val:
            pred = forward_encoded(weights, biases, x_va, model.alpha, check=False)
            report.val_l1.append(float(np.abs(pred - y_va).mean()) * model.scale)
        if not np.isfinite(report.train_l1[-1]):
            raise NumericError(f"training diverged at epoch {epoch}")
        log.debug("epoch %d train %.5f", epoch, report.train_l1[-1])
    report.seconds = time.perf_counter() - t0
    model.weights = [w.astype(np.float64) for w in opt.params[:nl]]
    model.biases = [b.astype(np.float64) for b in opt.params[nl:]]
    check_chain(model.weights, model.biases, pe.dim, ds.order * ds.order)
    return model, report


def evaluate_l1(model: MlpModel, ds: TransferDataset) -> float:
    pred = forward(model, ds.positions.astype(np.float64), ds.normals.astype(np.float64))
    return float(np.abs(pred - ds.transfers).mean())


# ----------------------------------------------------------------- serialise


def model_to_dict(model: MlpModel) -> dict:
    return {
        "version": MODEL_VERSION,
        "sh_order": model.order,
        "pe": {"freq_pos": model.pe.freq_pos, "freq_norm": model.pe.freq_norm,
               "include_raw": model.pe.include_raw},
        "norm": {"center": [float(c) for c in model.center], "half_extent": float(model.half_extent)},
        "scale": float(model.scale),
        "layers": [{"rows": int(w.shape[0]), "cols": int(w.shape[1]),
                    "weights": [float(v) for v in w.ravel()], "bias": [float(v) for v in b]}
                   for w, b in zip(model.weights, model.biases)],
        "hidden_activation": {"type": "leaky_relu", "alpha": float(model.alpha)},
        "output_activation": "tanh",
    }


def _req(d: dict, key: str, where: str = ""):
    if not isinstance(d, dict) or key not in d:
        raise FormatError(f"model file missing field {where + key!r}")
    return d[key]


def model_from_dict(d: dict) -> MlpModel:
    if _req(d, "version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {d['version']!r}")
    pe_d = _req(d, "pe")
    pe = PositionalEncodingConfig(int(_req(pe_d, "freq_pos", "pe.")), int(_req(pe_d, "freq_norm", "pe.")),
                                  bool(_req(pe_d, "include_raw", "pe.")))
    norm = _req(d, "norm")
    act = _req(d, "hidden_activation")
    if _req(act, "type", "hidden_activation.") != "leaky_relu":
        raise FormatError(f"unsupported hidden activation {act['type']!r}")
    if _req(d, "output_activation") != "tanh":
        raise FormatError(f"unsupported output activation {d['output_activation']!r}")
    weights, biases = [], []
    for i, layer in enumerate(_req(d, "layers")):
        rows, cols = int(_req(layer, "rows", f"layers[{i}].")), int(_req(layer, "cols", f"layers[{i}]."))
        w = np.asarray(_req(layer, "weights", f"layers[{i}]."), dtype=np.float64)
        if w.size != rows * cols:
            raise FormatError(f"layers[{i}]: {w.size} weights for a {rows}x{cols} matrix")
        weights.append(w.reshape(rows, cols))
        biases.append(np.asarray(_req(layer, "bias", f"layers[{i}]."), dtype=np.float64))
    try:
        return MlpModel(weights, biases, pe, _req(norm, "center", "norm."),
                        float(_req(norm, "half_extent", "norm.")), float(_req(d, "scale")),
                        float(_req(act, "alpha", "hidden_activation.")), int(_req(d, "sh_order")))
    except InputError as e:
        raise FormatError(f"invalid model: {e}") from None


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path) -> MlpModel:
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not JSON ({e})") from None
    return model_from_dict(d)

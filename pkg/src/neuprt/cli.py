"""Command-line entry point: bake, train, render, compare, partition, export-shader, tau."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import InputError, PRTError

log = logging.getLogger("neuprt")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
BUILTIN_SCENES = ("toy-mesh", "toy-sdf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------- helpers


def _surface(name: str, base: Path | None = None):
    from .geometry import load_surface
    from .geometry.scenes import toy_mesh, toy_sdf

    if name == "toy-mesh":
        return toy_mesh()
    if name == "toy-sdf":
        return toy_sdf()
    path = Path(name)
    if base is not None and not path.is_absolute():
        path = base / path
    return load_surface(path)


def _trace_params(args):
    from .geometry import TraceParams

    if getattr(args, "hit_eps", None) is None and getattr(args, "max_steps", None) is None:
        return None
    return TraceParams(max_steps=args.max_steps or 256, hit_eps=args.hit_eps)


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from None


def _material(cfg: dict):
    from .render import Diffuse, GlossyPhong

    kind = cfg.get("type", "diffuse")
    albedo = tuple(cfg.get("albedo", (0.8, 0.8, 0.8)))
    if kind == "diffuse":
        return Diffuse(albedo)
    if kind == "glossy":
        return GlossyPhong(albedo, float(cfg.get("exponent", 32.0)))
    raise InputError(f"unknown material type {kind!r}")


def _light(cfg, base: Path, order: int):
    from .images import load_envmap
    from .render import project_envmap, procedural_envmap

    if cfg is None:
        cfg = {"procedural": "sky"}
    if isinstance(cfg, str):
        cfg = {"file": cfg}
    if "file" in cfg:
        path = Path(cfg["file"])
        path = path if path.is_absolute() else base / path
        return project_envmap(load_envmap(path), order, str(path))
    kind = cfg.get("procedural", "sky")
    return project_envmap(procedural_envmap(kind), order, f"procedural:{kind}")


def _camera(cfg: dict, size: int | None):
    from .render import Camera

    cfg = dict(cfg or {})
    if size is not None:
        cfg["width"] = cfg["height"] = size
    return Camera(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})


# ---------------------------------------------------------------- commands


def cmd_bake(args) -> int:
    from .bake import BakeConfig, bake_dataset, save_dataset

    surface = _surface(args.scene)
    cfg = BakeConfig(args.rays, args.order, args.seed, args.grid_res, _trace_params(args))
    ds = bake_dataset(surface, args.count, cfg, scene_id=Path(args.scene).stem)
    save_dataset(ds, args.out)
    if ds.discarded > 0.05 * args.count:
        print(f"warning: {ds.discarded} of {args.count} samples failed to project and were dropped",
              file=sys.stderr)
    print(f"baked {len(ds)} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .bake import load_dataset
    from .nn import MlpConfig, TrainConfig, save_model, train

    ds = load_dataset(args.dataset)
    cfg = TrainConfig(batch=args.batch, epochs=args.epochs, lr=args.lr, lr_final=args.lr_final,
                      seed=args.seed)
    model, report = train(ds, MlpConfig(args.width, args.depth), cfg)
    save_model(model, args.out)
    val = report.val_l1[-1] if report.val_l1 else float("nan")
    print(f"trained {model.n_params()} parameters in {report.seconds:.1f}s: "
          f"train l1 {report.train_l1[-1]:.5f}, val l1 {val:.5f}")
    return EXIT_OK


def cmd_render(args) -> int:
    from . import sh
    from .images import tonemap_write
    from .nn import load_model
    from .partition import load_clustered
    from .render import (ClusteredTransfer, GlossyPhong, LearntTransfer, pack_fragments,
                         reference_source, shade_fragments, trace_gbuffer, unpack)
    from .images import Image
    from .metrics import compare_images

    scene_path = Path(args.scene)
    if not scene_path.exists():
        raise FileNotFoundError(f"{scene_path}: no such file")
    try:
        cfg = json.loads(scene_path.read_text())
    except json.JSONDecodeError as e:
        raise PRTError(f"{scene_path}: invalid JSON ({e})") from None
    base = scene_path.parent
    if "surface" not in cfg:
        raise PRTError(f"{scene_path}: missing 'surface'")
    surface = _surface(cfg["surface"], base)
    material = _material(cfg.get("material", {}))
    model_path = args.model or cfg.get("model")
    learnt = None
    if args.clustered:
        learnt = ClusteredTransfer(load_clustered(args.clustered))
        order = learnt.model.order
    elif model_path:
        learnt = LearntTransfer(load_model(model_path if Path(model_path).is_absolute() or args.model
                                           else base / model_path))
        order = learnt.model.order
    else:
        order = int(cfg.get("order", 4))
    if learnt is None and args.reference is None:
        raise UsageError("render needs --model, --clustered or --reference")
    light = _light(cfg.get("env"), base, order)
    camera = _camera(cfg.get("camera"), args.size)
    params = _trace_params(args)
    tau = sh.load_or_build_tensor(order, args.tau_cache) if isinstance(material, GlossyPhong) else None

    gb = trace_gbuffer(surface, camera, params)
    frags, imap = pack_fragments(gb)
    images = {}
    for name, src in (("learnt", learnt),
                      ("reference", reference_source(surface, args.reference, args.rays, order, args.seed, params)
                       if args.reference else None)):
        if src is None:
            continue
        T = src.transfer(frags)
        rgb = shade_fragments(T, frags.normals, frags.views, light, material, tau)
        images[name] = Image(unpack(rgb.astype(np.float32), imap))

    out = Path(args.out)
    first = images.get("learnt", images.get("reference"))
    tonemap_write(first, out, args.exposure)
    if "learnt" in images and "reference" in images:
        ref_out = Path(args.reference_out) if args.reference_out else \
            out.with_name(out.stem + "_reference" + out.suffix)
        tonemap_write(images["reference"], ref_out, args.exposure)
        print(json.dumps(compare_images(images["learnt"], images["reference"]).to_dict(), indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    from .images import read_image
    from .metrics import compare_images

    report = compare_images(read_image(args.a), read_image(args.b))
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_partition(args) -> int:
    from .bake import load_dataset
    from .nn import MlpConfig, TrainConfig
    from .partition import PartitionGrid, parse_dims, save_clustered, train_clustered

    ds = load_dataset(args.dataset)
    grid = PartitionGrid.around(ds.positions, parse_dims(args.grid), args.delta)
    cfg = TrainConfig(batch=args.batch, epochs=args.epochs, lr=args.lr, lr_final=args.lr_final,
                      seed=args.seed)
    cm = train_clustered(ds, grid, args.theta, MlpConfig(args.width, args.depth), cfg,
                         min_clusters=args.min_clusters)
    save_clustered(cm, args.out)
    print(f"{grid.n_cells} cells merged into {cm.n_clusters} clusters; wrote {args.out}")
    return EXIT_OK


def cmd_export_shader(args) -> int:
    from .nn import load_model
    from .shader import emit_shader

    _write_text(args.out, emit_shader(load_model(args.model), args.glsl_version))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_tau(args) -> int:
    from . import sh

    out = args.out or args.tau_cache
    tau = sh.triple_product_tensor(args.order)
    if out:
        tau.save(out)
    print(f"order {args.order}: {len(tau.entries)} nonzero entries" + (f", wrote {out}" if out else ""))
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuprt", description="Neural precomputed radiance transfer toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def trace_flags(sp):
        sp.add_argument("--hit-eps", type=float, default=None, help="sphere-tracing hit threshold")
        sp.add_argument("--max-steps", type=int, default=None, help="sphere-tracing step limit")

    def train_flags(sp):
        sp.add_argument("--width", type=int, default=64)
        sp.add_argument("--depth", type=int, default=4)
        sp.add_argument("--epochs", type=int, default=200)
        sp.add_argument("--batch", type=int, default=8192)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--lr-final", type=float, default=1.0,
                        help="final learning rate as a fraction of --lr (cosine decay)")
        sp.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bake", help="bake a transfer dataset")
    b.add_argument("--scene", required=True, help=".obj mesh, SDF scene file, or toy-mesh / toy-sdf")
    b.add_argument("--count", type=int, default=100_000)
    b.add_argument("--rays", type=int, default=4096)
    b.add_argument("--order", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--grid-res", type=int, default=128, help="marching-cubes resolution for SDF sampling")
    b.add_argument("--out", required=True)
    trace_flags(b)
    b.set_defaults(func=cmd_bake)

    t = sub.add_parser("train", help="fit a transfer network to a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    train_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a scene with learnt and/or reference transfer")
    r.add_argument("--scene", required=True, help="JSON scene config")
    r.add_argument("--model")
    r.add_argument("--clustered")
    r.add_argument("--reference", choices=("bruteforce", "vertex"))
    r.add_argument("--reference-out")
    r.add_argument("--rays", type=int, default=4096, help="rays per reference sample")
    r.add_argument("--size", type=int, default=None)
    r.add_argument("--exposure", type=float, default=1.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--tau-cache")
    r.add_argument("--out", required=True)
    trace_flags(r)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("compare", help="image metrics as JSON")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.set_defaults(func=cmd_compare)

    pa = sub.add_parser("partition", help="train a clustered model over a grid partition")
    pa.add_argument("--dataset", required=True)
    pa.add_argument("--grid", default="2x2x1", help="cells per axis, e.g. 3x2x2")
    pa.add_argument("--delta", type=float, default=0.1)
    pa.add_argument("--theta", type=float, default=0.0)
    pa.add_argument("--min-clusters", type=int, default=1)
    pa.add_argument("--out", required=True)
    train_flags(pa)
    pa.set_defaults(func=cmd_partition)

    e = sub.add_parser("export-shader", help="emit a GLSL fragment shader for a model")
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--glsl-version", type=int, default=330)
    e.set_defaults(func=cmd_export_shader)

    ta = sub.add_parser("tau", help="compute the SH triple product tensor")
    ta.add_argument("--order", type=int, default=4)
    ta.add_argument("--out")
    ta.add_argument("--tau-cache")
    ta.set_defaults(func=cmd_tau)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:       # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"neuprt {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as e:
        print(f"neuprt {args.command}: invalid input: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PRTError, OSError) as e:
        print(f"neuprt {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

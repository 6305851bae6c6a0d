"""Command-line entry point: ``gscodec <command> ...`` (or ``python -m gscodec``)."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .container import DecodeError, decode_file, stats
from .model import PlyError, load_cameras, load_ply, save_cameras, save_ply
from .pipeline import ConfigError, RunConfig, StageError
from .render import load_png, save_png

log = logging.getLogger("gscodec")

_FLAG_KEYS = {
    "lambda_mask": float, "epsilon": float, "mask_mode": str, "codebook_size": int, "stages": int,
    "hash_log2": int, "iters_mask": int, "iters_field": int, "iters_rvq": int, "seed": int,
}


def _add_config_flags(p):
    for key, typ in _FLAG_KEYS.items():
        p.add_argument("--" + key.replace("_", "-"), type=typ, default=None)
    p.add_argument("--config", help="JSON file with RunConfig keys (flags override it)")
    p.add_argument("--no-pp", action="store_true", help="skip quantization, pruning and Huffman coding")
    p.add_argument("--no-mask", action="store_true", help="skip mask training")
    p.add_argument("--long-schedule", action="store_true", help="30K-iteration budgets")
    p.add_argument("--synthetic", action="store_true", help="synthetic-scene defaults (lambda 4e-3, hash 2^16)")


def config_from_args(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    cfg = RunConfig.from_dict(base)
    if args.long_schedule:
        cfg = cfg.with_long_schedule()
    if args.synthetic:
        cfg = cfg.with_synthetic_defaults()
    over = {k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k) is not None}
    if args.no_pp:
        over["pp"] = False
    if args.no_mask:
        over["mask"] = False
    return dataclasses.replace(cfg, **over).validate()


def load_scene(path):
    """A .ply as a GaussianCloud or a .cgs as a CompactScene."""
    data = Path(path).read_bytes()
    return decode_file(data) if data[:8] == b"CGSCENE1" else load_ply(data)


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, default=_jsonable)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# --- commands ------------------------------------------------------------------

def cmd_compress(args):
    cfg = config_from_args(args)
    cloud = load_ply(Path(args.input).read_bytes())
    cameras = load_cameras(args.cameras) if args.cameras else None
    data, report = pipeline.compress(cloud, cameras, cfg)
    Path(args.output).write_bytes(data)
    report["output"] = str(args.output)
    _dump(report, args.report)


def cmd_decompress(args):
    scene = decode_file(Path(args.input).read_bytes())
    d = np.asarray(args.bake_direction, dtype=np.float64)
    if np.linalg.norm(d) == 0:
        raise ValueError("bake direction must be non-zero")
    cloud = scene.to_cloud(d / np.linalg.norm(d))
    save_ply(cloud, args.output)
    _dump({"n_gaussians": len(cloud), "output": str(args.output), "bake_direction": d.tolist()})


def cmd_render(args):
    scene = load_scene(args.scene)
    cams = load_cameras(args.cameras)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    r = pipeline.Renderer(scene)
    paths = []
    for i, cam in enumerate(cams):
        p = out / f"{cam.name or f'view{i:03d}'}.png"
        save_png(r(cam), p)
        paths.append(str(p))
    _dump({"images": paths})


def _images(source, cams):
    p = Path(source)
    if p.is_dir():
        return [load_png(f) for f in sorted(p.glob("*.png"))]
    return pipeline.render_all(load_scene(p), cams)


def cmd_eval(args):
    cams = load_cameras(args.cameras) if args.cameras else []
    a, b = _images(args.a, cams), _images(args.b, cams)
    if len(a) != len(b):
        raise ValueError(f"image count mismatch: {len(a)} vs {len(b)}")
    rows = ["view,psnr,ssim,l1"]
    for i, (x, y) in enumerate(zip(a, b)):
        m = pipeline.image_metrics(x, y)
        name = cams[i].name if i < len(cams) and cams[i].name else str(i)
        rows.append(f"{name},{m['psnr']:.4f},{m['ssim']:.6f},{m['l1']:.6f}")
    text = "\n".join(rows) + "\n"
    if args.csv:
        Path(args.csv).write_text(text)
    sys.stdout.write(text)


def cmd_stats(args):
    rep = stats(Path(args.input).read_bytes(), baseline_n=args.baseline_n)
    _dump(rep.as_dict())


def cmd_sweep(args):
    base = config_from_args(args)
    if args.grid:
        grid = [dataclasses.replace(base, **d).validate() for d in json.loads(Path(args.grid).read_text())]
    else:
        grid = pipeline.default_grid(base)
    cloud = load_ply(Path(args.input).read_bytes())
    rows = pipeline.sweep(cloud, load_cameras(args.cameras), grid)
    text = pipeline.sweep_csv(rows)
    Path(args.output).write_text(text)
    sys.stdout.write(text)


def cmd_toy(args):
    from .synthetic import toy_scene

    s = toy_scene(n=args.n, seed=args.seed)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(s.cloud, out / "scene.ply")
    save_cameras(s.cameras, out / "cameras.json")
    _dump({"ply": str(out / "scene.ply"), "cameras": str(out / "cameras.json"), "n_gaussians": len(s.cloud)})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gscodec", description="Compact Gaussian splat codec")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--deterministic", action="store_true", help="single-threaded execution")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="PLY -> .cgs")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--cameras")
    p.add_argument("--report", help="also write the JSON report here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help=".cgs -> degree-0 PLY")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--bake-direction", nargs=3, type=float, default=(0.0, 0.0, 1.0), metavar=("X", "Y", "Z"))
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("render", help="render a .ply or .cgs to PNGs")
    p.add_argument("scene")
    p.add_argument("cameras")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM/L1 between two scenes or PNG folders")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("cameras", nargs="?")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="per-channel storage of a .cgs")
    p.add_argument("input")
    p.add_argument("--baseline-n", type=int, default=None, help="Gaussian count of the uncompressed model")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="rate-distortion sweep to CSV")
    p.add_argument("input")
    p.add_argument("cameras")
    p.add_argument("output")
    p.add_argument("--grid", help="JSON list of config overrides; default doubles one knob at a time")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("toy", help="write the synthetic toy scene and its cameras")
    p.add_argument("outdir")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    pipeline.configure_threads(args.deterministic)
    try:
        args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (StageError, DecodeError, PlyError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, train, render, extract-mesh, eval, info."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

THREADS_ENV = "DYNSPLAT_THREADS"
log = logging.getLogger("dynsplat")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _configure_threads() -> None:
    n = os.environ.get(THREADS_ENV)
    if not n:
        return
    import numba
    import torch

    torch.set_num_threads(int(n))
    numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def _write_png(path: Path, img: np.ndarray, bits: int = 8) -> None:
    from PIL import Image

    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3] * arr[..., 3:] + (1 - arr[..., 3:])
    return arr


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> dict:
    from .data import SyntheticSceneSpec, generate_synthetic

    spec = SyntheticSceneSpec(primitive=args.primitive, motion=args.motion, n_frames=args.frames,
                              n_views=args.views, n_test_views=args.test_views,
                              resolution=args.resolution, seed=args.seed)
    out = generate_synthetic(spec, args.out)
    return {"dataset": str(out), "train_views": spec.n_views, "test_views": spec.n_test_views}


def cmd_train(args) -> dict:
    from .config import Config, load_config
    from .data import load_dataset
    from .train import Trainer, TrainingDiverged

    cfg = load_config(args.config) if args.config else Config()
    if args.data:
        cfg.train.data = args.data
    if args.output:
        cfg.train.output = args.output
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    cfg.validate()
    if not cfg.train.data:
        raise CliError("missing_input", "no dataset given (--data or [train] data)")
    _, train_frames = load_dataset(cfg.train.data, "train", cfg.train.downscale, cfg.render.background)
    test_frames = []
    if (Path(cfg.train.data) / "transforms_test.json").exists():
        _, test_frames = load_dataset(cfg.train.data, "test", cfg.train.downscale, cfg.render.background)
    trainer = Trainer(cfg, train_frames, test_frames, cfg.train.output)
    try:
        result = trainer.run()
    except TrainingDiverged as exc:
        raise CliError("diverged", f"{exc}; last checkpoint: {exc.checkpoint}") from exc
    return {"output": cfg.train.output, "iterations": trainer.iteration,
            "gaussians": len(result.cloud),
            "checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
            "psnr": result.evals[-1]["psnr"] if result.evals else None}


def _orbit_view(angle_deg: float, cfg, width: int, height: int, time: float):
    from .scene import CameraView, intrinsics_from_fov, look_at

    a = math.radians(angle_deg)
    eye = cfg.mesh.view_distance * np.array([math.cos(a), math.sin(a), 0.3])
    eye *= cfg.mesh.view_distance / np.linalg.norm(eye)
    K = intrinsics_from_fov(cfg.mesh.camera_angle_x, width, height)
    return CameraView(K, look_at(eye, np.zeros(3)), eye, width, height, time)


def cmd_render(args) -> dict:
    from .data import load_dataset
    from .render import render
    from .train import load_model, render_settings

    cloud, field, cfg = load_model(args.checkpoint)
    if args.pose_index is not None:
        data = args.data or cfg.train.data
        if not data:
            raise CliError("missing_input", "--pose-index needs --data or a checkpoint with a dataset")
        _, frames = load_dataset(data, args.split, cfg.train.downscale, cfg.render.background)
        if not 0 <= args.pose_index < len(frames):
            raise CliError("bad_argument", f"pose index {args.pose_index} out of range [0, {len(frames)})")
        view = frames[args.pose_index].view.with_time(args.time)
    else:
        view = _orbit_view(args.orbit, cfg, args.resolution, args.resolution, args.time)
    import torch

    with torch.no_grad():
        buf = render(cloud, view, field, render_settings(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_png(out / "color.png", buf.color.numpy())
    n = buf.normal.numpy()
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 0, n / np.maximum(norm, 1e-12), 0.0)
    _write_png(out / "normal.png", 0.5 * (n + 1.0))
    depth = buf.depth.numpy()
    valid = buf.depth_valid.numpy()
    d_min = float(depth[valid].min()) if valid.any() else 0.0
    d_max = float(depth[valid].max()) if valid.any() else 1.0
    span = max(d_max - d_min, 1e-12)
    _write_png(out / "depth.png", np.where(valid, (depth - d_min) / span, 0.0), bits=16)
    sidecar = {"depth_min": d_min, "depth_max": d_max, "encoding": "16-bit linear, 0 = invalid",
               "time": args.time, "width": view.width, "height": view.height}
    (out / "depth.json").write_text(json.dumps(sidecar, indent=2))
    return {"color": str(out / "color.png"), "normal": str(out / "normal.png"),
            "depth": str(out / "depth.png")}


def cmd_extract_mesh(args) -> dict:
    from .mesh import extract_dynamic_mesh, save_obj
    from .scene import save_mesh_ply
    from .train import load_model, render_settings

    cloud, field, cfg = load_model(args.checkpoint)
    if args.divisions:
        cfg.mesh.divisions = args.divisions
    mesh, diag = extract_dynamic_mesh(cloud, field, args.time, cfg=cfg.mesh,
                                      render_settings=render_settings(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".obj":
        save_obj(mesh, out)
    else:
        save_mesh_ply(mesh.vertices, mesh.faces, out)
    diag["mesh"] = str(out)
    return diag


def _collect(path: Path, suffixes) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in suffixes)
    return [path]


def cmd_eval(args) -> dict:
    from . import mesh as M
    from .scene import load_mesh_ply

    if not args.pred or not args.gt:
        raise CliError("missing_input", "eval needs --pred and --gt")
    report = {"conventions": {"cd": M.CD_CONVENTION, "cd_unit": M.CD_UNIT,
                              "emd": "exact assignment, mean cost per point", "psnr_cap": M.PSNR_CAP,
                              "ssim": "11x11 gaussian window, sigma 1.5, luma"},
              "seeds": {"sampling": args.seed}}
    pred, gt = Path(args.pred), Path(args.gt)
    for p in (pred, gt):
        if not p.exists():
            raise CliError("missing_input", f"{p} does not exist")
    images = [(a, b) for a, b in zip(_collect(pred, {".png"}), _collect(gt, {".png"}))]
    meshes = [(a, b) for a, b in zip(_collect(pred, {".ply"}), _collect(gt, {".ply"}))]
    if images:
        ps, ss = [], []
        for a, b in images:
            ia, ib = _read_png(a), _read_png(b)
            ps.append(M.psnr(ia, ib))
            ss.append(M.ssim(ia, ib))
        report.update(psnr=float(np.mean(ps)), ssim=float(np.mean(ss)), n_images=len(images))
    if meshes:
        cds, emds = [], []
        for a, b in meshes:
            ma, mb = (M.Mesh(*load_mesh_ply(p)) for p in (a, b))
            pa, pb = ma.sample(args.samples, args.seed), mb.sample(args.samples, args.seed + 1)
            cds.append(M.chamfer(pa, pb, unit=M.CD_UNIT))
            emds.append(M.emd(pa, pb, seed=args.seed))
        report.update(cd=float(np.mean(cds)), emd=float(np.mean(emds)), n_meshes=len(meshes))
    if not images and not meshes:
        raise CliError("missing_input", "no PNG or PLY pairs found")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return report


def cmd_info(args) -> dict:
    from .config import Config, to_ini

    if args.defaults:
        sys.stdout.write(to_ini(Config()))
        return {}
    if not args.path:
        raise CliError("missing_input", "info needs a path or --defaults")
    path = Path(args.path)
    if (path / "transforms_train.json").exists():
        from .data import load_dataset

        out = {"kind": "dataset", "path": str(path)}
        for split in ("train", "test"):
            if not (path / f"transforms_{split}.json").exists():
                continue
            manifest, frames = load_dataset(path, split)
            times = [f.view.time for f in frames]
            out[split] = {"frames": len(frames), "width": frames[0].view.width,
                          "height": frames[0].view.height, "camera_angle_x": manifest.camera_angle_x,
                          "time_range": [min(times), max(times)]}
        return out
    from .train import load_model, resolve_checkpoint

    ckpt = resolve_checkpoint(path)
    cloud, field, cfg = load_model(ckpt)
    meta = json.loads((ckpt / "meta.json").read_text())
    return {"kind": "checkpoint", "path": str(ckpt), "iteration": meta["iteration"],
            "gaussians": len(cloud), "sh_degree": cloud.sh_degree,
            "field_parameters": sum(p.numel() for p in field.parameters())}


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynsplat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="generate a synthetic dynamic scene")
    s.add_argument("--out", required=True)
    s.add_argument("--primitive", default="sphere", choices=("sphere", "cube", "two-blob"))
    s.add_argument("--motion", default="rotate", choices=("static", "translate", "rotate", "articulate"))
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--views", type=int, default=30)
    s.add_argument("--test-views", type=int, default=10)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="optimize a model on a dataset")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--output")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("render", help="render color/normal/depth at a time")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--time", type=float, default=0.0)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--pose-index", type=int)
    g.add_argument("--orbit", type=float, default=0.0, help="orbit azimuth in degrees")
    s.add_argument("--data")
    s.add_argument("--split", default="test", choices=("train", "test"))
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--out", default="render")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("extract-mesh", help="fuse virtual-view depth into a mesh")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--time", type=float, default=0.0)
    s.add_argument("--divisions", type=int)
    s.add_argument("--out", default="mesh.ply")
    s.set_defaults(fn=cmd_extract_mesh)

    s = sub.add_parser("eval", help="image and mesh metrics as a JSON report")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("info", help="summarize a dataset or checkpoint")
    s.add_argument("path", nargs="?")
    s.add_argument("--defaults", action="store_true", help="print the default config")
    s.set_defaults(fn=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _configure_threads()
    try:
        result = args.fn(args)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    if result:
        print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())

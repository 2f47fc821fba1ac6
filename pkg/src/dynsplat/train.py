"""Training loop: static warmup, then deformation with scheduled regularizers."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config, to_ini, from_ini
from .deform import DeformationField, deform_cloud, load_field, save_field, tv_loss
from .losses import (LambdaSchedule, NeighborGraph, NonFiniteLossError, arap_loss,
                     build_neighbor_graph, gaussian_radii, normal_reg, photometric, total_loss)
from .mesh import psnr
from .optim import Adam, DensifyStats, densify_and_prune, expon_lr
from .render import RenderSettings, rasterize, screen_grad_norm
from .scene import Frame, GaussianCloud, load_ply, save_ply

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


def render_settings(cfg: Config) -> RenderSettings:
    r = cfg.render
    return RenderSettings(background=tuple(r.background), tile_size=r.tile_size, dilation=r.dilation,
                          alpha_max=r.alpha_max, cutoff_sigma=r.cutoff_sigma,
                          min_transmittance=r.min_transmittance, backend=r.backend)


def camera_extent(frames) -> float:
    """1.1 x the largest camera distance from the mean camera centre."""
    centers = np.stack([f.view.T_c for f in frames])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(0), axis=1).max())


def initial_cloud(cfg: Config, generator: torch.Generator) -> GaussianCloud:
    """Random points in a cube with random colours and nearest-neighbour scales."""
    t = cfg.train
    pts = (torch.rand((t.init_points, 3), generator=generator, dtype=torch.float64) * 2 - 1) * t.init_extent
    cols = torch.rand((t.init_points, 3), generator=generator, dtype=torch.float64)
    k = min(3, t.init_points - 1)
    if k > 0:
        d = torch.cdist(pts, pts)
        d.fill_diagonal_(math.inf)
        nn = torch.topk(d, k, largest=False).values.mean(-1).clamp_min(1e-7)
    else:
        nn = torch.full((t.init_points,), 0.01, dtype=torch.float64)
    cloud = GaussianCloud.from_points(pts, cols, scale=1.0, sh_degree=t.sh_degree,
                                      opacity=t.init_opacity, dtype=torch.float32)
    return cloud.replace(scale_raw=torch.log(nn).float().unsqueeze(-1).expand(-1, 3).contiguous())


@dataclass
class TrainResult:
    cloud: GaussianCloud
    field: DeformationField
    history: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    log_path: Path | None = None


class Trainer:
    def __init__(self, cfg: Config, train_frames: list[Frame], test_frames: list[Frame] | None = None,
                 out_dir=None):
        if not train_frames:
            raise ValueError("training set is empty")
        self.cfg = cfg.validate()
        self.frames = train_frames
        self.test_frames = test_frames or []
        self.out = Path(out_dir) if out_dir is not None else None
        self.settings = render_settings(cfg)
        self.schedule = LambdaSchedule(cfg.loss.ramp_start, cfg.loss.ramp_end,
                                       cfg.loss.lambda1, cfg.loss.lambda2)
        self.times = sorted({float(f.view.time) for f in train_frames})
        self.extent = camera_extent(train_frames)
        seed = cfg.train.seed
        torch.manual_seed(seed)
        self.gen = torch.Generator().manual_seed(seed)
        self.field = DeformationField(cfg.field, seed=seed)
        self.opt = self._build_optimizer(initial_cloud(cfg, self.gen))
        self.stats = DensifyStats(len(self.opt.cloud()))
        self.graph = None
        self.graph_size = -1
        self.iteration = 0
        self.history: list[dict] = []
        self.evals: list[dict] = []
        self.checkpoints: list[Path] = []
        self.nonfinite_streak = 0

    # -- setup -------------------------------------------------------------------

    def _build_optimizer(self, cloud: GaussianCloud) -> Adam:
        lr, t = self.cfg.lr, self.cfg.train
        spatial = lr.spatial_scale if lr.spatial_scale > 0 else self.extent
        main = max(t.iterations - t.warmup, 1)
        opt = Adam()
        opt.add_group("mu", cloud.mu.clone().requires_grad_(True),
                      expon_lr(lr.position_init * spatial, lr.position_final * spatial, t.iterations))
        opt.add_group("rot_raw", cloud.rot_raw.clone().requires_grad_(True), lr.rotation)
        opt.add_group("scale_raw", cloud.scale_raw.clone().requires_grad_(True), lr.scaling)
        opt.add_group("opacity_raw", cloud.opacity_raw.clone().requires_grad_(True), lr.opacity)
        sh_scale = torch.full((1, cloud.sh.shape[1], 1), lr.feature_rest_factor)
        sh_scale[:, 0] = 1.0
        opt.add_group("sh", cloud.sh.clone().requires_grad_(True), lr.feature, lr_scale=sh_scale)
        warm = t.warmup
        grid_lr = expon_lr(lr.grid_init, lr.grid_final, main)
        dec_lr = expon_lr(lr.decoder_init, lr.decoder_final, main)
        opt.add_group("grid", self.field.grid_parameters(), lambda s: grid_lr(max(s - warm, 0)))
        opt.add_group("decoder", self.field.decoder_parameters(), lambda s: dec_lr(max(s - warm, 0)))
        return opt

    @property
    def cloud(self) -> GaussianCloud:
        return self.opt.cloud()

    def in_warmup(self, it: int) -> bool:
        return it < self.cfg.train.warmup

    def densify_active(self, it: int) -> bool:
        return not self.in_warmup(it) and it < self.cfg.densify.stop_fraction * self.cfg.train.iterations

    def _randint(self, n: int) -> int:
        return int(torch.randint(n, (1,), generator=self.gen))

    # -- one iteration -------------------------------------------------------------

    def step(self) -> dict:
        it = self.iteration
        cfg = self.cfg
        warm = self.in_warmup(it)
        frame = self.frames[self._randint(len(self.frames))]
        view = frame.view
        gt = torch.from_numpy(frame.image)
        cloud = self.cloud
        deformed = cloud if warm else deform_cloud(cloud, self.field, view.time)
        buf = rasterize(deformed, view, self.settings)
        buf.means2d.retain_grad()

        l1, l2 = self.schedule(it)
        comps = {"photo": photometric(buf.color, gt)}
        if not warm:
            comps["tv"] = cfg.loss.tv_weight * tv_loss(self.field)
        if l1 > 0:
            comps["normal"] = normal_reg(buf.depth, buf.depth_valid, buf.normal, gt, view,
                                         cfg.loss.normal_weight_mode)
        if l2 > 0 and not warm:
            self._refresh_graph(it)
            t2 = self.times[self._randint(len(self.times))]
            comps["arap"] = arap_loss(cloud, self.field, view.time, t2, self.graph,
                                      cfg.train.arap_sample, self.gen)
        try:
            report = total_loss(comps, it, self.schedule)
        except NonFiniteLossError as exc:
            self.nonfinite_streak += 1
            log.warning("%s", exc)
            if self.nonfinite_streak >= cfg.train.max_nonfinite:
                last = self.checkpoints[-1] if self.checkpoints else None
                raise TrainingDiverged(
                    f"loss non-finite for {self.nonfinite_streak} consecutive iterations", last) from exc
            self.opt.zero_grad()
            self.iteration += 1
            self.opt.iteration += 1
            return {"iteration": it, "skipped": True}
        self.nonfinite_streak = 0

        self.opt.zero_grad()
        report.objective.backward()
        if self.densify_active(it) and buf.means2d.grad is not None:
            vis = buf.visible & (buf.radius > 0)
            self.stats.update(screen_grad_norm(buf.means2d.grad, view), vis)
        self.opt.step(frozen=("grid", "decoder") if warm else ())

        entry = json.loads(report.to_json())
        entry["n_gaussians"] = len(cloud)
        entry["warmup"] = warm
        dcfg = cfg.densify
        if self.densify_active(it) and (it + 1) % dcfg.interval == 0:
            entry["densify"] = densify_and_prune(self.opt, self.stats, dcfg, self.extent, self.gen)
        self.iteration += 1
        return entry

    def _refresh_graph(self, it: int) -> None:
        cloud = self.cloud
        stale = self.graph is None or self.graph_size != len(cloud)
        if stale or it % self.cfg.train.graph_interval == 0:
            self.graph = build_neighbor_graph(cloud.mu.detach(), gaussian_radii(cloud.scale_raw),
                                              self.cfg.train.arap_k)
            self.graph_size = len(cloud)

    # -- evaluation & persistence ----------------------------------------------------

    @torch.no_grad()
    def evaluate(self, frames=None) -> dict:
        frames = self.test_frames if frames is None else frames
        scores = []
        for f in frames:
            buf = rasterize(deform_cloud(self.cloud, self.field, f.view.time), f.view, self.settings)
            scores.append(psnr(buf.color.clamp(0, 1), f.image))
        return {"iteration": self.iteration, "psnr": float(np.mean(scores)) if scores else float("nan"),
                "n_views": len(scores)}

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_ply(self.cloud.detach(), path / "cloud.ply")
        save_field(self.field, path / "field.bin")
        arrays = self.opt.state_arrays()
        arrays["stats/grad_accum"] = self.stats.grad_accum.numpy()
        arrays["stats/count"] = self.stats.count.numpy()
        if self.graph is not None:
            for name in ("idx", "dist", "radius", "weights"):
                arrays[f"graph/{name}"] = getattr(self.graph, name).numpy()
            arrays["graph/size"] = np.array(self.graph_size)
        np.savez(path / "optim.npz", **arrays)
        meta = {"iteration": self.iteration, "rng": self.gen.get_state().tolist(),
                "torch_rng": torch.get_rng_state().tolist(), "extent": self.extent,
                "nonfinite_streak": self.nonfinite_streak}
        (path / "meta.json").write_text(json.dumps(meta))
        (path / "config.ini").write_text(to_ini(self.cfg))
        return path

    @classmethod
    def from_checkpoint(cls, path, train_frames, test_frames=None, out_dir=None) -> "Trainer":
        path = Path(path)
        cfg = from_ini((path / "config.ini").read_text())
        trainer = cls(cfg, train_frames, test_frames, out_dir)
        trainer.field = load_field(path / "field.bin")
        trainer.opt = trainer._build_optimizer(load_ply(path / "cloud.ply").to(torch.float32))
        arrays = np.load(path / "optim.npz")
        trainer.opt.load_state_arrays(arrays)
        trainer.stats.grad_accum = torch.from_numpy(arrays["stats/grad_accum"].copy())
        trainer.stats.count = torch.from_numpy(arrays["stats/count"].copy())
        if "graph/idx" in arrays:
            trainer.graph = NeighborGraph(**{k: torch.from_numpy(arrays[f"graph/{k}"].copy())
                                             for k in ("idx", "dist", "radius", "weights")})
            trainer.graph_size = int(arrays["graph/size"])
        meta = json.loads((path / "meta.json").read_text())
        trainer.iteration = meta["iteration"]
        trainer.extent = meta["extent"]
        trainer.nonfinite_streak = meta["nonfinite_streak"]
        trainer.gen.set_state(torch.tensor(meta["rng"], dtype=torch.uint8))
        torch.set_rng_state(torch.tensor(meta["torch_rng"], dtype=torch.uint8))
        return trainer

    # -- driver ---------------------------------------------------------------------

    def run(self, iterations: int | None = None) -> TrainResult:
        total = self.cfg.train.iterations if iterations is None else iterations
        t = self.cfg.train
        log_path = None
        fh = None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            log_path = self.out / "train_log.jsonl"
            fh = open(log_path, "a")
        try:
            while self.iteration < total:
                entry = self.step()
                self.history.append(entry)
                if fh:
                    fh.write(json.dumps(entry) + "\n")
                it = self.iteration
                if self.test_frames and t.eval_interval > 0 and (it % t.eval_interval == 0 or it == total):
                    ev = self.evaluate()
                    self.evals.append(ev)
                    log.info("iteration %d held-out PSNR %.2f dB", it, ev["psnr"])
                # only healthy states become checkpoints, so divergence can point at the last good one
                if self.out is not None and t.checkpoint_interval > 0 and self.nonfinite_streak == 0 and (
                        it % t.checkpoint_interval == 0 or it == total):
                    self.checkpoints.append(self.save_checkpoint(self.out / "checkpoints" / f"iter_{it:06d}"))
        finally:
            if fh:
                fh.close()
        if self.out is not None and self.evals:
            (self.out / "eval.json").write_text(json.dumps(self.evals, indent=2))
        return TrainResult(self.cloud.detach(), self.field, self.history, self.evals,
                           self.checkpoints, log_path)


def train(cfg: Config, train_frames, test_frames=None, out_dir=None) -> TrainResult:
    return Trainer(cfg, train_frames, test_frames, out_dir).run()


def resolve_checkpoint(path) -> Path:
    """A checkpoint directory, or a run directory whose latest checkpoint is used."""
    path = Path(path)
    if (path / "cloud.ply").exists():
        return path
    found = sorted((path / "checkpoints").glob("iter_*")) if (path / "checkpoints").is_dir() else []
    if not found:
        raise FileNotFoundError(f"no checkpoint found under {path}")
    return found[-1]


def load_model(path) -> tuple[GaussianCloud, DeformationField, Config]:
    path = resolve_checkpoint(path)
    cfg = from_ini((path / "config.ini").read_text())
    return load_ply(path / "cloud.ply").to(torch.float32), load_field(path / "field.bin"), cfg

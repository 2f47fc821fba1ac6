"""Adam over named parameter groups and adaptive density control."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .scene import GaussianCloud, normalize_quat, quat_to_rotmat

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = GaussianCloud.PARAM_NAMES


def expon_lr(lr_init: float, lr_final: float, max_steps: int):
    """Log-linear interpolation from lr_init to lr_final over max_steps."""
    def fn(step: int) -> float:
        if max_steps <= 0 or lr_init == lr_final:
            return lr_init
        t = min(max(step / max_steps, 0.0), 1.0)
        return math.exp(math.log(lr_init) * (1 - t) + math.log(lr_final) * t)
    return fn


@dataclass
class ParamGroup:
    name: str
    params: list
    lr: object  # float, or callable(step) -> float
    lr_scale: torch.Tensor | None = None  # optional per-element multiplier, broadcastable
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)
    step: int = 0

    def current_lr(self, iteration: int) -> float:
        return self.lr(iteration) if callable(self.lr) else float(self.lr)


class Adam:
    """Bias-corrected Adam; groups holding a single Gaussian tensor support row edits."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-15):
        self.betas = betas
        self.eps = eps
        self.groups: dict[str, ParamGroup] = {}
        self.iteration = 0
        self.skipped: list[tuple[int, str]] = []

    def add_group(self, name: str, params, lr, lr_scale=None) -> None:
        params = list(params) if isinstance(params, (list, tuple)) else [params]
        self.groups[name] = ParamGroup(
            name, params, lr, lr_scale,
            exp_avg=[torch.zeros_like(p) for p in params],
            exp_avg_sq=[torch.zeros_like(p) for p in params])

    def zero_grad(self) -> None:
        for g in self.groups.values():
            for p in g.params:
                p.grad = None

    @torch.no_grad()
    def step(self, frozen: tuple = ()) -> None:
        b1, b2 = self.betas
        for name, g in self.groups.items():
            if name in frozen:
                continue
            grads = [p.grad for p in g.params]
            if all(gr is None for gr in grads):
                continue
            if any(gr is not None and not bool(torch.isfinite(gr).all()) for gr in grads):
                log.warning("non-finite gradient in group %s at iteration %d; skipped",
                            name, self.iteration)
                self.skipped.append((self.iteration, name))
                continue
            g.step += 1
            lr = g.current_lr(self.iteration)
            bc1 = 1 - b1 ** g.step
            bc2 = 1 - b2 ** g.step
            for p, gr, m, v in zip(g.params, grads, g.exp_avg, g.exp_avg_sq):
                if gr is None:
                    gr = torch.zeros_like(p)
                m.mul_(b1).add_(gr, alpha=1 - b1)
                v.mul_(b2).addcmul_(gr, gr, value=1 - b2)
                update = (m / bc1) / ((v / bc2).sqrt() + self.eps)
                if g.lr_scale is not None:
                    update = update * g.lr_scale
                p.sub_(lr * update)
        self.iteration += 1

    # -- row edits for per-Gaussian groups ------------------------------------

    def _replace_rows(self, name: str, new_param, new_m, new_v) -> torch.Tensor:
        g = self.groups[name]
        p = new_param.detach().requires_grad_(True)
        g.params, g.exp_avg, g.exp_avg_sq = [p], [new_m], [new_v]
        return p

    def keep_rows(self, keep: torch.Tensor) -> None:
        for name in GAUSSIAN_GROUPS:
            g = self.groups[name]
            self._replace_rows(name, g.params[0][keep], g.exp_avg[0][keep], g.exp_avg_sq[0][keep])

    def append_rows(self, new: dict[str, torch.Tensor]) -> None:
        """New rows start with zero moments."""
        for name in GAUSSIAN_GROUPS:
            g = self.groups[name]
            extra = new[name].to(g.params[0].dtype)
            z = torch.zeros_like(extra)
            self._replace_rows(name, torch.cat([g.params[0].detach(), extra]),
                               torch.cat([g.exp_avg[0], z]), torch.cat([g.exp_avg_sq[0], z]))

    def cloud(self) -> GaussianCloud:
        return GaussianCloud(**{k: self.groups[k].params[0] for k in GAUSSIAN_GROUPS})

    # -- persistence -------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"iteration": np.array(self.iteration)}
        for name, g in self.groups.items():
            out[f"{name}/step"] = np.array(g.step)
            for i, (m, v) in enumerate(zip(g.exp_avg, g.exp_avg_sq)):
                out[f"{name}/m{i}"] = m.detach().cpu().numpy()
                out[f"{name}/v{i}"] = v.detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays) -> None:
        self.iteration = int(arrays["iteration"])
        for name, g in self.groups.items():
            g.step = int(arrays[f"{name}/step"])
            g.exp_avg = [torch.from_numpy(np.array(arrays[f"{name}/m{i}"])).to(p.dtype)
                         for i, p in enumerate(g.params)]
            g.exp_avg_sq = [torch.from_numpy(np.array(arrays[f"{name}/v{i}"])).to(p.dtype)
                            for i, p in enumerate(g.params)]
            for p, m in zip(g.params, g.exp_avg):
                if m.shape != p.shape:
                    raise ValueError(f"moment shape {tuple(m.shape)} does not match {name} {tuple(p.shape)}")


# -- density control -------------------------------------------------------------

@dataclass
class DensifyConfig:
    grad_threshold: float = 1e-3
    interval: int = 100
    stop_fraction: float = 0.6
    opacity_floor: float = 0.005
    percent_dense: float = 0.01
    split_factor: float = 1.6
    n_split: int = 2
    max_gaussians: int = 200_000


class DensifyStats:
    """Running mean of the screen-space positional gradient per Gaussian."""

    def __init__(self, n: int):
        self.grad_accum = torch.zeros(n, dtype=torch.float64)
        self.count = torch.zeros(n, dtype=torch.float64)

    def update(self, grad_norm: torch.Tensor, visible: torch.Tensor) -> None:
        self.grad_accum[visible] += grad_norm.detach()[visible].double()
        self.count[visible] += 1

    def mean(self) -> torch.Tensor:
        return torch.where(self.count > 0, self.grad_accum / self.count.clamp_min(1), torch.zeros_like(self.count))

    def reset(self, n: int) -> None:
        self.__init__(n)


def _sample_children(cloud: GaussianCloud, idx, n_split, generator):
    """Positions drawn from each parent's own Gaussian."""
    scale = torch.exp(cloud.scale_raw[idx]).repeat(n_split, 1)
    R = quat_to_rotmat(normalize_quat(cloud.rot_raw[idx])).repeat(n_split, 1, 1)
    eps = torch.randn(scale.shape, generator=generator, dtype=scale.dtype)
    return (R @ (eps * scale).unsqueeze(-1)).squeeze(-1) + cloud.mu[idx].repeat(n_split, 1)


@torch.no_grad()
def densify_and_prune(opt: Adam, stats: DensifyStats, cfg: DensifyConfig, scene_extent: float,
                      generator: torch.Generator | None = None) -> dict:
    """Clone small high-gradient Gaussians, split large ones, prune transparent ones.

    Works on the optimizer's Gaussian groups in place and keeps the Adam
    moment rows aligned with the parameter rows. Returns counts.
    """
    cloud = opt.cloud()
    n = len(cloud)
    grads = stats.mean()
    if grads.numel() != n:
        raise ValueError("densification statistics do not match the cloud")
    max_scale = torch.exp(cloud.scale_raw).amax(dim=-1)
    small = max_scale <= cfg.percent_dense * scene_extent
    hot = grads > cfg.grad_threshold
    room = cfg.max_gaussians - n
    clone_idx = torch.nonzero(hot & small).squeeze(-1)
    split_idx = torch.nonzero(hot & ~small).squeeze(-1)
    if room <= 0:
        clone_idx, split_idx = clone_idx[:0], split_idx[:0]

    new = {k: [] for k in GAUSSIAN_GROUPS}
    for k in GAUSSIAN_GROUPS:
        new[k].append(getattr(cloud, k)[clone_idx])
    if len(split_idx):
        ns = cfg.n_split
        new["mu"].append(_sample_children(cloud, split_idx, ns, generator))
        new["rot_raw"].append(cloud.rot_raw[split_idx].repeat(ns, 1))
        new["scale_raw"].append(cloud.scale_raw[split_idx].repeat(ns, 1) - math.log(cfg.split_factor))
        new["opacity_raw"].append(cloud.opacity_raw[split_idx].repeat(ns, 1))
        new["sh"].append(cloud.sh[split_idx].repeat(ns, 1, 1))
    added = len(clone_idx) + cfg.n_split * len(split_idx)
    if added:
        opt.append_rows({k: torch.cat(v) for k, v in new.items()})

    cloud = opt.cloud()
    keep = torch.sigmoid(cloud.opacity_raw.squeeze(-1)) >= cfg.opacity_floor
    keep[split_idx] = False  # parents are replaced by their children
    pruned = int((~keep).sum()) - len(split_idx)
    if not bool(keep.all()):
        opt.keep_rows(keep)
    stats.reset(len(opt.cloud()))
    return {"cloned": len(clone_idx), "split": len(split_idx), "pruned": pruned,
            "total": len(opt.cloud())}

"""Tile-based differentiable rasterizer for planar Gaussians.

Besides color, every pass blends camera-frame normals and per-Gaussian plane
distances, from which an unbiased depth map is recovered by intersecting each
pixel ray with the blended plane.

Projection, SH evaluation and the planar attributes are plain torch ops. The
per-pixel blend runs in compiled loops (see ``_kernels``) behind a custom
autograd function; a dense torch implementation of the same blend is kept as
``backend="torch"`` for cross-checking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import _kernels
from .scene import CameraView, GaussianCloud, gaussian_normals, normalize_quat, quat_to_rotmat, sh_to_color

NEAR_PLANE = 0.01
DEPTH_EPS = 1e-6
DEPTH_MIN_ALPHA = 0.5


@dataclass
class RenderSettings:
    background: tuple = (1.0, 1.0, 1.0)
    tile_size: int = 16
    dilation: float = 0.3
    alpha_max: float | None = 0.99
    cutoff_sigma: float | None = 3.0
    min_transmittance: float = 1e-4
    tile_culling: bool = True
    backend: str = "compiled"  # or "torch"

    @classmethod
    def test_mode(cls, **kw) -> "RenderSettings":
        """No dilation, no alpha clamp, no 3-sigma cutoff: analytic cases become exact."""
        base = dict(dilation=0.0, alpha_max=None, cutoff_sigma=None, tile_culling=False)
        base.update(kw)
        return cls(**base)


@dataclass
class Projected:
    """Per-Gaussian screen-space quantities (batched over N)."""

    mu_cam: torch.Tensor      # (N, 3)
    means2d: torch.Tensor     # (N, 2) pixel coordinates
    cov2d: torch.Tensor       # (N, 2, 2), dilation included
    conic: torch.Tensor       # (N, 3) inverse cov2d entries (a, b, c)
    radius: torch.Tensor      # (N,) 3-sigma screen radius in pixels
    depth: torch.Tensor       # (N,) camera z
    opacity: torch.Tensor     # (N,)
    color: torch.Tensor       # (N, 3)
    normal_cam: torch.Tensor  # (N, 3)
    plane_dist: torch.Tensor  # (N,)
    visible: torch.Tensor     # (N,) bool


@dataclass
class RenderBuffers:
    color: torch.Tensor       # (H, W, 3)
    normal: torch.Tensor      # (H, W, 3) camera frame, not renormalized
    distance: torch.Tensor    # (H, W)
    depth: torch.Tensor       # (H, W) unbiased depth, 0 where invalid
    depth_valid: torch.Tensor  # (H, W) bool
    acc_alpha: torch.Tensor   # (H, W)
    t_final: torch.Tensor     # (H, W)
    n_contrib: torch.Tensor   # (H, W) int
    means2d: torch.Tensor     # (N, 2), part of the autograd graph
    visible: torch.Tensor     # (N,) bool
    radius: torch.Tensor      # (N,)
    view: CameraView


def _camera_tensors(view: CameraView, dtype):
    R = torch.as_tensor(view.R_c, dtype=dtype)
    T = torch.as_tensor(view.T_c, dtype=dtype)
    return R, T


def project(cloud: GaussianCloud, view: CameraView, settings: RenderSettings | None = None) -> Projected:
    """Camera transform, EWA screen covariance and per-Gaussian planar attributes."""
    settings = settings or RenderSettings()
    dtype = cloud.dtype
    R_c, T_c = _camera_tensors(view, dtype)
    fx, fy, cx, cy = view.fx, view.fy, view.cx, view.cy

    q = normalize_quat(cloud.rot_raw)
    Rg = quat_to_rotmat(q)
    M = Rg * torch.exp(cloud.scale_raw).unsqueeze(-2)
    cov3d = M @ M.transpose(-1, -2)

    mu_cam = (cloud.mu - T_c) @ R_c
    x, y, z = mu_cam.unbind(-1)
    z_safe = torch.where(z > NEAR_PLANE, z, torch.ones_like(z))
    # rows of J for (x, y, z) -> (fx x/z, fy y/z)
    zeros = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([fx / z_safe, zeros, -fx * x / z_safe ** 2], -1),
        torch.stack([zeros, fy / z_safe, -fy * y / z_safe ** 2], -1),
    ], dim=-2)
    W = R_c.t()
    JW = J @ W
    cov2d = JW @ cov3d @ JW.transpose(-1, -2)
    if settings.dilation:
        cov2d = cov2d + settings.dilation * torch.eye(2, dtype=dtype)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det_ok = det > 1e-12
    det_safe = torch.where(det_ok, det, torch.ones_like(det))
    conic = torch.stack([c / det_safe, -b / det_safe, a / det_safe], dim=-1)

    u = fx * x / z_safe + cx
    v = fy * y / z_safe + cy
    means2d = torch.stack([u, v], dim=-1)

    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp_min(mid * mid - det, 0.0))
        radius = 3.0 * torch.sqrt(torch.clamp_min(lam, 0.0))
        on_screen = ((u + radius > 0) & (u - radius < view.width)
                     & (v + radius > 0) & (v - radius < view.height))
        visible = (z > NEAR_PLANE) & det_ok & on_screen

    n_world = gaussian_normals(cloud.rot_raw, cloud.scale_raw, cloud.mu, T_c)
    normal_cam = n_world @ R_c
    plane_dist = (mu_cam * normal_cam).sum(-1)

    dirs = cloud.mu - T_c
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    color = sh_to_color(cloud.sh, dirs)

    return Projected(mu_cam=mu_cam, means2d=means2d, cov2d=cov2d, conic=conic,
                     radius=radius, depth=z, opacity=torch.sigmoid(cloud.opacity_raw).squeeze(-1),
                     color=color, normal_cam=normal_cam, plane_dist=plane_dist, visible=visible)


def alpha_at(pg: Projected, pixel, settings: RenderSettings | None = None) -> torch.Tensor:
    """Opacity contribution of each projected Gaussian at one pixel position."""
    settings = settings or RenderSettings()
    px = torch.as_tensor(pixel, dtype=pg.means2d.dtype)
    d = px - pg.means2d
    power = -0.5 * (pg.conic[:, 0] * d[:, 0] ** 2 + pg.conic[:, 2] * d[:, 1] ** 2) \
        - pg.conic[:, 1] * d[:, 0] * d[:, 1]
    alpha = pg.opacity * torch.exp(power)
    if settings.cutoff_sigma is not None:
        alpha = torch.where(power >= -0.5 * settings.cutoff_sigma ** 2, alpha, torch.zeros_like(alpha))
    if settings.alpha_max is not None:
        alpha = torch.clamp_max(alpha, settings.alpha_max)
    return alpha


def _tile_grid(view: CameraView, ts: int):
    return math.ceil(view.width / ts), math.ceil(view.height / ts)


def _cutoff_power(settings: RenderSettings) -> float:
    return -math.inf if settings.cutoff_sigma is None else -0.5 * settings.cutoff_sigma ** 2


class _BlendFunction(torch.autograd.Function):
    """Compiled blend over depth-sorted per-tile lists, with analytic reverse pass."""

    @staticmethod
    def forward(ctx, means2d, conic, opacity, feats, offsets, ids, view, settings):
        nx, _ = _tile_grid(view, settings.tile_size)
        args = [t.detach().contiguous().numpy() for t in (means2d, conic, opacity, feats)]
        alpha_max = -1.0 if settings.alpha_max is None else float(settings.alpha_max)
        out, t_final, last, n_contrib = _kernels.blend_forward(
            *args, offsets, ids, view.width, view.height, settings.tile_size, nx,
            _cutoff_power(settings), alpha_max, float(settings.min_transmittance))
        ctx.args = args
        ctx.meta = (offsets, ids, last, view, settings, nx, alpha_max)
        n_contrib = torch.from_numpy(n_contrib)
        ctx.mark_non_differentiable(n_contrib)
        return torch.from_numpy(out), torch.from_numpy(t_final), n_contrib

    @staticmethod
    def backward(ctx, g_out, g_tfinal, _g_count):
        offsets, ids, last, view, settings, nx, alpha_max = ctx.meta
        dt = ctx.args[3].dtype
        g_out = np.ascontiguousarray(g_out.numpy(), dtype=dt)
        g_tfinal = np.ascontiguousarray(g_tfinal.numpy(), dtype=dt)
        grads = _kernels.blend_backward(
            *ctx.args, offsets, ids, last, view.width, view.height, settings.tile_size, nx,
            _cutoff_power(settings), alpha_max, g_out, g_tfinal)
        return tuple(torch.from_numpy(g) for g in grads) + (None, None, None, None)


def _blend_compiled(proj: Projected, feats, order, view, settings):
    nx, ny = _tile_grid(view, settings.tile_size)
    offsets, ids = _kernels.bin_tiles(
        proj.means2d.detach().numpy().astype(np.float64), proj.radius.numpy().astype(np.float64),
        order.numpy().astype(np.int64), nx, ny, settings.tile_size, settings.tile_culling)
    return _BlendFunction.apply(proj.means2d, proj.conic, proj.opacity, feats, offsets, ids,
                                view, settings)


def _blend_torch(proj: Projected, feats, order, view, settings):
    """Reference implementation with dense padded tile lists and autograd."""
    dtype = feats.dtype
    H, W, ts = view.height, view.width, settings.tile_size
    nx, ny = _tile_grid(view, ts)
    offsets, ids = _kernels.bin_tiles(
        proj.means2d.detach().numpy().astype(np.float64), proj.radius.numpy().astype(np.float64),
        order.numpy().astype(np.int64), nx, ny, ts, settings.tile_culling)
    counts = np.diff(offsets)
    gmax = int(counts.max()) if counts.size else 0
    n_tiles, n_ch = nx * ny, feats.shape[-1]
    ly, lx = torch.meshgrid(torch.arange(ts), torch.arange(ts), indexing="ij")
    tx = torch.arange(nx).repeat(ny)
    ty = torch.arange(ny).repeat_interleave(nx)
    px = tx[:, None] * ts + lx.reshape(1, -1)
    py = ty[:, None] * ts + ly.reshape(1, -1)
    pix_in = (px < W) & (py < H)
    pix = torch.stack([px, py], dim=-1).to(dtype) + 0.5
    if gmax > 0:
        slot = np.arange(gmax)[None, :]
        valid_np = slot < counts[:, None]
        gidx_np = np.where(valid_np, ids[np.minimum(offsets[:-1, None] + slot, len(ids) - 1)], 0)
        gidx, tile_valid = torch.from_numpy(gidx_np), torch.from_numpy(valid_np)
        m2 = proj.means2d[gidx]
        con = proj.conic[gidx]
        op = proj.opacity[gidx] * tile_valid
        f = feats[gidx]
        d = pix[:, :, None, :] - m2[:, None, :, :]
        dx, dy = d[..., 0], d[..., 1]
        power = (-0.5 * (con[:, None, :, 0] * dx * dx + con[:, None, :, 2] * dy * dy)
                 - con[:, None, :, 1] * dx * dy)
        alpha = op[:, None, :] * torch.exp(torch.clamp_max(power, 0.0))
        alpha = alpha * (power.detach() <= 0)
        if settings.cutoff_sigma is not None:
            alpha = alpha * (power.detach() >= _cutoff_power(settings))
        if settings.alpha_max is not None:
            alpha = torch.clamp_max(alpha, settings.alpha_max)
        with torch.no_grad():
            t_before = torch.cumprod(1 - alpha, dim=-1)
            t_before = torch.cat([torch.ones_like(t_before[..., :1]), t_before[..., :-1]], dim=-1)
            alpha_keep = t_before >= settings.min_transmittance
        alpha = alpha * alpha_keep
        trans = torch.cumprod(1 - alpha, dim=-1)
        t_final = trans[..., -1]
        trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
        out = torch.bmm(alpha * trans, f)
        n_contrib = (alpha.detach() > 0).sum(-1)
    else:
        out = torch.zeros(n_tiles, ts * ts, n_ch, dtype=dtype)
        t_final = torch.ones(n_tiles, ts * ts, dtype=dtype)
        n_contrib = torch.zeros(n_tiles, ts * ts, dtype=torch.long)
    flat = (py * W + px)[pix_in]

    def to_image(v):
        img = torch.zeros((H * W,) + tuple(v.shape[2:]), dtype=v.dtype)
        return img.index_put((flat,), v[pix_in]).reshape((H, W) + tuple(v.shape[2:]))

    return to_image(out), to_image(t_final), to_image(n_contrib)


def rasterize(cloud: GaussianCloud, view: CameraView, settings: RenderSettings | None = None) -> RenderBuffers:
    """Front-to-back alpha blending of color, normal and plane distance."""
    settings = settings or RenderSettings()
    dtype = cloud.dtype
    bg = torch.as_tensor(settings.background, dtype=dtype)

    proj = project(cloud, view, settings)
    vis_idx = torch.nonzero(proj.visible).squeeze(-1)
    # stable sort: equal depths fall back to Gaussian index
    order = vis_idx[torch.argsort(proj.depth.detach()[vis_idx], stable=True)]
    # the trailing ones channel blends to the accumulated opacity
    feats = torch.cat([proj.color, proj.normal_cam, proj.plane_dist.unsqueeze(-1),
                       torch.ones_like(proj.plane_dist).unsqueeze(-1)], dim=-1)
    blend = _blend_compiled if settings.backend == "compiled" else _blend_torch
    out, t_final, n_contrib = blend(proj, feats, order, view, settings)

    color = out[..., :3] + t_final.unsqueeze(-1) * bg
    normal = out[..., 3:6]
    distance = out[..., 6]
    acc = out[..., 7]
    depth, valid = unbiased_depth_from(normal, distance, acc, view)
    return RenderBuffers(color=color, normal=normal, distance=distance, depth=depth,
                         depth_valid=valid, acc_alpha=acc, t_final=t_final,
                         n_contrib=n_contrib, means2d=proj.means2d, visible=proj.visible,
                         radius=proj.radius, view=view)


def unbiased_depth_from(normal, distance, acc_alpha, view: CameraView):
    """Depth where each pixel ray meets the blended plane (normal . x = distance)."""
    rays = torch.as_tensor(view.pixel_rays(), dtype=normal.dtype)
    denom = (normal * rays).sum(-1)
    valid = (denom.detach().abs() >= DEPTH_EPS) & (acc_alpha.detach() >= DEPTH_MIN_ALPHA)
    safe = torch.where(valid, denom, torch.ones_like(denom))
    depth = torch.where(valid, distance / safe, torch.zeros_like(distance))
    return depth, valid


def unbiased_depth(buffers: RenderBuffers, view: CameraView | None = None):
    view = view or buffers.view
    return unbiased_depth_from(buffers.normal, buffers.distance, buffers.acc_alpha, view)


def render(cloud: GaussianCloud, view: CameraView, field=None,
           settings: RenderSettings | None = None) -> RenderBuffers:
    """Deform to the view's time (if a field is given) and rasterize."""
    from .deform import deform_cloud

    return rasterize(deform_cloud(cloud, field, view.time), view, settings)


def backward(buffers: RenderBuffers, upstream: dict, inputs: dict, view: CameraView | None = None):
    """Gradients of <upstream, buffers> with respect to `inputs`.

    `upstream` maps any of color/normal/distance/depth to same-shaped tensors.
    Returns (grads by input name, per-Gaussian screen-space gradient norm).
    """
    if view is not None and view is not buffers.view:
        raise ValueError("buffers were rendered for a different view")
    outs, grads = [], []
    for key, g in upstream.items():
        buf = getattr(buffers, key)
        g = torch.as_tensor(g, dtype=buf.dtype)
        if g.shape != buf.shape:
            raise ValueError(f"upstream {key} has shape {tuple(g.shape)}, expected {tuple(buf.shape)}")
        outs.append(buf)
        grads.append(g)
    names = list(inputs)
    targets = [inputs[k] for k in names] + [buffers.means2d]
    res = torch.autograd.grad(outs, targets, grads, allow_unused=True, retain_graph=True)
    out = {k: (torch.zeros_like(inputs[k]) if r is None else r) for k, r in zip(names, res[:-1])}
    g2d = res[-1] if res[-1] is not None else torch.zeros_like(buffers.means2d)
    return out, screen_grad_norm(g2d, buffers.view)


def screen_grad_norm(grad_means2d: torch.Tensor, view: CameraView) -> torch.Tensor:
    """Norm of the positional gradient expressed in NDC units."""
    scale = torch.tensor([0.5 * view.width, 0.5 * view.height], dtype=grad_means2d.dtype)
    return (grad_means2d * scale).norm(dim=-1)


def to_numpy_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()

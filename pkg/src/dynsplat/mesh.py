"""TSDF fusion, iso-surface extraction and the geometry/image metrics."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numba
import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.signal import convolve2d
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .scene import CameraView, look_at

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
CD_UNIT = 1e-3
CD_CONVENTION = "symmetric mean of unsquared nearest-neighbour distances, halved"


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    tsdf: np.ndarray
    weights: np.ndarray
    trunc_voxels: float = 4.0

    @classmethod
    def create(cls, lo, hi, divisions: int = 256, trunc_voxels: float = 4.0) -> "TsdfVolume":
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        voxel = float((hi - lo).max()) / divisions
        if voxel <= 0:
            raise ValueError("empty volume bounds")
        dims = tuple(int(math.ceil(x)) + 1 for x in (hi - lo) / voxel)
        return cls(lo, voxel, dims, np.ones(dims, np.float32), np.zeros(dims, np.float32), trunc_voxels)

    @property
    def truncation(self) -> float:
        return self.trunc_voxels * self.voxel_size

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.tsdf.copy(),
                          self.weights.copy(), self.trunc_voxels)


@numba.njit(cache=True)
def _integrate(tsdf, weights, origin, voxel, trunc, R_wc, T_c, fx, fy, cx, cy, depth, valid):
    nx, ny, nz = tsdf.shape
    H, W = depth.shape
    for i in range(nx):
        px = origin[0] + i * voxel - T_c[0]
        for j in range(ny):
            py = origin[1] + j * voxel - T_c[1]
            for k in range(nz):
                pz = origin[2] + k * voxel - T_c[2]
                # camera coordinates: R_c^T (p - T_c)
                x = R_wc[0, 0] * px + R_wc[1, 0] * py + R_wc[2, 0] * pz
                y = R_wc[0, 1] * px + R_wc[1, 1] * py + R_wc[2, 1] * pz
                z = R_wc[0, 2] * px + R_wc[1, 2] * py + R_wc[2, 2] * pz
                if z <= 1e-6:
                    continue
                u = int(math.floor(fx * x / z + cx))
                v = int(math.floor(fy * y / z + cy))
                if u < 0 or v < 0 or u >= W or v >= H or not valid[v, u]:
                    continue
                sdf = depth[v, u] - z
                if sdf < -trunc:
                    continue
                val = min(1.0, sdf / trunc)
                w = weights[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * w + val) / (w + 1.0)
                weights[i, j, k] = w + 1.0


def integrate(volume: TsdfVolume, depth, view: CameraView, valid=None) -> TsdfVolume:
    """Fuse one depth map (z-depth along the optical axis) with unit weight."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = (depth > 0) if valid is None else np.asarray(valid, dtype=bool) & (depth > 0)
    if valid.any():
        _integrate(volume.tsdf, volume.weights, volume.origin, volume.voxel_size, volume.truncation,
                   view.R_c, view.T_c, view.fx, view.fy, view.cx, view.cy, depth, valid)
    return volume


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if not np.isfinite(self.vertices).all():
            raise ValueError("non-finite vertices")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def area(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def sample(self, n: int = 100_000, seed: int = 0) -> np.ndarray:
        """Area-uniform surface samples."""
        if self.empty:
            raise ValueError("cannot sample an empty mesh")
        rng = np.random.default_rng(seed)
        area = self.area()
        tri = rng.choice(len(self.faces), size=n, p=area / area.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        a, b, c = (self.vertices[self.faces[tri, i]] for i in range(3))
        return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c

    def largest_component(self) -> "Mesh":
        if self.empty:
            return self
        f = self.faces
        rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        n = len(self.vertices)
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        face_label = labels[f[:, 0]]
        best = np.bincount(face_label).argmax()
        keep_faces = f[face_label == best]
        used = np.unique(keep_faces)
        remap = -np.ones(n, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return Mesh(self.vertices[used], remap[keep_faces])


def marching_cubes(volume: TsdfVolume, iso: float = 0.0) -> Mesh:
    """Iso-surface of the observed part of the volume; empty if there is no crossing."""
    from skimage.measure import marching_cubes as _mc

    observed = volume.weights > 0
    vals = volume.tsdf[observed]
    if vals.size == 0 or vals.min() > iso or vals.max() < iso:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    # a cube is meshed only if all eight corners were observed; unobserved voxels hold
    # the +1 initial value and would otherwise fake a crossing at the truncation band.
    # skimage looks the mask up at the cube's upper corner.
    nx, ny, nz = observed.shape
    cube_ok = observed.copy()
    for di, dj, dk in itertools.product((0, 1), repeat=3):
        if di or dj or dk:
            shifted = np.zeros_like(observed)
            shifted[di:, dj:, dk:] = observed[:nx - di, :ny - dj, :nz - dk]
            cube_ok &= shifted
    try:
        verts, faces, _, _ = _mc(volume.tsdf, level=iso, mask=cube_ok, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    return Mesh(verts * volume.voxel_size + volume.origin, faces)


def sdf_volume(fn, lo, hi, divisions: int) -> TsdfVolume:
    """Volume filled directly from an analytic signed distance (unit weights)."""
    vol = TsdfVolume.create(lo, hi, divisions)
    axes = [vol.origin[a] + vol.voxel_size * np.arange(vol.dims[a]) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vol.tsdf = np.asarray(fn(pts), dtype=np.float32)
    vol.weights = np.ones(vol.dims, np.float32)
    return vol


# -- metrics ----------------------------------------------------------------------------

def _points(x) -> np.ndarray:
    if isinstance(x, Mesh):
        return x.sample()
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point set")
    return pts


def chamfer(a, b, unit: float = 1.0) -> float:
    """(mean_a min_b |a-b| + mean_b min_a |a-b|) / 2, divided by `unit`.

    Meshes are sampled uniformly by area first.
    """
    a, b = _points(a), _points(b)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(0.5 * (d_ab.mean() + d_ba.mean()) / unit)


def one_sided_chamfer(a, b) -> float:
    a, b = _points(a), _points(b)
    return float(cKDTree(b).query(a)[0].mean())


def subsample_equal(a, b, n_max: int = 512, seed: int = 0):
    a, b = _points(a), _points(b)
    n = min(n_max, len(a), len(b))
    rng = np.random.default_rng(seed)
    ia = rng.choice(len(a), n, replace=False) if len(a) > n else np.arange(n)
    ib = rng.choice(len(b), n, replace=False) if len(b) > n else np.arange(n)
    return a[ia], b[ib]


def emd(a, b, n_max: int = 512, seed: int = 0) -> float:
    """Optimal one-to-one matching cost under Euclidean distance, per point."""
    a, b = subsample_equal(a, b, n_max, seed)
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(a))


def _as_array(img) -> np.ndarray:
    if torch.is_tensor(img):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows of the luma channel."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        luma = np.array([0.299, 0.587, 0.114])
        a, b = a @ luma, b @ luma
    size = min(window, a.shape[0], a.shape[1])
    w = _gauss_window(size, sigma)
    filt = lambda x: convolve2d(x, w, mode="valid")
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# -- dynamic mesh extraction -----------------------------------------------------------

def virtual_views(center, radius: float, width: int, height: int, camera_angle_x: float,
                  time: float = 0.0, count: int = 26) -> list[CameraView]:
    """Cameras on a sphere looking at `center`: the 26 cube-neighbour directions."""
    from .scene import intrinsics_from_fov

    dirs = [np.array(d, dtype=np.float64) for d in itertools.product((-1, 0, 1), repeat=3) if any(d)]
    dirs = [d / np.linalg.norm(d) for d in dirs]
    if count < len(dirs):
        dirs = dirs[:: max(1, len(dirs) // count)][:count]
    K = intrinsics_from_fov(camera_angle_x, width, height)
    center = np.asarray(center, dtype=np.float64)
    views = []
    for d in dirs:
        eye = center + radius * d
        views.append(CameraView(K, look_at(eye, center), eye, width, height, time))
    return views


@dataclass
class VolumeConfig:
    lo: tuple = (-1.0, -1.0, -1.0)
    hi: tuple = (1.0, 1.0, 1.0)
    divisions: int = 256
    trunc_voxels: float = 4.0
    view_resolution: int = 128
    view_distance: float = 2.5
    camera_angle_x: float = 0.7
    n_views: int = 26


def extract_dynamic_mesh(cloud, field, t: float, views=None, cfg: VolumeConfig | None = None,
                         render_settings=None) -> tuple[Mesh, dict]:
    """Deform to time t, fuse unbiased depth from virtual views, extract the largest component."""
    from .deform import deform_cloud
    from .render import rasterize

    cfg = cfg or VolumeConfig()
    diag = {"time_clamped": False}
    if not 0.0 <= t <= 1.0:
        log.warning("time %s outside [0, 1]; clamped", t)
        diag["time_clamped"] = True
        t = min(max(t, 0.0), 1.0)
    if views is None:
        center = 0.5 * (np.asarray(cfg.lo) + np.asarray(cfg.hi))
        views = virtual_views(center, cfg.view_distance, cfg.view_resolution, cfg.view_resolution,
                              cfg.camera_angle_x, t, cfg.n_views)
    vol = TsdfVolume.create(cfg.lo, cfg.hi, cfg.divisions, cfg.trunc_voxels)
    with torch.no_grad():
        deformed = deform_cloud(cloud, field, t)
        for view in views:
            buf = rasterize(deformed, view.with_time(t), render_settings)
            integrate(vol, buf.depth.double().numpy(), view, buf.depth_valid.numpy())
    mesh = marching_cubes(vol)
    diag.update(n_views=len(views), voxel_size=vol.voxel_size, raw_faces=len(mesh.faces))
    if mesh.empty:
        log.warning("mesh extraction at t=%s produced no surface", t)
        diag["empty"] = True
        return mesh, diag
    mesh = mesh.largest_component()
    diag.update(empty=False, faces=len(mesh.faces), vertices=len(mesh.vertices))
    return mesh, diag


def save_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")

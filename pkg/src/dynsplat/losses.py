"""Photometric, depth-normal consistency and ARAP losses plus the weighted objective."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import torch

from .scene import CameraView

LUMA = (0.299, 0.587, 0.114)
BRUTE_FORCE_KNN_LIMIT = 20_000


class NonFiniteLossError(FloatingPointError):
    pass


def photometric(render: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over pixels and channels."""
    gt = torch.as_tensor(gt, dtype=render.dtype)
    if render.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(render.shape)} vs {tuple(gt.shape)}")
    return (render - gt).abs().mean()


def grayscale(image) -> torch.Tensor:
    image = torch.as_tensor(image)
    w = torch.tensor(LUMA, dtype=image.dtype)
    return (image * w).sum(-1)


# -- depth/normal consistency ---------------------------------------------------

def normal_from_depth(depth: torch.Tensor, valid: torch.Tensor, view: CameraView):
    """Camera-frame normals of the local plane through each pixel's 4-neighbourhood.

    Returns (normals (H, W, 3), valid (H, W)); border pixels and pixels with
    an invalid neighbour are invalid.
    """
    rays = torch.as_tensor(view.pixel_rays(), dtype=depth.dtype)
    pts = depth.unsqueeze(-1) * rays
    H, W = depth.shape
    normals = torch.zeros(H, W, 3, dtype=depth.dtype)
    ok = torch.zeros(H, W, dtype=torch.bool)
    if H < 3 or W < 3:
        return normals, ok
    left, right = pts[1:-1, :-2], pts[1:-1, 2:]
    top, bottom = pts[:-2, 1:-1], pts[2:, 1:-1]
    n = torch.cross(right - left, bottom - top, dim=-1)
    norm = n.norm(dim=-1, keepdim=True)
    inner_ok = (valid[1:-1, 1:-1] & valid[1:-1, :-2] & valid[1:-1, 2:]
                & valid[:-2, 1:-1] & valid[2:, 1:-1] & (norm.detach().squeeze(-1) > 0))
    n = n / torch.where(norm > 0, norm, torch.ones_like(norm))
    # face the camera: the pixel ray and the normal must point against each other
    flip = ((n * rays[1:-1, 1:-1]).sum(-1, keepdim=True) > 0).detach()
    n = torch.where(flip, -n, n)
    normals = torch.nn.functional.pad(n.permute(2, 0, 1), (1, 1, 1, 1)).permute(1, 2, 0)
    ok[1:-1, 1:-1] = inner_ok
    return normals, ok


def edge_weight(image, mode: str = "intent") -> torch.Tensor:
    """Per-pixel weight from the normalized image-gradient magnitude.

    mode="intent": (1 - g)^5, flat regions count, edges are discounted.
    mode="printed": g^5, the literal form.
    """
    gray = grayscale(image)
    gx = torch.zeros_like(gray)
    gy = torch.zeros_like(gray)
    gx[:, 1:-1] = 0.5 * (gray[:, 2:] - gray[:, :-2])
    gy[1:-1, :] = 0.5 * (gray[2:, :] - gray[:-2, :])
    mag = torch.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    g = mag / peak if peak > 0 else mag
    if mode == "intent":
        return (1 - g) ** 5
    if mode == "printed":
        return g ** 5
    raise ValueError(f"unknown normal weight mode {mode!r}")


def normal_reg(depth, depth_valid, normal_buffer, image, view: CameraView,
               mode: str = "intent", weight: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted L1 gap between depth-derived and rendered (renormalized) normals."""
    n_depth, ok = normal_from_depth(depth, depth_valid, view)
    nrm = normal_buffer.norm(dim=-1, keepdim=True)
    ok = ok & (nrm.detach().squeeze(-1) > 1e-12)
    n_render = normal_buffer / torch.where(nrm > 1e-12, nrm, torch.ones_like(nrm))
    if weight is None:
        weight = edge_weight(torch.as_tensor(image, dtype=depth.dtype), mode)
    count = int(ok.sum())
    if count == 0:
        return depth.sum() * 0.0
    err = (n_depth - n_render).abs().sum(-1)
    return (weight.detach() * err)[ok].sum() / count


# -- ARAP --------------------------------------------------------------------------

@dataclass
class NeighborGraph:
    idx: torch.Tensor      # (N, k) neighbour indices
    dist: torch.Tensor     # (N, k)
    radius: torch.Tensor   # (N, k) radius o_j of each neighbour
    weights: torch.Tensor  # (N, k), rows sum to 1

    @property
    def k(self):
        return self.idx.shape[1]


def knn(positions: torch.Tensor, k: int):
    """Exact k nearest neighbours excluding self, as (indices, distances)."""
    n = positions.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    pts = positions.detach()
    if n <= BRUTE_FORCE_KNN_LIMIT:
        d2 = torch.cdist(pts.double(), pts.double())
        d2.fill_diagonal_(math.inf)
        dist, idx = torch.topk(d2, k, dim=1, largest=False, sorted=True)
        return idx, dist.to(pts.dtype)
    from scipy.spatial import cKDTree

    tree = cKDTree(pts.double().numpy())
    dist, idx = tree.query(pts.double().numpy(), k=k + 1)
    return torch.from_numpy(idx[:, 1:]), torch.from_numpy(dist[:, 1:]).to(pts.dtype)


def neighbor_weights(dist: torch.Tensor, radius: torch.Tensor) -> torch.Tensor:
    """exp(-d^2 / 2 o^2) normalized over the neighbourhood (computed as a softmax)."""
    logits = -dist ** 2 / (2 * radius ** 2)
    return torch.softmax(logits, dim=-1)


def build_neighbor_graph(positions: torch.Tensor, radii: torch.Tensor, k: int = 10) -> NeighborGraph:
    idx, dist = knn(positions, k)
    o = radii.detach()[idx]
    return NeighborGraph(idx=idx, dist=dist, radius=o, weights=neighbor_weights(dist, o))


def gaussian_radii(scale_raw: torch.Tensor) -> torch.Tensor:
    """Geometric mean of the activated scales."""
    return torch.exp(scale_raw.detach().mean(-1))


def estimate_local_rotation(off1: torch.Tensor, off2: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted best-fit rotation R minimizing sum w |off1 - R off2|^2 (batched).

    Shapes (..., k, 3), (..., k, 3), (..., k). All-zero neighbourhoods give I.
    """
    H = torch.einsum("...k,...ki,...kj->...ij", weights, off2, off1)
    U, _, Vh = torch.linalg.svd(H)
    V = Vh.transpose(-1, -2)
    d = torch.sign(torch.linalg.det(V @ U.transpose(-1, -2)))
    d = torch.where(d == 0, torch.ones_like(d), d)
    D = torch.diag_embed(torch.stack([torch.ones_like(d), torch.ones_like(d), d], dim=-1))
    R = V @ D @ U.transpose(-1, -2)
    degenerate = H.abs().amax(dim=(-1, -2)) == 0
    eye = torch.eye(3, dtype=R.dtype).expand_as(R)
    return torch.where(degenerate[..., None, None], eye, R)


def rigidity_residual(off1, off2, weights, R) -> torch.Tensor:
    diff = off1 - torch.einsum("...ij,...kj->...ki", R, off2)
    return (weights * diff.pow(2).sum(-1)).sum(-1)


def _arap_terms(pos1, pos2, centers, nb, w) -> torch.Tensor:
    off1 = pos1[centers].unsqueeze(1) - pos1[nb]
    off2 = pos2[centers].unsqueeze(1) - pos2[nb]
    with torch.no_grad():
        R = estimate_local_rotation(off1.detach(), off2.detach(), w)
    return rigidity_residual(off1, off2, w, R).mean()


def arap_from_positions(pos1: torch.Tensor, pos2: torch.Tensor, graph: NeighborGraph,
                        sample: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over sampled centres of the weighted rigidity residual.

    The per-centre rotation is fitted on detached positions and held constant.
    """
    if sample is None:
        sample = torch.arange(pos1.shape[0])
    return _arap_terms(pos1, pos2, sample, graph.idx[sample], graph.weights[sample].to(pos1.dtype))


def arap_loss(cloud, field, t1: float, t2: float, graph: NeighborGraph,
              sample_size: int = 4096, generator: torch.Generator | None = None) -> torch.Tensor:
    """Deform the sampled Gaussians and their neighbours to t1 and t2 and score rigidity."""
    n = len(cloud)
    m = min(sample_size, n)
    sample = torch.randperm(n, generator=generator)[:m] if m < n else torch.arange(n)
    involved, inverse = torch.unique(torch.cat([sample, graph.idx[sample].reshape(-1)]),
                                     return_inverse=True)
    mu = cloud.mu[involved]
    p1 = mu + field(mu, t1).d_mu
    p2 = mu + field(mu, t2).d_mu
    return _arap_terms(p1, p2, inverse[:m], inverse[m:].reshape(m, -1),
                       graph.weights[sample].to(p1.dtype))


# -- objective ---------------------------------------------------------------------

@dataclass
class LambdaSchedule:
    start: int = 7000
    end: int = 9000
    lambda1: float = 0.05
    lambda2: float = 0.02

    def __call__(self, iteration: int) -> tuple[float, float]:
        return lambda_schedule(iteration, self.start, self.end, self.lambda1, self.lambda2)


def lambda_schedule(iteration: int, start: int = 7000, end: int = 9000,
                    lambda1: float = 0.05, lambda2: float = 0.02) -> tuple[float, float]:
    """Zero before `start`, linear ramp to (lambda1, lambda2) at `end`, flat after."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if iteration <= start:
        frac = 0.0
    elif iteration >= end:
        frac = 1.0
    else:
        frac = (iteration - start) / (end - start)
    return lambda1 * frac, lambda2 * frac


@dataclass
class LossReport:
    photo: float
    tv: float
    normal: float
    arap: float
    lambda1: float
    lambda2: float
    total: float
    iteration: int
    objective: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "objective"}
        return json.dumps(d)


def total_loss(components: dict, iteration: int, schedule=None) -> LossReport:
    """photo + tv + lambda1 * normal + lambda2 * arap; missing terms count as 0."""
    schedule = schedule or LambdaSchedule()
    l1, l2 = schedule(iteration)
    terms = {k: components.get(k, 0.0) for k in ("photo", "tv", "normal", "arap")}
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteLossError(f"non-finite loss terms {bad} at iteration {iteration}: {values}")
    objective = terms["photo"] + terms["tv"] + l1 * terms["normal"] + l2 * terms["arap"]
    is_tensor = torch.is_tensor(objective)
    total = float(objective.detach()) if is_tensor else float(objective)
    return LossReport(photo=values["photo"], tv=values["tv"], normal=values["normal"],
                      arap=values["arap"], lambda1=l1, lambda2=l2, total=total,
                      iteration=iteration, objective=objective if is_tensor else None)

"""HexPlane spatio-temporal encoder and deformation decoder."""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scene import GaussianCloud

# (x, y, z, t) axis pairs; the first three planes are purely spatial
PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
BLOB_MAGIC = b"DSHF"
BLOB_VERSION = 1


@dataclass
class FieldConfig:
    bounds: tuple = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
    base_res: int = 32
    time_res: int = 16
    multires: tuple = (1, 2)
    feat_dim: int = 16
    width: int = 64
    depth: int = 2
    init_offset: float = 0.3     # spatial planes ~ U(offset - range, offset + range)
    init_range: float = 0.2
    time_init: float = 1.0       # time planes start constant


@dataclass
class DeformOutput:
    d_mu: torch.Tensor
    d_rot: torch.Tensor
    d_scale: torch.Tensor

    @classmethod
    def zeros(cls, n: int, dtype=torch.float32) -> "DeformOutput":
        return cls(torch.zeros(n, 3, dtype=dtype), torch.zeros(n, 4, dtype=dtype),
                   torch.zeros(n, 3, dtype=dtype))


class HexPlaneField(nn.Module):
    """Six feature planes per scale, fused by elementwise product.

    Plane grids are stored as (1, C, res_b, res_a) for axis pair (a, b) so
    that ``F.grid_sample`` reads axis a along the width.
    """

    def __init__(self, cfg: FieldConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("aabb", torch.tensor(cfg.bounds, dtype=torch.float32))
        self.grids = nn.ModuleList()
        for mult in cfg.multires:
            res = [cfg.base_res * mult] * 3 + [cfg.time_res]
            planes = nn.ParameterList()
            for a, b in PLANE_AXES:
                if res[a] < 2 or res[b] < 2:
                    raise ValueError("plane resolution must be >= 2 per axis")
                noise = torch.rand((1, cfg.feat_dim, res[b], res[a]), generator=generator)
                if b == 3:
                    grid = torch.full_like(noise, cfg.time_init)
                else:
                    grid = (2 * noise - 1) * cfg.init_range + cfg.init_offset
                planes.append(nn.Parameter(grid))
            self.grids.append(planes)
        self.out_dim = cfg.feat_dim * len(cfg.multires)
        self.last_out_of_bounds = 0

    def normalize(self, mu: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        lo, hi = self.aabb[0].to(mu.dtype), self.aabb[1].to(mu.dtype)
        pts = (mu - lo) / (hi - lo) * 2 - 1
        coords = torch.cat([pts, t.reshape(-1, 1).expand(mu.shape[0], 1) * 2 - 1], dim=-1)
        outside = (coords.detach().abs() > 1).any(dim=-1)
        self.last_out_of_bounds = int(outside.sum())
        return coords.clamp(-1, 1)

    def forward(self, mu: torch.Tensor, t) -> torch.Tensor:
        """Feature vector per point: (N, 3) positions and scalar or (N,) times."""
        t = torch.as_tensor(t, dtype=mu.dtype)
        coords = self.normalize(mu, t)
        feats = []
        for planes in self.grids:
            fused = 1.0
            for (a, b), grid in zip(PLANE_AXES, planes):
                uv = coords[:, [a, b]].view(1, 1, -1, 2)
                val = F.grid_sample(grid.to(mu.dtype), uv, mode="bilinear",
                                    padding_mode="border", align_corners=True)
                fused = fused * val.view(grid.shape[1], -1).t()
            feats.append(fused)
        return torch.cat(feats, dim=-1)

    encode = forward

    def node_coords(self, scale_idx: int, plane_idx: int, ia: int, ib: int) -> tuple[float, float]:
        """World (or time) coordinates of node (ia, ib) on a plane; test helper."""
        a, b = PLANE_AXES[plane_idx]
        grid = self.grids[scale_idx][plane_idx]
        res_b, res_a = grid.shape[2], grid.shape[3]
        lo, hi = self.aabb[0].tolist() + [0.0], self.aabb[1].tolist() + [1.0]
        return (lo[a] + (hi[a] - lo[a]) * ia / (res_a - 1),
                lo[b] + (hi[b] - lo[b]) * ib / (res_b - 1))


class DeformDecoder(nn.Module):
    def __init__(self, in_dim: int, width: int = 64, depth: int = 2):
        super().__init__()
        layers, d = [], in_dim
        for _ in range(depth):
            layers += [nn.Linear(d, width), nn.ReLU()]
            d = width
        self.trunk = nn.Sequential(*layers)
        self.in_dim = in_dim
        self.head_mu = nn.Linear(d, 3)
        self.head_rot = nn.Linear(d, 4)
        self.head_scale = nn.Linear(d, 3)
        for head in (self.head_mu, self.head_rot, self.head_scale):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, feat: torch.Tensor) -> DeformOutput:
        if feat.shape[-1] != self.in_dim:
            raise ValueError(f"feature width {feat.shape[-1]} != decoder input {self.in_dim}")
        h = self.trunk(feat)
        return DeformOutput(self.head_mu(h), self.head_rot(h), self.head_scale(h))


class DeformationField(nn.Module):
    """HexPlane encoder followed by the compact decoder."""

    def __init__(self, cfg: FieldConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        gen = torch.Generator().manual_seed(seed)
        self.hexplane = HexPlaneField(self.cfg, generator=gen)
        # decoder init pulls from the global RNG; keep it on our seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.decoder = DeformDecoder(self.hexplane.out_dim, self.cfg.width, self.cfg.depth)

    def forward(self, mu: torch.Tensor, t) -> DeformOutput:
        return self.decoder(self.hexplane(mu, t))

    def grid_parameters(self):
        return list(self.hexplane.parameters())

    def decoder_parameters(self):
        return list(self.decoder.parameters())


def apply_deformation(cloud: GaussianCloud, d: DeformOutput) -> GaussianCloud:
    """Add offsets to raw position, quaternion and log-scale; opacity and SH pass through."""
    return GaussianCloud(
        mu=cloud.mu + d.d_mu,
        rot_raw=cloud.rot_raw + d.d_rot,
        scale_raw=cloud.scale_raw + d.d_scale,
        opacity_raw=cloud.opacity_raw,
        sh=cloud.sh,
    )


def deform_cloud(cloud: GaussianCloud, field: DeformationField | None, t: float) -> GaussianCloud:
    if field is None or len(cloud) == 0:
        return cloud
    return apply_deformation(cloud, field(cloud.mu, t))


def tv_loss(field: HexPlaneField | DeformationField) -> torch.Tensor:
    if isinstance(field, DeformationField):
        field = field.hexplane
    total = 0.0
    for planes in field.grids:
        for grid in planes:
            dx = grid[..., :, 1:] - grid[..., :, :-1]
            dy = grid[..., 1:, :] - grid[..., :-1, :]
            total = total + dx.pow(2).mean() + dy.pow(2).mean()
    return total


def save_field(field: DeformationField, path) -> None:
    """Versioned header followed by little-endian float32 parameter data."""
    state = field.state_dict()
    header = {
        "config": asdict(field.cfg),
        "tensors": [[k, list(v.shape)] for k, v in state.items()],
    }
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC + struct.pack("<II", BLOB_VERSION, len(raw)) + raw)
        for v in state.values():
            fh.write(np.ascontiguousarray(v.detach().cpu().numpy(), dtype="<f4").tobytes())


def load_field(path) -> DeformationField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != BLOB_MAGIC:
        raise ValueError("not a deformation-field blob")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != BLOB_VERSION:
        raise ValueError(f"unsupported field blob version {version}")
    header = json.loads(blob[12:12 + hlen])
    cfg = header["config"]
    cfg["bounds"] = tuple(tuple(b) for b in cfg["bounds"])
    cfg["multires"] = tuple(cfg["multires"])
    field = DeformationField(FieldConfig(**cfg))
    offset, state = 12 + hlen, {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(blob):
            raise ValueError("truncated field blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        offset += 4 * count
    field.load_state_dict(state)
    return field

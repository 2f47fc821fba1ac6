"""Gaussian cloud, camera geometry and PLY persistence."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

NORMAL_TIE_EPS = 1e-9


class DegenerateRotationError(ValueError):
    pass


class PlyFormatError(ValueError):
    pass


def sh_terms(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_terms(n: int) -> int:
    degree = int(round(math.sqrt(n))) - 1
    if sh_terms(degree) != n or not 0 <= degree <= 3:
        raise ValueError(f"{n} SH terms does not match a degree in 0..3")
    return degree


def eval_sh_basis(degree: int, dirs: torch.Tensor) -> torch.Tensor:
    """Real SH basis values (..., (degree+1)**2) for unit directions (..., 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy),
                SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return torch.stack(out, dim=-1)


def sh_to_color(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate (N, K, 3) coefficients along (N, 3) unit view directions.

    Uses the usual +0.5 offset and clamps negative colors to zero.
    """
    basis = eval_sh_basis(sh_degree_from_terms(sh.shape[-2]), dirs)
    color = (basis.unsqueeze(-1) * sh).sum(dim=-2) + 0.5
    return torch.clamp_min(color, 0.0)


def rgb_to_sh_dc(rgb):
    return (rgb - 0.5) / SH_C0


# -- activations --------------------------------------------------------------

def normalize_quat(rot_raw: torch.Tensor) -> torch.Tensor:
    norm = rot_raw.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateRotationError("zero-norm quaternion")
    return rot_raw / norm


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) unit quaternions in (w, x, y, z) order to (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (w, x, y, z), numpy, single matrix."""
    m = np.asarray(R, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def build_covariance(rot_raw: torch.Tensor, scale_raw: torch.Tensor) -> torch.Tensor:
    """R diag(s)^2 R^T from raw quaternion and log-scale; batched over leading dims."""
    R = quat_to_rotmat(normalize_quat(rot_raw))
    M = R * torch.exp(scale_raw).unsqueeze(-2)
    return M @ M.transpose(-1, -2)


def smallest_axis_index(scales: torch.Tensor) -> torch.Tensor:
    # ties within NORMAL_TIE_EPS resolve to the lowest axis index
    near_min = scales <= scales.min(dim=-1, keepdim=True).values + NORMAL_TIE_EPS
    return near_min.to(torch.uint8).argmax(dim=-1)


def gaussian_normals(rot_raw: torch.Tensor, scale_raw: torch.Tensor,
                     mu: torch.Tensor, cam_center: torch.Tensor) -> torch.Tensor:
    """World-space unit normals along each Gaussian's shortest axis, facing the camera."""
    R = quat_to_rotmat(normalize_quat(rot_raw))
    idx = smallest_axis_index(scale_raw.detach())
    n = torch.gather(R, -1, idx.view(-1, 1, 1).expand(-1, 3, 1)).squeeze(-1)
    facing = ((n * (mu - cam_center)).sum(-1, keepdim=True) > 0).detach()
    return torch.where(facing, -n, n)


# -- cloud --------------------------------------------------------------------

@dataclass
class GaussianCloud:
    """Raw (pre-activation) parameters of N Gaussians.

    sh is stored as (N, K, 3) with K = (degree+1)**2 coefficients per channel.
    """

    mu: torch.Tensor
    rot_raw: torch.Tensor
    scale_raw: torch.Tensor
    opacity_raw: torch.Tensor
    sh: torch.Tensor

    PARAM_NAMES = ("mu", "rot_raw", "scale_raw", "opacity_raw", "sh")

    def __post_init__(self):
        n = self.mu.shape[0]
        shapes = {"mu": (n, 3), "rot_raw": (n, 4), "scale_raw": (n, 3), "opacity_raw": (n, 1)}
        for name, shape in shapes.items():
            if tuple(getattr(self, name).shape) != shape:
                raise ValueError(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")
        if self.sh.dim() != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ValueError(f"sh has shape {tuple(self.sh.shape)}, expected (N, K, 3)")
        sh_degree_from_terms(self.sh.shape[1])

    def __len__(self):
        return self.mu.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_terms(self.sh.shape[1])

    @property
    def dtype(self):
        return self.mu.dtype

    @property
    def quat(self):
        return normalize_quat(self.rot_raw)

    @property
    def scale(self):
        return torch.exp(self.scale_raw)

    @property
    def opacity(self):
        return torch.sigmoid(self.opacity_raw)

    def params(self) -> dict[str, torch.Tensor]:
        return {k: getattr(self, k) for k in self.PARAM_NAMES}

    def replace(self, **kw) -> "GaussianCloud":
        p = self.params()
        p.update(kw)
        return GaussianCloud(**p)

    def detach(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach().clone() for k, v in self.params().items()})

    def to(self, dtype) -> "GaussianCloud":
        return GaussianCloud(**{k: v.to(dtype) for k, v in self.params().items()})

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{k: v[idx] for k, v in self.params().items()})

    def covariance(self) -> torch.Tensor:
        return build_covariance(self.rot_raw, self.scale_raw)

    def normals(self, cam_center) -> torch.Tensor:
        c = torch.as_tensor(cam_center, dtype=self.dtype)
        return gaussian_normals(self.rot_raw, self.scale_raw, self.mu, c)

    @classmethod
    def empty(cls, sh_degree: int = 1, dtype=torch.float32) -> "GaussianCloud":
        k = sh_terms(sh_degree)
        z = lambda *s: torch.zeros(s, dtype=dtype)
        return cls(z(0, 3), z(0, 4), z(0, 3), z(0, 1), z(0, k, 3))

    @classmethod
    def from_points(cls, points, colors, scale: float, sh_degree: int = 1,
                    opacity: float = 0.1, dtype=torch.float32) -> "GaussianCloud":
        pts = torch.as_tensor(np.asarray(points), dtype=dtype)
        n = pts.shape[0]
        sh = torch.zeros((n, sh_terms(sh_degree), 3), dtype=dtype)
        sh[:, 0, :] = rgb_to_sh_dc(torch.as_tensor(np.asarray(colors), dtype=dtype))
        rot = torch.zeros((n, 4), dtype=dtype)
        rot[:, 0] = 1.0
        return cls(
            mu=pts.clone(),
            rot_raw=rot,
            scale_raw=torch.full((n, 3), math.log(scale), dtype=dtype),
            opacity_raw=torch.full((n, 1), math.log(opacity / (1 - opacity)), dtype=dtype),
            sh=sh,
        )


# -- camera -------------------------------------------------------------------

@dataclass
class CameraView:
    """Pinhole camera. R_c maps camera to world, T_c is the camera center.

    Camera frame is +z forward, +x right, +y down; pixel (i, j) is sampled at
    (j + 0.5, i + 0.5).
    """

    K: np.ndarray
    R_c: np.ndarray
    T_c: np.ndarray
    width: int
    height: int
    time: float = 0.0

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R_c = np.asarray(self.R_c, dtype=np.float64).reshape(3, 3)
        self.T_c = np.asarray(self.T_c, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        self.time = float(self.time)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R_c @ self.R_c.T, np.eye(3), atol=1e-6) or np.linalg.det(self.R_c) < 0:
            raise ValueError("R_c must be a proper rotation")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"time {self.time} outside [0, 1]")

    @property
    def fx(self):
        return self.K[0, 0]

    @property
    def fy(self):
        return self.K[1, 1]

    @property
    def cx(self):
        return self.K[0, 2]

    @property
    def cy(self):
        return self.K[1, 2]

    def pixel_rays(self) -> np.ndarray:
        """K^-1 m~ for every pixel center, shape (H, W, 3) with z = 1."""
        j, i = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        return np.stack([(j - self.cx) / self.fx, (i - self.cy) / self.fy, np.ones_like(j)], axis=-1)

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.T_c) @ self.R_c

    def with_time(self, t: float) -> "CameraView":
        return CameraView(self.K, self.R_c, self.T_c, self.width, self.height, t)

    def scaled(self, factor: float) -> "CameraView":
        K = self.K.copy()
        K[:2] *= factor
        return CameraView(K, self.R_c, self.T_c, round(self.width * factor),
                          round(self.height * factor), self.time)


def intrinsics_from_fov(camera_angle_x: float, width: int, height: int) -> np.ndarray:
    f = 0.5 * width / math.tan(0.5 * camera_angle_x)
    return np.array([[f, 0, width / 2.0], [0, f, height / 2.0], [0, 0, 1.0]])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation for a +z-forward, +y-down camera at eye."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


@dataclass
class Frame:
    view: CameraView
    image: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.shape != (self.view.height, self.view.width, 3):
            raise ValueError(f"image shape {self.image.shape} does not match view "
                             f"{self.view.height}x{self.view.width}")


# -- PLY ----------------------------------------------------------------------

_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


def _ply_fields(sh_terms_: int) -> list[str]:
    names = ["x", "y", "z"] + [f"rot_{i}" for i in range(4)] + [f"scale_{i}" for i in range(3)]
    names += ["opacity"] + [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (sh_terms_ - 1))]
    return names


def save_ply(cloud: GaussianCloud, path) -> None:
    """Binary little-endian PLY, one property per raw scalar."""
    n, k = len(cloud), cloud.sh.shape[1]
    ply_type = "double" if cloud.dtype == torch.float64 else "float"
    sh = cloud.sh.detach().cpu()
    cols = [cloud.mu, cloud.rot_raw, cloud.scale_raw, cloud.opacity_raw,
            sh[:, 0, :], sh[:, 1:, :].transpose(1, 2).reshape(n, 3 * (k - 1))]
    data = torch.cat([c.detach().cpu() for c in cols], dim=1).numpy()
    names = _ply_fields(k)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {ply_type} {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype=_PLY_TYPES[ply_type]).tobytes())


def _read_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyFormatError("missing 'ply' magic")
    lines = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyFormatError("unterminated header")
        line = line.decode("ascii", errors="replace").strip()
        if line == "end_header":
            return lines
        lines.append(line)


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        lines = _read_header(fh)
        payload = fh.read()
    fmt = next((ln for ln in lines if ln.startswith("format")), None)
    if fmt is None or "binary_little_endian" not in fmt:
        raise PlyFormatError("only binary_little_endian PLY is supported")
    count, props = None, []
    for ln in lines:
        parts = ln.split()
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise PlyFormatError(f"unexpected element {parts[1]}")
            count = int(parts[2])
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise PlyFormatError(f"unsupported property line: {ln}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if count is None:
        raise PlyFormatError("missing vertex element")
    names = [p[0] for p in props]
    n_rest = sum(1 for p in names if p.startswith("f_rest_"))
    if n_rest % 3:
        raise PlyFormatError("f_rest_* count must be a multiple of 3")
    expected = _ply_fields(n_rest // 3 + 1)
    missing = [p for p in expected if p not in names]
    if missing or len(names) != len(expected):
        raise PlyFormatError(f"schema mismatch; missing properties {missing}")
    dtype = np.dtype([(name, t) for name, t in props])
    if len(payload) < count * dtype.itemsize:
        raise PlyFormatError(f"truncated payload: {len(payload)} bytes for {count} vertices")
    rec = np.frombuffer(payload, dtype=dtype, count=count)
    tdtype = torch.float64 if all(t == "<f8" for _, t in props) else torch.float32

    def cols(*fields):
        arr = np.stack([rec[f] for f in fields], axis=1) if fields else np.zeros((count, 0))
        return torch.from_numpy(np.ascontiguousarray(arr)).to(tdtype).reshape(count, len(fields))

    k = n_rest // 3 + 1
    dc = cols("f_dc_0", "f_dc_1", "f_dc_2").unsqueeze(1)
    rest = cols(*[f"f_rest_{i}" for i in range(n_rest)]).reshape(count, 3, k - 1).transpose(1, 2)
    return GaussianCloud(
        mu=cols("x", "y", "z"),
        rot_raw=cols(*[f"rot_{i}" for i in range(4)]),
        scale_raw=cols(*[f"scale_{i}" for i in range(3)]),
        opacity_raw=cols("opacity"),
        sh=torch.cat([dc, rest], dim=1).contiguous(),
    )


def save_mesh_ply(vertices: np.ndarray, faces: np.ndarray, path) -> None:
    vertices = np.asarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vertices)}",
              "property float x", "property float y", "property float z",
              f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header"]
    face_rec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face_rec["n"] = 3
    face_rec["idx"] = faces
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(vertices.tobytes())
        fh.write(face_rec.tobytes())


def load_mesh_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Reader for the triangle PLYs written by save_mesh_ply."""
    with open(path, "rb") as fh:
        lines = _read_header(fh)
        payload = fh.read()
    counts = {}
    for ln in lines:
        parts = ln.split()
        if parts[0] == "element":
            counts[parts[1]] = int(parts[2])
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    verts = np.frombuffer(payload, dtype="<f4", count=nv * 3).reshape(nv, 3)
    face_rec = np.frombuffer(payload, dtype=[("n", "u1"), ("idx", "<i4", (3,))],
                             count=nf, offset=nv * 12)
    if nf and not np.all(face_rec["n"] == 3):
        raise PlyFormatError("only triangle faces are supported")
    return verts.astype(np.float64), face_rec["idx"].astype(np.int64)

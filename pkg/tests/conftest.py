import numpy as np
import pytest
import torch

from dynsplat.scene import CameraView, GaussianCloud, intrinsics_from_fov, look_at, rotmat_to_quat


def make_view(width=8, height=8, f=8.0, R=None, T=(0.0, 0.0, 0.0), time=0.0):
    K = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
    return CameraView(K, np.eye(3) if R is None else R, np.asarray(T, dtype=float), width, height, time)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def planar_gaussian(center, normal, size=50.0, thickness=1e-4, opacity=0.9999, color=(0.2, 0.4, 0.6),
                    dtype=torch.float64):
    """One flat Gaussian whose shortest axis is `normal`."""
    n = np.asarray(normal, dtype=float)
    n /= np.linalg.norm(n)
    a = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(a, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    q = rotmat_to_quat(np.stack([u, v, n], axis=1))
    cloud = GaussianCloud.from_points(np.asarray([center], dtype=float), np.asarray([color]), 1.0,
                                      sh_degree=0, opacity=opacity, dtype=dtype)
    return cloud.replace(rot_raw=torch.tensor(q[None], dtype=dtype),
                         scale_raw=torch.log(torch.tensor([[size, size, thickness]], dtype=dtype)))


def random_cloud(n, seed=0, sh_degree=1, dtype=torch.float64, depth=(2.0, 4.0), spread=0.6,
                 scale=(0.08, 0.3)):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.rand(s, generator=g, dtype=dtype)
    mu = torch.stack([(r(n) * 2 - 1) * spread, (r(n) * 2 - 1) * spread,
                      depth[0] + r(n) * (depth[1] - depth[0])], dim=-1)
    k = (sh_degree + 1) ** 2
    return GaussianCloud(
        mu=mu,
        rot_raw=torch.randn((n, 4), generator=g, dtype=dtype),
        scale_raw=torch.log(scale[0] + r(n, 3) * (scale[1] - scale[0])),
        opacity_raw=torch.randn((n, 1), generator=g, dtype=dtype),
        sh=0.5 * torch.randn((n, k, 3), generator=g, dtype=dtype),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

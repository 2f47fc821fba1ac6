import math

import numpy as np
import pytest
import torch

from dynsplat.render import (RenderSettings, alpha_at, backward, project, rasterize, screen_grad_norm,
                             unbiased_depth)
from dynsplat.scene import SH_C0, GaussianCloud, look_at

from conftest import make_view, planar_gaussian, random_cloud, random_rotation

TEST = RenderSettings.test_mode()


def iso_gaussian(mu, scale=1.0, opacity=0.5, color=(1.0, 0.0, 0.0), dtype=torch.float64):
    c = GaussianCloud.from_points(np.asarray([mu], dtype=float), np.asarray([color]), scale,
                                  sh_degree=0, opacity=0.5, dtype=dtype)
    raw = 40.0 if opacity >= 1 else math.log(opacity / (1 - opacity))
    return c.replace(opacity_raw=torch.tensor([[raw]], dtype=dtype))


def merge(*clouds):
    return GaussianCloud(**{k: torch.cat([getattr(c, k) for c in clouds]) for k in GaussianCloud.PARAM_NAMES})


def pixel_center_point(view, i, j, z):
    """World point at depth z whose projection is the centre of pixel (i, j) (identity pose)."""
    return [(j + 0.5 - view.cx) / view.fx * z, (i + 0.5 - view.cy) / view.fy * z, z]


# -- projection ---------------------------------------------------------------

def test_on_axis_isotropic_projection():
    f = 20.0
    view = make_view(32, 32, f=f)
    pg = project(iso_gaussian([0, 0, 2.0]), view, TEST)
    assert torch.allclose(pg.cov2d[0], (f / 2) ** 2 * torch.eye(2, dtype=torch.float64), atol=1e-9)


def test_behind_camera_culled():
    pg = project(iso_gaussian([0, 0, -1.0]), make_view(), TEST)
    assert not bool(pg.visible[0])


def test_far_offscreen_culled():
    pg = project(iso_gaussian([100.0, 0, 2.0], scale=0.01), make_view(), RenderSettings())
    assert not bool(pg.visible[0])


def test_roll_preserves_eigenvalues():
    view = make_view(32, 32, f=20.0)
    g = iso_gaussian([0, 0, 3.0], scale=0.4)
    base = torch.linalg.eigvalsh(project(g, view, TEST).cov2d[0])
    for ang in (0.3, 1.1, 2.5):
        c, s = math.cos(ang), math.sin(ang)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        rolled = make_view(32, 32, f=20.0, R=R)
        ev = torch.linalg.eigvalsh(project(g, rolled, TEST).cov2d[0])
        assert torch.allclose(ev, base, atol=1e-9)


def test_projection_matches_numerical_jacobian(rng):
    # oracle: Jacobian of the full world->pixel map by central differences
    for _ in range(10):
        R = random_rotation(rng)
        T = rng.normal(size=3)
        view = make_view(40, 30, f=35.0, R=R, T=T)
        mu = T + R @ np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(2, 4)])
        cloud = random_cloud(1).replace(mu=torch.from_numpy(mu[None]))
        pg = project(cloud, view, TEST)

        def pix(p):
            c = (p - T) @ R
            return np.array([view.fx * c[0] / c[2] + view.cx, view.fy * c[1] / c[2] + view.cy])

        Jw = np.stack([(pix(mu + e * 1e-6) - pix(mu - e * 1e-6)) / 2e-6 for e in np.eye(3)], axis=1)
        cov = cloud.covariance()[0].numpy()
        np.testing.assert_allclose(pg.cov2d[0].numpy(), Jw @ cov @ Jw.T, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(pg.means2d[0].numpy(), pix(mu), atol=1e-9)


# -- alpha ---------------------------------------------------------------------------

def test_alpha_at_center():
    view = make_view(32, 32, f=20.0)
    pg = project(iso_gaussian([0, 0, 2.0], opacity=0.999), view, RenderSettings())
    assert float(alpha_at(pg, pg.means2d[0].detach())[0]) == pytest.approx(0.99)
    pg = project(iso_gaussian([0, 0, 2.0], opacity=0.4), view, RenderSettings())
    assert float(alpha_at(pg, pg.means2d[0].detach())[0]) == pytest.approx(0.4)


def test_alpha_hand_value_unit_covariance():
    # Sigma' = I on screen: f/z * s = 1 with f=20, z=2 -> s = 0.1
    view = make_view(32, 32, f=20.0)
    pg = project(iso_gaussian([0, 0, 2.0], scale=0.1, opacity=1.0), view, TEST)
    assert torch.allclose(pg.cov2d[0], torch.eye(2, dtype=torch.float64))
    a = alpha_at(pg, pg.means2d[0].detach() + torch.tensor([math.sqrt(2), 0.0], dtype=torch.float64), TEST)
    assert float(a[0]) == pytest.approx(0.3679, abs=1e-4)


def test_alpha_zero_opacity():
    pg = project(iso_gaussian([0, 0, 2.0], opacity=1e-30), make_view(), TEST)
    assert float(alpha_at(pg, pg.means2d[0].detach())[0]) == pytest.approx(0.0, abs=1e-29)


# -- blending ----------------------------------------------------------------------

def test_empty_cloud():
    buf = rasterize(GaussianCloud.empty(sh_degree=0, dtype=torch.float64), make_view())
    assert torch.equal(buf.color, torch.ones(8, 8, 3, dtype=torch.float64))
    assert float(buf.acc_alpha.abs().max()) == 0.0
    assert not bool(buf.depth_valid.any())


def test_single_gaussian_one_term_blend():
    view = make_view(8, 8, f=8.0)
    mu = pixel_center_point(view, 3, 3, 2.0)
    c = (0.2, 0.6, 0.9)
    g = iso_gaussian(mu, scale=0.05, opacity=0.999, color=c)
    buf = rasterize(g, view, RenderSettings(background=(1.0, 1.0, 1.0)))
    np.testing.assert_allclose(buf.color[3, 3].numpy(), 0.99 * np.array(c) + 0.01, atol=1e-12)


def test_two_gaussians_front_half_back_opaque():
    view = make_view(8, 8, f=8.0)
    c1, c2 = (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)
    front = iso_gaussian(pixel_center_point(view, 3, 3, 2.0), scale=0.05, opacity=0.5, color=c1)
    back = iso_gaussian(pixel_center_point(view, 3, 3, 3.0), scale=0.05, opacity=1.0, color=c2)
    buf = rasterize(merge(back, front), view, RenderSettings.test_mode(background=(0.3, 0.3, 0.3)))
    np.testing.assert_allclose(buf.color[3, 3].numpy(), [0.5, 0.0, 0.5], atol=1e-12)


def _oracle_back_to_front(cloud, view, bg):
    """Independent per-pixel compositing from the far end using numpy."""
    pg = project(cloud, view, TEST)
    mean = pg.means2d.detach().numpy()
    cov = pg.cov2d.detach().numpy()
    op = pg.opacity.detach().numpy()
    col = pg.color.detach().numpy()
    order = np.argsort(pg.depth.detach().numpy(), kind="stable")[::-1]
    img = np.zeros((view.height, view.width, 3))
    for i in range(view.height):
        for j in range(view.width):
            C = np.asarray(bg, dtype=float)
            for g in order:
                d = np.array([j + 0.5, i + 0.5]) - mean[g]
                a = op[g] * math.exp(-0.5 * d @ np.linalg.solve(cov[g], d))
                C = a * col[g] + (1 - a) * C
            img[i, j] = C
    return img


@pytest.mark.parametrize("seed", range(4))
def test_front_to_back_equals_back_to_front(seed):
    cloud = random_cloud(12, seed=seed)
    view = make_view(12, 10, f=10.0)
    bg = (0.2, 0.5, 0.7)
    settings = RenderSettings.test_mode(background=bg, min_transmittance=0.0)
    buf = rasterize(cloud, view, settings)
    np.testing.assert_allclose(buf.color.numpy(), _oracle_back_to_front(cloud, view, bg), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_weights_plus_transmittance_is_one(seed):
    cloud = random_cloud(40, seed=seed, dtype=torch.float32)
    buf = rasterize(cloud, make_view(32, 24, f=20.0))
    total = (buf.acc_alpha + buf.t_final).double()
    assert float((total - 1).abs().max()) <= 1e-6


def test_early_termination_includes_crossing_contributor():
    view = make_view(8, 8, f=8.0)
    mu = pixel_center_point(view, 3, 3, 2.0)
    gs = [iso_gaussian([mu[0] * (1 + 0.1 * k), mu[1] * (1 + 0.1 * k), 2.0 * (1 + 0.1 * k)],
                       scale=0.05, opacity=0.8) for k in range(10)]
    buf = rasterize(merge(*gs), view, RenderSettings(alpha_max=None, dilation=0.0, cutoff_sigma=None,
                                                     tile_culling=False))
    # T after k contributors = 0.2**k; 0.2**5 = 3.2e-4 >= 1e-4 lets the sixth in
    assert int(buf.n_contrib[3, 3]) == 6
    assert float(buf.t_final[3, 3]) == pytest.approx(0.2 ** 6, rel=1e-9)


def test_equal_depth_ties_follow_index():
    view = make_view(8, 8, f=8.0)
    mu = pixel_center_point(view, 3, 3, 2.0)
    a = iso_gaussian(mu, scale=0.05, opacity=0.6, color=(1, 0, 0))
    b = iso_gaussian(mu, scale=0.05, opacity=0.6, color=(0, 1, 0))
    c_ab = rasterize(merge(a, b), view, TEST).color[3, 3]
    c_ba = rasterize(merge(b, a), view, TEST).color[3, 3]
    assert float(c_ab[0]) > float(c_ab[1]) and float(c_ba[1]) > float(c_ba[0])


def test_render_deterministic():
    cloud = random_cloud(30, seed=7, dtype=torch.float32)
    view = make_view(24, 24, f=20.0)
    a, b = rasterize(cloud, view), rasterize(cloud, view)
    assert torch.equal(a.color, b.color) and torch.equal(a.depth, b.depth)


@pytest.mark.parametrize("settings", [RenderSettings(), RenderSettings.test_mode()])
def test_backends_agree(settings):
    cloud = random_cloud(25, seed=3)
    params = {k: v.clone().requires_grad_(True) for k, v in cloud.params().items()}
    view = make_view(20, 18, f=16.0)
    up = torch.randn(18, 20, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    res = []
    for backend in ("compiled", "torch"):
        s = RenderSettings(**{**settings.__dict__, "backend": backend})
        buf = rasterize(GaussianCloud(**params), view, s)
        grads, sg = backward(buf, {"color": up, "distance": up[..., 0]}, params)
        res.append((buf, grads, sg))
    (b1, g1, s1), (b2, g2, s2) = res
    for key in ("color", "normal", "distance", "acc_alpha", "t_final"):
        assert torch.allclose(getattr(b1, key), getattr(b2, key), atol=1e-10), key
    for k in g1:
        assert torch.allclose(g1[k], g2[k], atol=1e-9), k
    assert torch.allclose(s1, s2, atol=1e-9)


# -- unbiased depth ---------------------------------------------------------------

def test_fronto_parallel_plane_depth_constant():
    view = make_view(16, 16, f=16.0)
    buf = rasterize(planar_gaussian([0.1, -0.2, 2.0], [0, 0, 1]), view, TEST)
    assert bool(buf.depth_valid.all())
    assert torch.allclose(buf.depth, torch.full((16, 16), 2.0, dtype=torch.float64), atol=1e-9)


def _plane_oracle(view, center, normal):
    """Per-pixel z-depth of the ray/plane intersection, all in world space."""
    rays = view.pixel_rays()  # camera frame, z = 1
    d_world = rays @ view.R_c.T
    s = ((np.asarray(center) - view.T_c) @ normal) / (d_world @ normal)
    return s  # z = 1 rays: the ray parameter is the camera z


def test_tilted_plane_depth_matches_ray_plane():
    view = make_view(16, 16, f=14.0)
    n = np.array([0.3, -0.2, -1.0])
    n /= np.linalg.norm(n)
    center = [0.05, 0.02, 2.5]
    buf = rasterize(planar_gaussian(center, n), view, TEST)
    np.testing.assert_allclose(buf.depth.numpy(), _plane_oracle(view, center, n), rtol=1e-6)


def test_unbiased_depth_random_planes(rng):
    for _ in range(20):
        R = random_rotation(rng)
        T = rng.normal(size=3)
        view = make_view(12, 12, f=12.0, R=R, T=T)
        z = rng.uniform(1.5, 4.0)
        center = T + R @ np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), z])
        n_cam = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), -1.0])
        n = R @ (n_cam / np.linalg.norm(n_cam))
        buf = rasterize(planar_gaussian(center, n), view, TEST)
        assert bool(buf.depth_valid.all())
        oracle = _plane_oracle(view, center, n)
        rel = np.abs(buf.depth.numpy() - oracle) / oracle
        assert rel.max() <= 1e-3


def test_zero_alpha_pixel_invalid():
    view = make_view(16, 16, f=16.0)
    g = iso_gaussian(pixel_center_point(view, 2, 2, 2.0), scale=0.02, opacity=0.99)
    buf = rasterize(g, view)
    assert float(buf.acc_alpha[12, 12]) == 0.0
    assert not bool(buf.depth_valid[12, 12])
    depth, valid = unbiased_depth(buf)
    assert torch.equal(valid, buf.depth_valid)


# -- gradients -----------------------------------------------------------------

def test_sh_gradient_single_opaque_pixel():
    view = make_view(8, 8, f=8.0)
    g = iso_gaussian(pixel_center_point(view, 4, 5, 2.0), scale=0.02, opacity=1.0, color=(0.3, 0.4, 0.5))
    params = {k: v.clone().requires_grad_(True) for k, v in g.params().items()}
    buf = rasterize(GaussianCloud(**params), view, RenderSettings.test_mode(cutoff_sigma=3.0))
    up = torch.zeros(8, 8, 3, dtype=torch.float64)
    up[4, 5] = torch.tensor([0.7, -1.3, 2.0], dtype=torch.float64)
    grads, _ = backward(buf, {"color": up}, params)
    np.testing.assert_allclose(grads["sh"][0, 0].numpy(), up[4, 5].numpy() * SH_C0, atol=1e-12)


def test_zero_upstream_zero_gradients():
    cloud = random_cloud(5)
    params = {k: v.clone().requires_grad_(True) for k, v in cloud.params().items()}
    buf = rasterize(GaussianCloud(**params), make_view())
    grads, sg = backward(buf, {"color": torch.zeros(8, 8, 3, dtype=torch.float64)}, params)
    assert all(float(g.abs().max()) == 0 for g in grads.values())
    assert float(sg.abs().max()) == 0


def test_backward_rejects_wrong_view_and_shape():
    cloud = random_cloud(3)
    params = {k: v.clone().requires_grad_(True) for k, v in cloud.params().items()}
    buf = rasterize(GaussianCloud(**params), make_view())
    with pytest.raises(ValueError):
        backward(buf, {"color": torch.zeros(8, 8, 3, dtype=torch.float64)}, params, view=make_view())
    with pytest.raises(ValueError):
        backward(buf, {"color": torch.zeros(4, 4, 3, dtype=torch.float64)}, params)


def test_screen_grad_norm_ndc_units():
    view = make_view(64, 32)
    g = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert screen_grad_norm(g, view).tolist() == [32.0, 16.0]

"""D-NeRF style dataset reading/writing and the analytic synthetic scenes."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import CameraView, Frame, intrinsics_from_fov, look_at, save_mesh_ply

# Blender cameras look down -z with +y up; internally +z is forward and +y down.
BLENDER_TO_CV = np.diag([1.0, -1.0, -1.0])
ROTATION_TOL = 1e-4


class DatasetError(ValueError):
    pass


@dataclass
class DatasetManifest:
    camera_angle_x: float
    frames: list
    split: str
    root: Path


def pose_from_blender(c2w) -> tuple[np.ndarray, np.ndarray]:
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape != (4, 4):
        raise DatasetError(f"transform_matrix must be 4x4, got {c2w.shape}")
    R = c2w[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=ROTATION_TOL) or abs(np.linalg.det(R) - 1) > ROTATION_TOL:
        raise DatasetError("transform_matrix rotation block is not orthonormal")
    return R @ BLENDER_TO_CV, c2w[:3, 3].copy()


def pose_to_blender(R_c, T_c) -> np.ndarray:
    c2w = np.eye(4)
    c2w[:3, :3] = np.asarray(R_c) @ BLENDER_TO_CV
    c2w[:3, 3] = T_c
    return c2w


def _read_image(path: Path, background, downscale: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing image {path}")
    img = Image.open(path)
    img.load()
    arr = np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
    rgb, a = arr[..., :3], arr[..., 3:]
    rgb = rgb * a + np.asarray(background, dtype=np.float32) * (1 - a)
    if downscale > 1:
        h, w = rgb.shape[0] // downscale, rgb.shape[1] // downscale
        rgb = rgb[:h * downscale, :w * downscale].reshape(h, downscale, w, downscale, 3).mean(axis=(1, 3))
    return rgb


def load_dataset(path, split: str = "train", downscale: int = 1,
                 background=(1.0, 1.0, 1.0)) -> tuple[DatasetManifest, list[Frame]]:
    """Read transforms_{split}.json and its images into internal-convention frames.

    The per-frame ``rotation`` field some D-NeRF exports carry is ignored.
    """
    root = Path(path)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.exists():
        raise DatasetError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        angle = float(meta["camera_angle_x"])
        entries = meta["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed {meta_path.name}: {exc}") from exc
    frames = []
    for i, entry in enumerate(entries):
        try:
            file_path = entry["file_path"]
            c2w = entry["transform_matrix"]
            t = float(entry.get("time", 0.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"frame {i}: {exc}") from exc
        if not 0.0 <= t <= 1.0:
            raise DatasetError(f"frame {i}: time {t} outside [0, 1]")
        img_path = root / file_path
        if img_path.suffix.lower() != ".png":
            img_path = img_path.with_name(img_path.name + ".png")
        image = _read_image(img_path, background, downscale)
        h, w = image.shape[:2]
        R_c, T_c = pose_from_blender(c2w)
        view = CameraView(intrinsics_from_fov(angle, w, h), R_c, T_c, w, h, t)
        frames.append(Frame(view, image, name=str(file_path)))
    manifest = DatasetManifest(camera_angle_x=angle, frames=entries, split=split, root=root)
    return manifest, frames


def write_dataset(root, split: str, camera_angle_x: float, views, images, alphas=None) -> Path:
    """Write frames as RGBA PNGs plus transforms_{split}.json."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (view, img) in enumerate(zip(views, images)):
        rgb = np.clip(np.asarray(img), 0, 1)
        a = np.ones(rgb.shape[:2]) if alphas is None else np.clip(np.asarray(alphas[i]), 0, 1)
        rgba = np.concatenate([rgb, a[..., None]], axis=-1)
        name = f"{split}/r_{i:03d}"
        Image.fromarray(np.round(rgba * 255).astype(np.uint8), "RGBA").save(root / f"{name}.png")
        entries.append({"file_path": f"./{name}", "time": view.time,
                        "transform_matrix": pose_to_blender(view.R_c, view.T_c).tolist()})
    out = root / f"transforms_{split}.json"
    out.write_text(json.dumps({"camera_angle_x": camera_angle_x, "frames": entries}, indent=2))
    return out


# -- synthetic scenes -----------------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    primitive: str = "sphere"       # sphere | cube | two-blob
    motion: str = "rotate"          # static | translate | rotate | articulate
    n_frames: int = 20
    n_views: int = 30
    n_test_views: int = 10
    resolution: int = 64
    seed: int = 0
    radius: float = 0.5
    camera_distance: float = 2.5
    camera_angle_x: float = 0.7
    rotation_degrees: float = 60.0
    translation: tuple = (0.4, 0.0, 0.0)
    supersample: int = 3

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")
        if self.primitive not in ("sphere", "cube", "two-blob"):
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if self.motion not in ("static", "translate", "rotate", "articulate"):
            raise ValueError(f"unknown motion {self.motion!r}")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_frames)


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def _parts(spec: SyntheticSceneSpec, t: float):
    """Rigid parts at time t as (kind, size, R, center, texture_seed)."""
    r = spec.radius
    R = np.eye(3)
    c = np.zeros(3)
    if spec.motion == "rotate":
        R = rot_z(math.radians(spec.rotation_degrees) * t)
    elif spec.motion == "translate":
        c = np.asarray(spec.translation, dtype=np.float64) * (t - 0.5)
    if spec.primitive == "sphere":
        return [("sphere", r, R, c, 0)]
    if spec.primitive == "cube":
        return [("cube", r, R, c, 0)]
    # two blobs side by side; under articulation the second swings about the first
    off = np.array([0.6 * r, 0.0, 0.0])
    a = R @ -off + c
    swing = rot_z(math.radians(spec.rotation_degrees) * t) if spec.motion == "articulate" else np.eye(3)
    b = a + swing @ R @ (2 * off)
    return [("sphere", 0.6 * r, R, a, 0), ("sphere", 0.6 * r, swing @ R, b, 1)]


def texture(p_local: np.ndarray, size: float, seed: int) -> np.ndarray:
    """Smooth procedural albedo on the part's local surface coordinates."""
    q = p_local / size
    u = np.arctan2(q[..., 1], q[..., 0])
    v = np.clip(q[..., 2], -1, 1)
    ph = 0.7 * seed
    col = np.stack([
        0.55 + 0.35 * np.sin(3 * u + ph),
        0.50 + 0.30 * np.sin(2.5 * math.pi * v + ph),
        0.45 + 0.30 * np.cos(2 * u - 2 * math.pi * v),
    ], axis=-1)
    return np.clip(col, 0, 1)


def _intersect(kind, size, o, d):
    """Ray parameter of the first hit in the part's local frame (inf on miss)."""
    if kind == "sphere":
        b = (o * d).sum(-1)
        c = (o * o).sum(-1) - size ** 2
        disc = b * b - c
        s = -b - np.sqrt(np.maximum(disc, 0))
        return np.where((disc >= 0) & (s > 0), s, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-size - o) * inv
        t1 = (size - o) * inv
    tmin = np.minimum(t0, t1).max(-1)
    tmax = np.maximum(t0, t1).min(-1)
    return np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)


def trace(spec: SyntheticSceneSpec, view: CameraView, background=(1.0, 1.0, 1.0)):
    """Supersampled analytic render: (rgb (H, W, 3), alpha (H, W))."""
    ss = spec.supersample
    H, W = view.height, view.width
    jj, ii = np.meshgrid((np.arange(W * ss) + 0.5) / ss, (np.arange(H * ss) + 0.5) / ss)
    dirs = np.stack([(jj - view.cx) / view.fx, (ii - view.cy) / view.fy, np.ones_like(jj)], -1)
    dirs = dirs @ view.R_c.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    best = np.full(dirs.shape[:2], np.inf)
    color = np.broadcast_to(np.asarray(background, dtype=np.float64), dirs.shape).copy()
    for kind, size, R, c, tex in _parts(spec, view.time):
        o = (view.T_c - c) @ R
        d = dirs @ R
        s = _intersect(kind, size, o, d)
        hit = s < best
        if hit.any():
            p = o + s[hit][:, None] * d[hit]
            color[hit] = texture(p, size, tex)
            best[hit] = s[hit]
    alpha = np.isfinite(best).astype(np.float64)
    # box-filter the supersamples
    color = color.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    alpha = alpha.reshape(H, ss, W, ss).mean(axis=(1, 3))
    return color, alpha


def icosphere(level: int = 3) -> tuple[np.ndarray, np.ndarray]:
    phi = (1 + 5 ** 0.5) / 2
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0), (0, -1, phi), (0, 1, phi),
             (0, -1, -phi), (0, 1, -phi), (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache, new_faces = {}, []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def cube_mesh(half: float, divisions: int = 8) -> tuple[np.ndarray, np.ndarray]:
    g = np.linspace(-1, 1, divisions + 1)
    verts, faces = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u, v = np.meshgrid(g, g, indexing="ij")
            pts = np.zeros(u.shape + (3,))
            a1, a2 = [a for a in range(3) if a != axis]
            pts[..., axis] = sign
            pts[..., a1], pts[..., a2] = u, v
            base = sum(len(x) for x in verts)
            verts.append(pts.reshape(-1, 3))
            n = divisions + 1
            for i in range(divisions):
                for j in range(divisions):
                    q = [base + i * n + j, base + (i + 1) * n + j, base + (i + 1) * n + j + 1,
                         base + i * n + j + 1]
                    tri = [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
                    if (sign > 0) != (axis == 1):
                        tri = [(a, c, b) for a, b, c in tri]
                    faces += tri
    return np.concatenate(verts) * half, np.array(faces, dtype=np.int64)


def ground_truth_mesh(spec: SyntheticSceneSpec, t: float, level: int = 3):
    all_v, all_f, base = [], [], 0
    for kind, size, R, c, _ in _parts(spec, t):
        if kind == "sphere":
            v, f = icosphere(level)
            v = v * size
        else:
            v, f = cube_mesh(size)
        all_v.append(v @ R.T + c)
        all_f.append(f + base)
        base += len(v)
    return np.concatenate(all_v), np.concatenate(all_f)


def camera_ring(spec: SyntheticSceneSpec, n: int, rng: np.random.Generator, times) -> list[CameraView]:
    K = intrinsics_from_fov(spec.camera_angle_x, spec.resolution, spec.resolution)
    views = []
    for i in range(n):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        d[2] = np.clip(d[2], -0.9, 0.9)  # keep away from the up-vector singularity
        d /= np.linalg.norm(d)
        eye = d * spec.camera_distance
        views.append(CameraView(K, look_at(eye, np.zeros(3)), eye, spec.resolution,
                                spec.resolution, float(times[i])))
    return views


def generate_synthetic(spec: SyntheticSceneSpec, out_dir) -> Path:
    """Render a synthetic dynamic scene to disk in D-NeRF layout with GT meshes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    grid = spec.times
    train_times = grid[np.arange(spec.n_views) % spec.n_frames]
    test_times = grid[rng.integers(0, spec.n_frames, size=spec.n_test_views)]
    for split, n, times in (("train", spec.n_views, train_times), ("test", spec.n_test_views, test_times)):
        views = camera_ring(spec, n, rng, times)
        rendered = [trace(spec, v) for v in views]
        write_dataset(out, split, spec.camera_angle_x, views, [r[0] for r in rendered],
                      [r[1] for r in rendered])
    mesh_dir = out / "meshes"
    mesh_dir.mkdir(exist_ok=True)
    entries = []
    for k, t in enumerate(grid):
        v, f = ground_truth_mesh(spec, float(t))
        name = f"frame_{k:03d}.ply"
        save_mesh_ply(v, f, mesh_dir / name)
        entries.append({"file": name, "time": float(t)})
    (mesh_dir / "meshes.json").write_text(json.dumps(entries, indent=2))
    (out / "scene.json").write_text(json.dumps(asdict(spec), indent=2))
    return out


def load_gt_meshes(root) -> list[tuple[float, Path]]:
    mesh_dir = Path(root) / "meshes"
    entries = json.loads((mesh_dir / "meshes.json").read_text())
    return [(e["time"], mesh_dir / e["file"]) for e in entries]

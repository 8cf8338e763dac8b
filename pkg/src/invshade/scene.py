"""Synthetic scenes with known geometry, albedo and lighting, and their on-disk layout.

Ground truth is produced by this package's own rasterizer and renderer: a
finely tessellated displaced mesh with a procedural albedo texture, lit by
white point-like probes arranged on the 26 directions of a 3x3x3 lattice.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio, geom
from .bvh import build_bvh
from .config import SceneConfig
from .fields import UVField, field_query
from .geom import Pose, TriangleMesh
from .raster import Camera, GBuffer, rasterize
from .shade import LightProbeSphere, direction_to_cell, probe_sphere, shading_image, visibility

RECIPES = ("bumpy_plane", "sphere_boxes", "rotating_object", "clothed_template")


@dataclass
class FrameImages:
    gt_rgb: np.ndarray
    gt_normal: np.ndarray | None = None
    gt_albedo: np.ndarray | None = None
    gt_shading: np.ndarray | None = None
    gt_mask: np.ndarray | None = None
    # (H, W, 2) pixel in the next frame showing the same surface point, -1 if none
    gt_next: np.ndarray | None = None


@dataclass
class SceneDataset:
    cameras: list[Camera]
    poses: list[Pose]
    images: dict[tuple[int, int], FrameImages]
    base_mesh: TriangleMesh
    gt_mesh: TriangleMesh | None = None
    gt_albedo_texture: UVField | None = None
    gt_probes: LightProbeSphere | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def keys(self) -> list[tuple[int, int]]:
        return [(v, f) for f in range(self.n_frames) for v in range(self.n_views)]

    def validate(self):
        for (v, f), img in self.images.items():
            cam = self.cameras[v]
            if img.gt_rgb.shape != (cam.height, cam.width, 3):
                raise ValueError(f"view {v} frame {f}: image shape {img.gt_rgb.shape} does not match camera")
        if len(self.images) != self.n_views * self.n_frames:
            raise ValueError("dataset is missing (view, frame) images")


# ---------------------------------------------------------------------------
# lighting


def lattice_directions(count: int = 26) -> np.ndarray:
    """The 26 non-zero directions of the {-1,0,1}^3 lattice (first ``count`` of them)."""
    dirs = np.array([d for d in itertools.product((-1.0, 0.0, 1.0), repeat=3) if any(d)])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if not 1 <= count <= len(dirs):
        raise ValueError(f"light count must be in [1, {len(dirs)}]")
    return dirs[:count]


def light_rig(n_lights: int, n_lat: int, n_lon: int, power: float = 1.0) -> LightProbeSphere:
    """White impulses: each light deposits ``power`` into the probe cell containing its direction."""
    probes = probe_sphere(n_lat, n_lon)
    rad = np.zeros((n_lat, n_lon))
    for d in lattice_directions(n_lights):
        i, j = direction_to_cell(probes, d)
        rad[i, j] += power / probes.solid_angles[i * n_lon + j]
    probes.radiance = np.repeat(rad[..., None], 3, axis=2)
    return probes


def sky_envmap(height: int = 64, width: int = 128) -> np.ndarray:
    """Procedural held-out lighting: warm sun, bluish sky gradient, dim ground."""
    theta = (np.arange(height) + 0.5) / height * np.pi
    phi = (np.arange(width) + 0.5) / width * 2 * np.pi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    d = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1)
    up = np.clip(d[..., 2], 0.0, 1.0)[..., None]
    sky = np.array([0.25, 0.32, 0.45]) * (0.4 + 0.6 * up)
    ground = np.array([0.12, 0.10, 0.08]) * (d[..., 2] < 0)[..., None]
    sun_dir = np.array([0.5, -0.35, 0.79])
    sun_dir /= np.linalg.norm(sun_dir)
    sun = np.exp((d @ sun_dir - 1.0) / 0.01)[..., None] * np.array([6.0, 5.2, 4.0])
    return np.where(d[..., 2:3] >= 0, sky, ground) + sun


# ---------------------------------------------------------------------------
# textures


def _albedo_pattern(uv: np.ndarray) -> np.ndarray:
    """Smooth procedural albedo in [0.15, 0.85]: soft stripes blended with a low-frequency color wash."""
    u, v = uv[..., 0], uv[..., 1]
    stripes = 0.5 + 0.5 * np.tanh(4.0 * np.sin(2 * np.pi * (6 * u + 2 * v)))
    wash = np.stack([0.5 + 0.3 * np.sin(2 * np.pi * u + 1.0),
                     0.5 + 0.3 * np.sin(2 * np.pi * v * 1.5 + 2.0),
                     0.5 + 0.3 * np.cos(2 * np.pi * (u - v))], -1)
    accent = np.array([0.8, 0.35, 0.2])
    a = (1 - 0.45 * stripes[..., None]) * wash + 0.45 * stripes[..., None] * accent
    return np.clip(a, 0.15, 0.85)


def albedo_texture(resolution: int = 256) -> UVField:
    t = np.linspace(0.0, 1.0, resolution)
    uu, vv = np.meshgrid(t, t, indexing="xy")
    return UVField(_albedo_pattern(np.stack([uu, vv], -1)), (0.0, 1.0))


# ---------------------------------------------------------------------------
# geometry recipes

SPHERE_RECT = (0.0, 0.0, 1.0, 0.6)
BOX_RECTS = ((0.0, 0.62, 0.49, 1.0), (0.51, 0.62, 1.0, 1.0))
BOXES = (((0.72, 0.36, -0.5), (0.17, 0.17, 0.17)), ((-0.52, -0.62, -0.48), (0.14, 0.16, 0.14)))
SPHERE_RADIUS = 0.6


def _sphere_bumps(amplitude):
    def disp(theta, phi):
        return amplitude * np.sin(5 * phi) * np.sin(4 * theta) * np.sin(theta)
    return disp


def _boxes(subdivisions: int) -> list[TriangleMesh]:
    return [geom.box(c, h, subdivisions, rect) for (c, h), rect in zip(BOXES, BOX_RECTS)]


def _sphere_boxes(cfg: SceneConfig) -> tuple[TriangleMesh, TriangleMesh]:
    amp = 0.035 * cfg.displacement
    gt = geom.merge_meshes([geom.uv_sphere(64, 128, SPHERE_RADIUS, _sphere_bumps(amp), SPHERE_RECT)]
                           + _boxes(6))
    base = geom.merge_meshes([geom.uv_sphere(16, 32, SPHERE_RADIUS, None, SPHERE_RECT)] + _boxes(2))
    return gt, base


def _bumpy_plane(cfg: SceneConfig) -> tuple[TriangleMesh, TriangleMesh]:
    amp = 0.04 * cfg.displacement

    def plane(n, displaced):
        m = geom.grid_plane(n, n, (2.0, 2.0))
        pos = m.positions - [1.0, 1.0, 0.0]
        if displaced:
            x, y = pos[:, 0], pos[:, 1]
            pos[:, 2] = amp * np.sin(2.5 * np.pi * x) * np.cos(2.0 * np.pi * y)
        return m.with_positions(pos)

    return plane(128, True), plane(8, False)


def _rigid_weights(mesh: TriangleMesh, bones: int = 1) -> TriangleMesh:
    w = np.zeros((mesh.n_vertices, bones))
    w[:, 0] = 1.0
    return TriangleMesh(mesh.positions, mesh.faces, mesh.uvs, mesh.face_uvs, skin_weights=w)


def _clothed_template(cfg: SceneConfig) -> tuple[TriangleMesh, TriangleMesh]:
    """A stylized body: ellipsoidal torso plus an arm box, two bones blended near the shoulder."""
    amp = 0.02 * cfg.displacement

    def torso(rings, segs, displaced):
        def folds(theta, phi):
            return amp * np.sin(9 * theta) * np.cos(3 * phi) if displaced else 0.0 * theta
        m = geom.uv_sphere(rings, segs, 1.0, folds, SPHERE_RECT)
        return m.with_positions(m.positions * [0.35, 0.25, 0.6])

    def arm(sub):
        return geom.box((0.55, 0.0, 0.25), (0.2, 0.08, 0.08), sub, BOX_RECTS[0])

    def weights(mesh, n_torso):
        w = np.zeros((mesh.n_vertices, 2))
        x = mesh.positions[:, 0]
        t = np.clip((x - 0.3) / 0.25, 0.0, 1.0)
        t[:n_torso] = np.clip((x[:n_torso] - 0.3) / 0.25, 0.0, 1.0) * 0.5
        w[:, 1] = t
        w[:, 0] = 1.0 - t
        return TriangleMesh(mesh.positions, mesh.faces, mesh.uvs, mesh.face_uvs, skin_weights=w)

    gt_t, base_t = torso(64, 128, True), torso(16, 32, False)
    gt = geom.merge_meshes([gt_t, arm(8)])
    base = geom.merge_meshes([base_t, arm(2)])
    return weights(gt, gt_t.n_vertices), weights(base, base_t.n_vertices)


def _rot_z(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _poses(recipe: str, cfg: SceneConfig, bones: int) -> list[Pose]:
    poses = []
    for f in range(cfg.frames):
        if bones == 0:
            poses.append(Pose.identity(0, f))
        elif recipe == "clothed_template":
            # raise the arm about the shoulder at (0.3, 0, 0.25)
            r = _rot_y(-12.0 * f)
            pivot = np.array([0.3, 0.0, 0.25])
            poses.append(Pose(np.stack([np.eye(3), r]), np.stack([np.zeros(3), pivot - r @ pivot]), f))
        else:
            poses.append(Pose(_rot_z(cfg.rotation_step_deg * f)[None], np.zeros((1, 3)), f))
    return poses


def _fit_distance(direction, up, points, fov_deg, res, margin=2.0):
    """Smallest eye distance along ``direction`` at which every point projects inside the image."""
    def fits(dist):
        cam = Camera.look_at(dist * direction, [0.0, 0.0, 0.0], up, fov_deg, res, res)
        pc = cam.to_camera(points)
        if np.any(pc[:, 2] <= 1e-3):
            return False
        px = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
        py = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
        return bool(np.all((px >= margin) & (px <= res - margin) & (py >= margin) & (py <= res - margin)))

    lo, hi = 0.0, 1.0
    while not fits(hi):
        lo, hi = hi, hi * 2
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if fits(mid) else (mid, hi)
    return hi


def _cameras(recipe: str, cfg: SceneConfig, points: np.ndarray) -> list[Camera]:
    cams = []
    for v in range(cfg.views):
        if recipe == "bumpy_plane":
            az = 2 * np.pi * v / max(cfg.views, 1)
            tilt = np.radians(15.0) if cfg.views > 1 else 0.0
            direction = np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), np.cos(tilt)])
            up = [0.0, 1.0, 0.0]
        else:
            az = 2 * np.pi * v / cfg.views + np.radians(15.0)
            el = np.radians(cfg.elevation_deg)
            direction = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
            up = [0.0, 0.0, 1.0]
        dist = _fit_distance(direction, up, points, cfg.fov_deg, cfg.resolution)
        cams.append(Camera.look_at(dist * direction, [0.0, 0.0, 0.0], up, cfg.fov_deg, cfg.resolution,
                                   cfg.resolution))
    return cams


def build_recipe(recipe: str, cfg: SceneConfig) -> tuple[TriangleMesh, TriangleMesh, list[Pose]]:
    if recipe == "bumpy_plane":
        gt, base = _bumpy_plane(cfg)
    elif recipe == "sphere_boxes":
        gt, base = _sphere_boxes(cfg)
    elif recipe == "rotating_object":
        gt, base = _sphere_boxes(cfg)
        gt, base = _rigid_weights(gt), _rigid_weights(base)
    elif recipe == "clothed_template":
        gt, base = _clothed_template(cfg)
    else:
        raise ValueError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")
    return gt, base, _poses(recipe, cfg, gt.bone_count)


# ---------------------------------------------------------------------------
# ground-truth rendering


def render_truth(mesh: TriangleMesh, pose: Pose, camera: Camera, texture: UVField, probes: LightProbeSphere,
                 eps_scale: float = 1e-4) -> tuple[FrameImages, GBuffer]:
    posed = geom.pose_mesh(mesh, pose)
    gb = rasterize(posed, camera)
    mask = gb.mask
    albedo = np.zeros(mask.shape + (3,))
    albedo[mask] = field_query(texture, gb.uv[mask])
    vis = visibility(gb.position, mask, build_bvh(posed), probes, eps_scale, posed.bbox_diagonal())
    shading = shading_image(gb, gb.normal, probes, vis)
    img = FrameImages(albedo * shading, gb.normal.copy(), albedo, shading, mask.copy())
    return img, gb


def _next_frame_pixels(gb_t: GBuffer, mesh: TriangleMesh, pose_next: Pose, camera: Camera,
                       depth_next: np.ndarray, mask_next: np.ndarray) -> np.ndarray:
    out = np.full(gb_t.mask.shape + (2,), -1, dtype=np.int64)
    m = gb_t.mask
    if not m.any():
        return out
    fid = gb_t.triangle_id[m]
    b = gb_t.barycentrics[m]
    posed = geom.pose_mesh(mesh, pose_next).positions
    x = np.einsum("pk,pkc->pc", b, posed[mesh.faces[fid]])
    pc = camera.to_camera(x)
    px = camera.fx * pc[:, 0] / pc[:, 2] + camera.cx
    py = camera.fy * pc[:, 1] / pc[:, 2] + camera.cy
    col = np.floor(px).astype(np.int64)
    row = np.floor(py).astype(np.int64)
    h, w = m.shape
    inside = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    rr, cc = np.where(inside, row, 0), np.where(inside, col, 0)
    visible = inside & mask_next[rr, cc] & (np.abs(depth_next[rr, cc] - pc[:, 2]) < 0.01 * pc[:, 2])
    res = np.where(visible[:, None], np.stack([row, col], 1), -1)
    out[m] = res
    return out


def synthesize_scene(cfg: SceneConfig, seed: int | None = None) -> SceneDataset:
    """Deterministic synthetic dataset. ``seed`` overrides ``cfg.seed``; it drives the texture phase."""
    seed = cfg.seed if seed is None else seed
    recipe = cfg.recipe
    gt, base, poses = build_recipe(recipe, cfg)
    rng = np.random.default_rng(seed)
    texture = albedo_texture()
    # per-seed color jitter keeps datasets distinct across seeds
    texture.values = np.clip(texture.values * (1.0 + 0.1 * rng.uniform(-1, 1, 3)), 0.0, 1.0)
    points = np.concatenate([geom.pose_mesh(gt, p).positions for p in poses])
    cameras = _cameras(recipe, cfg, points)
    factor = 4 if cfg.mismatch else 1
    probes = light_rig(cfg.n_lights, 16 * factor, 32 * factor, 1.0)

    images, gbufs = {}, {}
    for f, pose in enumerate(poses):
        for v, cam in enumerate(cameras):
            images[(v, f)], gbufs[(v, f)] = render_truth(gt, pose, cam, texture, probes)
    if cfg.light_power is not None:
        scale = cfg.light_power
    else:
        peak = max(float(img.gt_shading.max()) for img in images.values())
        scale = cfg.shading_peak / peak if peak > 0 else 1.0
    probes.radiance *= scale
    for img in images.values():
        img.gt_shading *= scale
        img.gt_rgb = img.gt_albedo * img.gt_shading
    for f in range(len(poses) - 1):
        for v, cam in enumerate(cameras):
            nxt = images[(v, f + 1)]
            images[(v, f)].gt_next = _next_frame_pixels(gbufs[(v, f)], gt, poses[f + 1], cam,
                                                        gbufs[(v, f + 1)].depth, nxt.gt_mask)
    meta = {"recipe": recipe, "seed": int(seed), "n_lights": cfg.n_lights, "light_scale": scale,
            "mismatch": cfg.mismatch, "resolution": cfg.resolution}
    ds = SceneDataset(cameras, poses, images, base, gt, texture, probes, meta)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# disk layout


def _camera_doc(c: Camera) -> dict:
    return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "rotation": c.rotation, "translation": c.translation,
            "width": c.width, "height": c.height}


def _write_mesh(directory: Path, stem: str, mesh: TriangleMesh):
    weights = directory / f"{stem}_weights.txt" if mesh.skin_weights is not None else None
    fileio.write_obj(directory / f"{stem}.obj", mesh, weights)


def _read_mesh(directory: Path, stem: str) -> TriangleMesh | None:
    path = directory / f"{stem}.obj"
    if not path.exists():
        return None
    weights = directory / f"{stem}_weights.txt"
    return fileio.read_obj(path, weights if weights.exists() else None)


IMAGE_KEYS = ("gt_rgb", "gt_normal", "gt_albedo", "gt_shading")


def save_dataset(ds: SceneDataset, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    doc = {"meta": ds.meta, "cameras": [_camera_doc(c) for c in ds.cameras],
           "poses": [{"rotations": p.rotations, "translations": p.translations, "frame_index": p.frame_index}
                     for p in ds.poses]}
    fileio.write_json(d / "scene.json", doc)
    _write_mesh(d, "base", ds.base_mesh)
    if ds.gt_mesh is not None:
        _write_mesh(d, "gt", ds.gt_mesh)
    if ds.gt_albedo_texture is not None:
        fileio.write_field(d / "gt_albedo.field", ds.gt_albedo_texture)
    if ds.gt_probes is not None:
        fileio.write_pfm(d / "gt_probes.pfm", ds.gt_probes.radiance)
        np.savetxt(d / "gt_probes_f64.txt", ds.gt_probes.radiance.reshape(-1, 3), fmt="%.17g")
    for (v, f), img in sorted(ds.images.items()):
        sub = d / f"view{v:02d}"
        sub.mkdir(exist_ok=True)
        for key in IMAGE_KEYS:
            arr = getattr(img, key)
            if arr is not None:
                fileio.write_pfm(sub / f"{key}_{f:06d}.pfm", arr)
        if img.gt_mask is not None:
            fileio.write_pfm(sub / f"gt_mask_{f:06d}.pfm", img.gt_mask.astype(np.float32))
        if img.gt_next is not None:
            nxt = np.concatenate([img.gt_next, np.zeros(img.gt_next.shape[:2] + (1,), dtype=np.int64)], -1)
            fileio.write_pfm(sub / f"gt_next_{f:06d}.pfm", nxt.astype(np.float32))


def load_dataset(directory) -> SceneDataset:
    d = Path(directory)
    if not (d / "scene.json").exists():
        raise OSError(f"{d}: no scene.json")
    doc = fileio.read_json(d / "scene.json")
    cams = [Camera(**c) for c in doc["cameras"]]
    poses = [Pose(np.array(p["rotations"]), np.array(p["translations"]), p["frame_index"]) for p in doc["poses"]]
    base = _read_mesh(d, "base")
    if base is None:
        raise OSError(f"{d}: no base.obj")
    texture = fileio.read_field(d / "gt_albedo.field") if (d / "gt_albedo.field").exists() else None
    probes = None
    if (d / "gt_probes_f64.txt").exists():
        rad = np.loadtxt(d / "gt_probes_f64.txt").reshape(fileio.read_pfm(d / "gt_probes.pfm").shape)
        probes = probe_sphere(rad.shape[0], rad.shape[1], rad)
    images = {}
    for f in range(len(poses)):
        for v in range(len(cams)):
            sub = d / f"view{v:02d}"
            rgb_path = sub / f"gt_rgb_{f:06d}.pfm"
            if not rgb_path.exists():
                raise OSError(f"missing image {rgb_path}")
            kw = {}
            for key in IMAGE_KEYS:
                p = sub / f"{key}_{f:06d}.pfm"
                kw[key] = fileio.read_pfm(p).astype(np.float64) if p.exists() else None
            p = sub / f"gt_mask_{f:06d}.pfm"
            kw["gt_mask"] = fileio.read_pfm(p) > 0.5 if p.exists() else None
            p = sub / f"gt_next_{f:06d}.pfm"
            kw["gt_next"] = fileio.read_pfm(p)[..., :2].astype(np.int64) if p.exists() else None
            images[(v, f)] = FrameImages(**kw)
    ds = SceneDataset(cams, poses, images, base, _read_mesh(d, "gt"), texture, probes, doc["meta"])
    ds.validate()
    return ds

"""Hard-coverage perspective rasterizer with a coverage-frozen adjoint.

Camera convention: camera looks down +z, x right, y down (pixel rows grow
downward). A pixel (i, j) samples the ray through (i + 0.5, j + 0.5).

Attributes are interpolated with ray/plane barycentrics: for camera-space
corners P0..P2 and pixel ray d (with d_z = 1), w = [P0 P1 P2]^-1 d gives
barycentrics b = w / sum(w) and depth 1 / sum(w). The adjoint differentiates
through this map, so gradients w.r.t. vertex positions include the motion of
the surface point along the fixed pixel ray.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .geom import TriangleMesh

NEAR_PLANE = 1e-3
TIE_EPS = 1e-9


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up, fov_y_deg: float, width: int, height: int) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        f = 0.5 * height / np.tan(np.radians(fov_y_deg) / 2)
        return cls(f, f, width / 2, height / 2, rot, -rot @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) camera-space ray directions with unit z component."""
        i = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        j = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = i[None, :]
        d[..., 1] = j[:, None]
        d[..., 2] = 1.0
        return d

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points -> (x_pixel, y_pixel, depth)."""
        pc = self.to_camera(points)
        return np.stack([self.fx * pc[..., 0] / pc[..., 2] + self.cx,
                         self.fy * pc[..., 1] / pc[..., 2] + self.cy, pc[..., 2]], axis=-1)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Camera":
        """Camera seeing the world moved by x -> R x + t exactly as this camera saw the original."""
        rot = self.rotation @ rotation.T
        return Camera(self.fx, self.fy, self.cx, self.cy, rot, self.translation - rot @ translation,
                      self.width, self.height)


@dataclass
class GBuffer:
    mask: np.ndarray  # (H, W) bool
    triangle_id: np.ndarray  # (H, W) int64, -1 where empty
    barycentrics: np.ndarray  # (H, W, 3)
    uv: np.ndarray  # (H, W, 2)
    position: np.ndarray  # (H, W, 3) world
    normal: np.ndarray  # (H, W, 3) unit
    depth: np.ndarray  # (H, W), inf where empty
    camera: Camera
    mesh: TriangleMesh

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@njit(parallel=True, cache=True)
def _coverage(xy, inv_z, ok, width, height, tile, tie_eps):
    nf = xy.shape[0]
    tri = np.full((height, width), -1, dtype=np.int64)
    dep = np.full((height, width), np.inf)
    ntiles = (height + tile - 1) // tile
    for t in prange(ntiles):
        y0 = t * tile
        y1 = min(height, y0 + tile)
        for f in range(nf):
            if not ok[f]:
                continue
            ax, ay = xy[f, 0, 0], xy[f, 0, 1]
            bx, by = xy[f, 1, 0], xy[f, 1, 1]
            cx, cy = xy[f, 2, 0], xy[f, 2, 1]
            area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if area == 0.0:
                continue
            sgn = 1.0 if area > 0 else -1.0
            area *= sgn
            ymin = max(y0, int(np.floor(min(ay, by, cy) - 0.5)))
            ymax = min(y1 - 1, int(np.ceil(max(ay, by, cy) - 0.5)))
            xmin = max(0, int(np.floor(min(ax, bx, cx) - 0.5)))
            xmax = min(width - 1, int(np.ceil(max(ax, bx, cx) - 0.5)))
            if ymin > ymax or xmin > xmax:
                continue
            # edge k is opposite vertex k; ownership rule for pixels exactly on an edge
            e0x, e0y = (cx - bx) * sgn, (cy - by) * sgn
            e1x, e1y = (ax - cx) * sgn, (ay - cy) * sgn
            e2x, e2y = (bx - ax) * sgn, (by - ay) * sgn
            own0 = e0y < 0 or (e0y == 0 and e0x > 0)
            own1 = e1y < 0 or (e1y == 0 and e1x > 0)
            own2 = e2y < 0 or (e2y == 0 and e2x > 0)
            for j in range(ymin, ymax + 1):
                py = j + 0.5
                for i in range(xmin, xmax + 1):
                    px = i + 0.5
                    w0 = e0x * (py - by) - e0y * (px - bx)
                    w1 = e1x * (py - cy) - e1y * (px - cx)
                    w2 = e2x * (py - ay) - e2y * (px - ax)
                    if w0 < 0 or w1 < 0 or w2 < 0:
                        continue
                    if (w0 == 0 and not own0) or (w1 == 0 and not own1) or (w2 == 0 and not own2):
                        continue
                    iz = (w0 * inv_z[f, 0] + w1 * inv_z[f, 1] + w2 * inv_z[f, 2]) / area
                    if iz <= 0:
                        continue
                    d = 1.0 / iz
                    cur = dep[j, i]
                    if d < cur - tie_eps or (abs(d - cur) <= tie_eps and f < tri[j, i]):
                        dep[j, i] = d
                        tri[j, i] = f
    return tri, dep


def _camera_space_triangles(mesh: TriangleMesh, camera: Camera) -> np.ndarray:
    return camera.to_camera(mesh.positions)[mesh.faces]  # (F, 3, 3)


def rasterize(mesh: TriangleMesh, camera: Camera, cull_backfaces: bool = True, tile: int = 8) -> GBuffer:
    """Z-buffered coverage then perspective-correct interpolation of uv, position, normal."""
    pc = _camera_space_triangles(mesh, camera)
    z = pc[..., 2]
    ok = np.all(z > NEAR_PLANE, axis=1)
    if cull_backfaces:
        n = np.cross(pc[:, 1] - pc[:, 0], pc[:, 2] - pc[:, 0])
        ok &= np.sum(n * pc[:, 0], axis=1) < 0
    zs = np.where(z > NEAR_PLANE, z, 1.0)
    xy = np.stack([camera.fx * pc[..., 0] / zs + camera.cx, camera.fy * pc[..., 1] / zs + camera.cy], axis=-1)
    tri, _ = _coverage(np.ascontiguousarray(xy), np.ascontiguousarray(1.0 / zs), ok,
                       camera.width, camera.height, tile, TIE_EPS)
    return interpolate(mesh, camera, tri)


def interpolate(mesh: TriangleMesh, camera: Camera, triangle_id: np.ndarray) -> GBuffer:
    """Attributes for a frozen coverage map. Used by the forward pass and by gradient oracles."""
    h, w = triangle_id.shape
    mask = triangle_id >= 0
    bary = np.zeros((h, w, 3))
    uv = np.zeros((h, w, 2))
    pos = np.zeros((h, w, 3))
    nrm = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    if mask.any():
        fid = triangle_id[mask]
        b, s = _ray_barycentrics(mesh, camera, fid, camera.pixel_rays()[mask])
        bary[mask] = b
        depth[mask] = 1.0 / s
        f = mesh.faces[fid]
        pos[mask] = _blend(b, mesh.positions[f])
        nraw = _blend(b, mesh.normals[f])
        nrm[mask] = nraw / np.linalg.norm(nraw, axis=1, keepdims=True)
        if mesh.uvs is not None:
            uv[mask] = _blend(b, mesh.uvs[mesh.corner_uv_indices[fid]])
    return GBuffer(mask, triangle_id, bary, uv, pos, nrm, depth, camera, mesh)


def _blend(b, corners):
    """sum_k b_k c_k written as c_0 + b_1 (c_1 - c_0) + b_2 (c_2 - c_0), exact for constant attributes."""
    c0 = corners[:, 0]
    return c0 + b[:, 1:2] * (corners[:, 1] - c0) + b[:, 2:3] * (corners[:, 2] - c0)


def _ray_barycentrics(mesh, camera, fid, rays):
    m = camera.to_camera(mesh.positions)[mesh.faces[fid]].transpose(0, 2, 1)  # columns are corners
    wv = np.linalg.solve(m, rays[..., None])[..., 0]
    s = wv.sum(axis=1)
    return wv / s[:, None], s


def rasterize_backward(gbuffer: GBuffer, grad_position=None, grad_normal=None, grad_uv=None, grad_depth=None,
                       through_barycentrics: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Scatter per-pixel gradients to (vertex positions, vertex normals).

    With ``through_barycentrics=False`` barycentrics are constants and each
    corner simply receives b_k * g. Otherwise the dependence of b and depth on
    the corner positions is included too. Coverage is frozen either way.
    """
    mesh, cam = gbuffer.mesh, gbuffer.camera
    h, w = gbuffer.shape
    for name, g, c in (("position", grad_position, 3), ("normal", grad_normal, 3), ("uv", grad_uv, 2)):
        if g is not None and g.shape != (h, w, c):
            raise ValueError(f"grad_{name} has shape {g.shape}, expected {(h, w, c)}")
    if grad_depth is not None and grad_depth.shape != (h, w):
        raise ValueError(f"grad_depth has shape {grad_depth.shape}, expected {(h, w)}")

    nv = mesh.n_vertices
    gpos = np.zeros((nv, 3))
    gnrm = np.zeros((nv, 3))
    mask = gbuffer.mask
    if not mask.any():
        return gpos, gnrm
    fid = gbuffer.triangle_id[mask]
    f = mesh.faces[fid]
    b = gbuffer.barycentrics[mask]
    npix = len(fid)
    zero3 = np.zeros((npix, 3))
    gp = grad_position[mask] if grad_position is not None else zero3
    gn = zero3
    if grad_normal is not None:
        nraw = np.einsum("pk,pkc->pc", b, mesh.normals[f])
        nlen = np.linalg.norm(nraw, axis=1, keepdims=True)
        n = nraw / nlen
        g = grad_normal[mask]
        gn = (g - n * np.sum(n * g, axis=1, keepdims=True)) / nlen

    corner_p = b[:, :, None] * gp[:, None, :]
    corner_n = b[:, :, None] * gn[:, None, :]

    if through_barycentrics:
        gb = np.einsum("pkc,pc->pk", mesh.positions[f], gp) + np.einsum("pkc,pc->pk", mesh.normals[f], gn)
        if grad_uv is not None and mesh.uvs is not None:
            gb += np.einsum("pkc,pc->pk", mesh.uvs[mesh.corner_uv_indices[fid]], grad_uv[mask])
        s = 1.0 / gbuffer.depth[mask]
        gw = (gb - np.sum(gb * b, axis=1, keepdims=True)) / s[:, None]
        if grad_depth is not None:
            gw -= (grad_depth[mask] / s ** 2)[:, None]
        m = cam.to_camera(mesh.positions)[f].transpose(0, 2, 1)
        u = np.linalg.solve(m.transpose(0, 2, 1), gw[..., None])[..., 0]
        wv = b * s[:, None]
        g_cam = -u[:, None, :] * wv[:, :, None]  # (P, corner, xyz)
        corner_p += g_cam @ cam.rotation  # R^T g per corner

    flat = f.ravel()
    for c in range(3):
        gpos[:, c] = np.bincount(flat, weights=corner_p[..., c].ravel(), minlength=nv)
        gnrm[:, c] = np.bincount(flat, weights=corner_n[..., c].ravel(), minlength=nv)
    return gpos, gnrm

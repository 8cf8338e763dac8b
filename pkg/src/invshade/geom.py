"""Triangle meshes: posing, offset deformation, normals, regularizers, distances."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from numba import njit, prange
from scipy.spatial import cKDTree


@dataclass
class TriangleMesh:
    """Indexed triangle mesh.

    ``uvs`` is a texture-coordinate table. When ``face_uvs`` is None the uv table
    is per-vertex and shares ``faces``; otherwise ``face_uvs`` indexes it per
    corner (OBJ-style), which lets a closed surface carry a seamed atlas without
    splitting positions.
    """

    positions: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray | None = None
    face_uvs: np.ndarray | None = None
    normals: np.ndarray | None = None
    skin_weights: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        if self.face_uvs is not None:
            self.face_uvs = np.asarray(self.face_uvs, dtype=np.int64).reshape(-1, 3)
        if self.skin_weights is not None:
            self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.validate()
        if self.normals is None:
            self.normals = compute_vertex_normals(self.positions, self.faces)

    def validate(self):
        nv = len(self.positions)
        f = self.faces
        if f.size and (f.min() < 0 or f.max() >= nv):
            raise ValueError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            bad = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
            raise ValueError(f"degenerate face(s) {bad[:5].tolist()}")
        if self.uvs is not None:
            idx = self.corner_uv_indices
            if idx.size and (idx.min() < 0 or idx.max() >= len(self.uvs)):
                raise ValueError("uv index out of range")
        if self.skin_weights is not None:
            w = self.skin_weights
            if w.ndim != 2 or w.shape[0] != nv:
                raise ValueError(f"skin weights must be ({nv}, J), got {w.shape}")
            if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
                raise ValueError("skin weight rows must be nonnegative and sum to 1")

    @property
    def corner_uv_indices(self) -> np.ndarray:
        return self.faces if self.face_uvs is None else self.face_uvs

    @property
    def bone_count(self) -> int:
        return 0 if self.skin_weights is None else self.skin_weights.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    def bbox_diagonal(self) -> float:
        if len(self.positions) == 0:
            return 0.0
        return float(np.linalg.norm(self.positions.max(0) - self.positions.min(0)))

    def with_positions(self, positions: np.ndarray) -> "TriangleMesh":
        """Copy with new positions and recomputed normals; topology and uvs shared."""
        return replace(self, positions=positions, normals=None)


@dataclass
class Pose:
    rotations: np.ndarray  # (J, 3, 3)
    translations: np.ndarray  # (J, 3)
    frame_index: int = 0

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if len(self.rotations) != len(self.translations):
            raise ValueError("rotation and translation counts differ")
        for r in self.rotations:
            if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
                raise ValueError("bone rotation is not a proper rotation")

    @classmethod
    def identity(cls, bones: int, frame_index: int = 0) -> "Pose":
        return cls(np.tile(np.eye(3), (bones, 1, 1)), np.zeros((bones, 3)), frame_index)

    @property
    def bone_count(self) -> int:
        return len(self.rotations)


# ---------------------------------------------------------------------------
# normals


def face_cross(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals, |c| = twice the face area."""
    p0, p1, p2 = (positions[faces[:, k]] for k in range(3))
    return np.cross(p1 - p0, p2 - p0)


def _scatter3(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, values.shape[-1]))
    for c in range(values.shape[-1]):
        out[:, c] = np.bincount(index, weights=values[:, c], minlength=n)
    return out


def compute_vertex_normals(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; vertices with a zero-area star get +Z."""
    positions = np.asarray(positions, dtype=np.float64)
    c = face_cross(positions, faces)
    s = _scatter3(faces.ravel(), np.repeat(c, 3, axis=0), len(positions))
    norm = np.linalg.norm(s, axis=1, keepdims=True)
    out = np.tile([0.0, 0.0, 1.0], (len(positions), 1))
    ok = norm[:, 0] > 1e-300
    out[ok] = s[ok] / norm[ok]
    return out


def vertex_normals_backward(positions: np.ndarray, faces: np.ndarray, grad_normals: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`compute_vertex_normals` w.r.t. positions."""
    c = face_cross(positions, faces)
    s = _scatter3(faces.ravel(), np.repeat(c, 3, axis=0), len(positions))
    norm = np.linalg.norm(s, axis=1, keepdims=True)
    ok = norm[:, 0] > 1e-300
    n = np.zeros_like(s)
    n[ok] = s[ok] / norm[ok]
    gs = np.zeros_like(s)
    g = grad_normals[ok]
    gs[ok] = (g - n[ok] * np.sum(n[ok] * g, axis=1, keepdims=True)) / norm[ok]
    gc = gs[faces[:, 0]] + gs[faces[:, 1]] + gs[faces[:, 2]]
    p0, p1, p2 = (positions[faces[:, k]] for k in range(3))
    a, b = p1 - p0, p2 - p0
    ga = np.cross(b, gc)
    gb = np.cross(gc, a)
    grad = np.zeros_like(positions)
    grad += _scatter3(faces[:, 1], ga, len(positions))
    grad += _scatter3(faces[:, 2], gb, len(positions))
    grad -= _scatter3(faces[:, 0], ga + gb, len(positions))
    return grad


# ---------------------------------------------------------------------------
# deformation


def apply_vertex_offsets(mesh: TriangleMesh, offsets: np.ndarray) -> TriangleMesh:
    """Displace each vertex along its normal: x + n * l. Normals are recomputed."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1)
    if len(offsets) != mesh.n_vertices:
        raise ValueError(f"expected {mesh.n_vertices} offsets, got {len(offsets)}")
    return mesh.with_positions(mesh.positions + mesh.normals * offsets[:, None])


def vertex_offsets_backward(mesh: TriangleMesh, grad_positions: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. offsets given a gradient on displaced positions (base normals fixed)."""
    return np.sum(mesh.normals * grad_positions, axis=1)


def pose_mesh(mesh: TriangleMesh, pose: Pose) -> TriangleMesh:
    """Linear blend skinning. Zero bones is the identity."""
    if pose.bone_count == 0:
        return mesh.with_positions(mesh.positions.copy())
    if mesh.skin_weights is None:
        raise ValueError("pose has bones but mesh has no skinning weights")
    if mesh.bone_count != pose.bone_count:
        raise ValueError(f"mesh has {mesh.bone_count} bones, pose has {pose.bone_count}")
    x = mesh.positions
    # blend the displacement (R - I) x + t rather than R x + t: identity bones then add exact zeros
    rel = pose.rotations - np.eye(3)
    per_bone = np.einsum("jab,vb->jva", rel, x) + pose.translations[:, None, :]
    posed = x + np.einsum("vj,jva->va", mesh.skin_weights, per_bone)
    return mesh.with_positions(posed)


def pose_backward(mesh: TriangleMesh, pose: Pose, grad_posed: np.ndarray) -> np.ndarray:
    if pose.bone_count == 0:
        return grad_posed.copy()
    # sum_j w_vj R_j^T g_v
    return np.einsum("vj,jba,vb->va", mesh.skin_weights, pose.rotations, grad_posed)


# ---------------------------------------------------------------------------
# regularizers


def unique_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _interior_edge_faces(faces: np.ndarray) -> np.ndarray:
    """(E, 2) face pairs for edges shared by exactly two faces."""
    nf = len(faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    fid = np.tile(np.arange(nf), 3)
    _, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    order = np.argsort(inv, kind="stable")
    sorted_inv = inv[order]
    starts = np.searchsorted(sorted_inv, np.flatnonzero(counts == 2))
    return np.stack([fid[order[starts]], fid[order[starts + 1]]], axis=1)


def uniform_laplacian(n_vertices: int, faces: np.ndarray) -> sp.csr_matrix:
    """L = I - D^-1 A over the edge graph; isolated vertices get a zero row."""
    e = unique_edges(faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    lap = sp.diags((deg > 0).astype(float)) - sp.diags(inv) @ adj
    return lap.tocsr()


@dataclass
class MeshRegularizers:
    edge: float
    normal: float
    laplacian: float
    grad_edge: np.ndarray = field(repr=False)
    grad_normal: np.ndarray = field(repr=False)
    grad_laplacian: np.ndarray = field(repr=False)

    def weighted(self, w_edge: float, w_normal: float, w_laplacian: float) -> tuple[float, np.ndarray]:
        loss = w_edge * self.edge + w_normal * self.normal + w_laplacian * self.laplacian
        grad = w_edge * self.grad_edge + w_normal * self.grad_normal + w_laplacian * self.grad_laplacian
        return loss, grad


def mesh_regularizers(positions: np.ndarray, faces: np.ndarray, edge_target: float | np.ndarray,
                      laplacian: sp.csr_matrix | None = None) -> MeshRegularizers:
    """Edge-length, normal-consistency and uniform-Laplacian losses with gradients.

    ``laplacian`` may be passed to avoid rebuilding the operator on fixed topology.
    """
    x = np.asarray(positions, dtype=np.float64)
    nv = len(x)

    e = unique_edges(faces)
    d = x[e[:, 1]] - x[e[:, 0]]
    length = np.linalg.norm(d, axis=1)
    r = length - edge_target
    edge = float(np.mean(r ** 2)) if len(e) else 0.0
    g_edge = np.zeros_like(x)
    if len(e):
        coef = (2.0 * r / len(e) / np.maximum(length, 1e-300))[:, None] * d
        g_edge += _scatter3(e[:, 1], coef, nv) - _scatter3(e[:, 0], coef, nv)

    pairs = _interior_edge_faces(faces)
    c = face_cross(x, faces)
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    u = c / np.maximum(cn, 1e-300)
    g_normal = np.zeros_like(x)
    if len(pairs):
        u1, u2 = u[pairs[:, 0]], u[pairs[:, 1]]
        normal = float(np.mean(1.0 - np.sum(u1 * u2, axis=1)))
        gu = np.zeros_like(u)
        np.add.at(gu, pairs[:, 0], -u2 / len(pairs))
        np.add.at(gu, pairs[:, 1], -u1 / len(pairs))
        gc = (gu - u * np.sum(u * gu, axis=1, keepdims=True)) / np.maximum(cn, 1e-300)
        p0, p1, p2 = (x[faces[:, k]] for k in range(3))
        ga = np.cross(p2 - p0, gc)
        gb = np.cross(gc, p1 - p0)
        g_normal += _scatter3(faces[:, 1], ga, nv) + _scatter3(faces[:, 2], gb, nv)
        g_normal -= _scatter3(faces[:, 0], ga + gb, nv)
    else:
        normal = 0.0

    lap = uniform_laplacian(nv, faces) if laplacian is None else laplacian
    lx = lap @ x
    laplacian_loss = float(np.mean(np.sum(lx ** 2, axis=1))) if nv else 0.0
    g_lap = (2.0 / max(nv, 1)) * (lap.T @ lx)

    return MeshRegularizers(edge, normal, laplacian_loss, g_edge, g_normal, np.asarray(g_lap))


# ---------------------------------------------------------------------------
# distances


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform surface samples."""
    area = 0.5 * np.linalg.norm(face_cross(mesh.positions, mesh.faces), axis=1)
    fid = rng.choice(len(area), size=count, p=area / area.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    b = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.positions[mesh.faces[fid]]
    return np.einsum("nk,nkc->nc", b, tri)


@njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection 5.1.5
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return a + ab * (d1 / (d1 - d3))
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return a + ac * (d2 / (d2 - d6))
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)))
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


@njit(parallel=True, cache=True)
def _point_triangle_distance(points, tris, centers, radii, order_hint):
    n = points.shape[0]
    out = np.empty(n)
    for i in prange(n):
        p = points[i]
        best = np.inf
        # seed with the nearest-centroid triangle, then cull by bounding sphere
        h = order_hint[i]
        q = _closest_on_triangle(p, tris[h, 0], tris[h, 1], tris[h, 2])
        best = np.sqrt(np.sum((p - q) ** 2))
        for f in range(tris.shape[0]):
            dc = np.sqrt(np.sum((p - centers[f]) ** 2))
            if dc - radii[f] >= best:
                continue
            q = _closest_on_triangle(p, tris[f, 0], tris[f, 1], tris[f, 2])
            d = np.sqrt(np.sum((p - q) ** 2))
            if d < best:
                best = d
        out[i] = best
    return out


def point_to_surface(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Exact Euclidean distance from each point to the nearest triangle."""
    tris = np.ascontiguousarray(mesh.positions[mesh.faces])
    centers = tris.mean(axis=1)
    radii = np.linalg.norm(tris - centers[:, None, :], axis=2).max(axis=1)
    _, hint = cKDTree(centers).query(points)
    d = _point_triangle_distance(np.ascontiguousarray(points, dtype=np.float64), tris, centers, radii,
                                 np.asarray(hint, dtype=np.int64))
    # points on the surface come back as round-off, not zero
    d[d <= 64 * np.finfo(float).eps * max(mesh.bbox_diagonal(), 1.0)] = 0.0
    return d


def chamfer_and_p2s(mesh_a: TriangleMesh, mesh_b: TriangleMesh, sample_count: int, seed: int) -> tuple[float, float]:
    """Symmetric Chamfer distance between surface samples, and mean point-to-surface from A to B."""
    if len(mesh_a.faces) == 0 or len(mesh_b.faces) == 0:
        raise ValueError("empty mesh")
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    # both meshes draw from the same stream: CD(A, A) = 0 and CD(A, B) = CD(B, A) exactly
    pa = sample_surface(mesh_a, sample_count, np.random.default_rng(seed))
    pb = sample_surface(mesh_b, sample_count, np.random.default_rng(seed))
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    cd = 0.5 * (float(np.mean(dab)) + float(np.mean(dba)))
    p2s = float(np.mean(point_to_surface(pa, mesh_b)))
    return cd, p2s


# ---------------------------------------------------------------------------
# primitives


def grid_plane(nx: int, ny: int, size: tuple[float, float] = (1.0, 1.0), z: float = 0.0) -> TriangleMesh:
    """Regular grid over [0, sx] x [0, sy] at height z, facing +Z, uv = normalized xy."""
    xs = np.linspace(0.0, size[0], nx + 1)
    ys = np.linspace(0.0, size[1], ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    pos = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
    uv = np.stack([gx.ravel() / size[0], gy.ravel() / size[1]], axis=1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return TriangleMesh(pos, faces, uvs=uv)


def uv_sphere(n_rings: int, n_segments: int, radius: float = 1.0,
              displacement=None, uv_rect=(0.0, 0.0, 1.0, 1.0)) -> TriangleMesh:
    """Latitude-longitude sphere with a seamed lat-long uv atlas.

    ``displacement(theta, phi)`` optionally returns a radial offset. ``uv_rect``
    (u0, v0, u1, v1) places the chart inside a larger atlas.
    """
    theta = np.linspace(0.0, np.pi, n_rings + 1)[1:-1]
    phi = np.linspace(0.0, 2 * np.pi, n_segments, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    th_all = np.concatenate([[0.0], th.ravel(), [np.pi]])
    ph_all = np.concatenate([[0.0], ph.ravel(), [0.0]])
    r = np.full(th_all.shape, radius)
    if displacement is not None:
        r = r + displacement(th_all, ph_all)
    pos = np.stack([r * np.sin(th_all) * np.cos(ph_all), r * np.sin(th_all) * np.sin(ph_all), r * np.cos(th_all)], 1)
    north, south = 0, len(pos) - 1

    def vid(i, j):
        return 1 + i * n_segments + (j % n_segments)

    u0, v0, u1, v1 = uv_rect
    # uv grid with one duplicated seam column
    uu = np.linspace(0.0, 1.0, n_segments + 1)
    vv = np.linspace(0.0, 1.0, n_rings + 1)

    uv_list = []
    uv_index = {}

    def uvid(i, j):
        key = (i, j)
        if key not in uv_index:
            uv_index[key] = len(uv_list)
            uv_list.append((u0 + (u1 - u0) * uu[j], v0 + (v1 - v0) * vv[i]))
        return uv_index[key]

    faces, fuv = [], []
    # north cap: ring 0 is theta index 1 in vv
    for j in range(n_segments):
        faces.append((north, vid(0, j), vid(0, j + 1)))
        pole_uv = len(uv_list)
        uv_list.append((u0 + (u1 - u0) * 0.5 * (uu[j] + uu[j + 1]), v0))
        fuv.append((pole_uv, uvid(1, j), uvid(1, j + 1)))
    for i in range(n_rings - 2):
        for j in range(n_segments):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            faces += [(a, c, d), (a, d, b)]
            ta, tb = uvid(i + 1, j), uvid(i + 1, j + 1)
            tc, td = uvid(i + 2, j), uvid(i + 2, j + 1)
            fuv += [(ta, tc, td), (ta, td, tb)]
    last = n_rings - 2
    for j in range(n_segments):
        faces.append((south, vid(last, j + 1), vid(last, j)))
        pole_uv = len(uv_list)
        uv_list.append((u0 + (u1 - u0) * 0.5 * (uu[j] + uu[j + 1]), v1))
        fuv.append((pole_uv, uvid(last + 1, j + 1), uvid(last + 1, j)))
    mesh = TriangleMesh(pos, np.array(faces), uvs=np.array(uv_list), face_uvs=np.array(fuv))
    return mesh


def icosphere(subdivisions: int, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    f = list(faces)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    pos = np.array(v) * radius
    # spherical uv, only for rasterization convenience (not seam-correct)
    uv = np.stack([0.5 + np.arctan2(pos[:, 1], pos[:, 0]) / (2 * np.pi),
                   np.arccos(np.clip(pos[:, 2] / radius, -1, 1)) / np.pi], axis=1)
    return TriangleMesh(pos, np.array(f), uvs=uv)


def box(center, half_extent, subdivisions: int = 1, uv_rect=(0.0, 0.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box with one uv chart per face (6 charts in a 3x2 layout) and unshared face vertices."""
    center = np.asarray(center, dtype=float)
    h = np.broadcast_to(np.asarray(half_extent, dtype=float), (3,))
    n = subdivisions
    s = np.linspace(-1.0, 1.0, n + 1)
    gu, gv = np.meshgrid(s, s, indexing="xy")
    gu, gv = gu.ravel(), gv.ravel()
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    quad_faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    u0, v0, u1, v1 = uv_rect
    pos, uvs, faces = [], [], []
    # (normal axis, sign, tangent axis, bitangent axis); winding is fixed up below
    sides = [(0, 1, 1, 2), (0, -1, 2, 1), (1, 1, 2, 0), (1, -1, 0, 2), (2, 1, 0, 1), (2, -1, 1, 0)]
    for k, (ax, sg, ta, ba) in enumerate(sides):
        p = np.zeros((len(gu), 3))
        p[:, ax] = sg
        p[:, ta] = gu
        p[:, ba] = gv
        p = center + p * h
        cu, cv = k % 3, k // 3
        uv = np.stack([u0 + (u1 - u0) * (cu + 0.05 + 0.9 * (gu + 1) / 2) / 3,
                       v0 + (v1 - v0) * (cv + 0.05 + 0.9 * (gv + 1) / 2) / 2], 1)
        faces.append(quad_faces + len(pos) * len(gu))
        pos.append(p)
        uvs.append(uv)
    pos = np.concatenate(pos)
    faces = np.concatenate(faces)
    uvs = np.concatenate(uvs)
    mesh = TriangleMesh(pos, faces, uvs=uvs)
    # ensure outward orientation per face
    c = face_cross(mesh.positions, mesh.faces)
    centroid = mesh.positions[mesh.faces].mean(axis=1)
    flip = np.sum(c * (centroid - center), axis=1) < 0
    if np.any(flip):
        mesh.faces[flip] = mesh.faces[flip][:, ::-1]
        mesh.normals = compute_vertex_normals(mesh.positions, mesh.faces)
    return mesh


def merge_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    pos, faces, uvs, fuv, weights = [], [], [], [], []
    nv = nuv = 0
    has_w = all(m.skin_weights is not None for m in meshes)
    for m in meshes:
        pos.append(m.positions)
        faces.append(m.faces + nv)
        uvs.append(m.uvs)
        fuv.append(m.corner_uv_indices + nuv)
        if has_w:
            weights.append(m.skin_weights)
        nv += m.n_vertices
        nuv += len(m.uvs)
    return TriangleMesh(np.concatenate(pos), np.concatenate(faces), uvs=np.concatenate(uvs),
                        face_uvs=np.concatenate(fuv), skin_weights=np.concatenate(weights) if has_w else None)

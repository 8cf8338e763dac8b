"""Finite-difference verification of every hand-written adjoint.

Each registered op builds a small randomized problem from a seed and exposes
a scalar objective ``value(params)`` together with its analytic gradient
``grad(params)``. The checker compares directional derivatives along random
directions, plus every coordinate whose analytic gradient is not negligible,
against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geom, losses
from .fields import UVField, field_query, field_query_backward
from .geom import TriangleMesh
from .o2n import NormalConversion, _stencil_backward, _stencil_forward
from .raster import Camera, interpolate, rasterize, rasterize_backward
from .shade import LITERAL, MICROFACET, PBRRender, VisibilityBuffer, probe_sphere, specular_lobe

TIGHT = 1e-6
LOOSE = 1e-4


@dataclass
class Problem:
    params: dict[str, np.ndarray]
    value: Callable[[dict[str, np.ndarray]], float]
    grad: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]]
    step: float = 1e-6


@dataclass
class OpSpec:
    build: Callable[[np.random.Generator], Problem]
    tolerance: float


REGISTRY: dict[str, OpSpec] = {}


def register(name: str, tolerance: float):
    def deco(fn):
        REGISTRY[name] = OpSpec(fn, tolerance)
        return fn
    return deco


def rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-8)


def check_problem(prob: Problem, rng: np.random.Generator, directions: int = 4,
                  max_coords: int = 24) -> float:
    p0 = {k: v.copy() for k, v in prob.params.items()}
    g = prob.grad(p0)
    h = prob.step

    def fd(delta: dict[str, np.ndarray]) -> float:
        plus = {k: p0[k] + h * delta.get(k, 0.0) for k in p0}
        minus = {k: p0[k] - h * delta.get(k, 0.0) for k in p0}
        return (prob.value(plus) - prob.value(minus)) / (2 * h)

    worst = 0.0
    for k, v in p0.items():
        for _ in range(directions):
            d = rng.standard_normal(v.shape)
            worst = max(worst, rel_err(float(np.sum(g[k] * d)), fd({k: d})))
    for k, v in p0.items():
        gk = g[k].ravel()
        scale = np.abs(gk).max() if gk.size else 0.0
        if scale == 0.0:
            continue
        cand = np.flatnonzero(np.abs(gk) > 1e-3 * scale)
        pick = rng.choice(cand, size=min(max_coords, len(cand)), replace=False)
        for i in pick:
            e = np.zeros(v.size)
            e[i] = 1.0
            worst = max(worst, rel_err(float(gk[i]), fd({k: e.reshape(v.shape)})))
    return worst


def gradcheck(op_name: str, seed: int, tolerance: float | None = None) -> dict:
    """Returns {"op", "seed", "max_rel_err", "tolerance", "pass"}."""
    if op_name not in REGISTRY:
        raise ValueError(f"unknown op {op_name!r}; registered: {sorted(REGISTRY)}")
    entry = REGISTRY[op_name]
    tol = entry.tolerance if tolerance is None else tolerance
    rng = np.random.default_rng([seed, 0x6AD])
    prob = entry.build(rng)
    err = check_problem(prob, rng)
    return {"op": op_name, "seed": seed, "max_rel_err": err, "tolerance": tol, "pass": bool(err <= tol)}


def registered_ops() -> list[str]:
    return sorted(REGISTRY)


# ---------------------------------------------------------------------------
# fixtures


def _bumpy_plane(rng, n=6, size=2.0, amp=0.15) -> TriangleMesh:
    m = geom.grid_plane(n, n, (size, size))
    pos = m.positions - [size / 2, size / 2, 0.0]
    pos[:, 2] = amp * rng.standard_normal(len(pos))
    return m.with_positions(pos)


def _top_camera(res: int) -> Camera:
    return Camera.look_at([0.05, -0.03, 3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 36.0, res, res)


def _random_field(rng, res=(9, 7), channels=1, scale=0.05, frames=0) -> UVField:
    w, h = res
    res_grids = scale * rng.standard_normal((frames, h, w, channels)) if frames else None
    return UVField(scale * rng.standard_normal((h, w, channels)), None, res_grids)


# ---------------------------------------------------------------------------
# ops


@register("field_query", TIGHT)
def _field_query(rng):
    field = _random_field(rng, (7, 5), channels=3, scale=1.0, frames=2)
    # keep away from node lines so the piecewise-bilinear map is smooth under the FD step
    nodes = np.array(field.resolution) - 1
    cell = rng.integers(0, nodes, size=(40, 2))
    frac = rng.uniform(0.1, 0.9, size=(40, 2))
    uv0 = (cell + frac) / nodes
    w = rng.standard_normal((40, 3))
    frame = 1

    def make(p):
        return UVField(p["values"], None, p["residuals"])

    def value(p):
        return float(np.sum(w * field_query(make(p), p["uv"], frame)))

    def grad(p):
        gv, gr, guv = field_query_backward(make(p), p["uv"], frame, w, want_uv=True)
        return {"values": gv, "residuals": gr, "uv": guv}

    return Problem({"values": field.values, "residuals": field.residuals, "uv": uv0}, value, grad, step=1e-4)


def _offset_chain_problem(rng, output: str):
    """Vertex offsets + offset field -> displaced mesh -> rasterize -> surface points or O2N normals."""
    base = _bumpy_plane(rng)
    cam = _top_camera(16)
    field = _random_field(rng)
    l0 = 0.02 * rng.standard_normal(base.n_vertices)
    tri = rasterize(geom.apply_vertex_offsets(base, l0), cam).triangle_id
    w = rng.standard_normal((16, 16, 3))
    mask = tri >= 0

    nc = NormalConversion()

    def run(p):
        mesh = geom.apply_vertex_offsets(base, p["vertex_offsets"])
        return mesh, nc.forward(interpolate(mesh, cam, tri), UVField(p["offset_field"]))

    def value(p):
        _, maps = run(p)
        out = maps.x_surf if output == "x" else maps.n_surf
        return float(np.sum(np.where(mask[..., None], w * out, 0.0)))

    def grad(p):
        mesh, _ = run(p)
        gw = np.where(mask[..., None], w, 0.0)
        if output == "x":
            out = nc.backward(np.zeros_like(gw), grad_x_surf=gw)
        else:
            out = nc.backward(gw)
        vp = out.vertex_positions + geom.vertex_normals_backward(mesh.positions, mesh.faces, out.vertex_normals)
        return {"vertex_offsets": geom.vertex_offsets_backward(base, vp), "offset_field": out.offset_values}

    return Problem({"vertex_offsets": l0, "offset_field": field.values}, value, grad)


@register("surface_points_chain", LOOSE)
def _eq1(rng):
    return _offset_chain_problem(rng, "x")


@register("o2n_chain", LOOSE)
def _o2n(rng):
    return _offset_chain_problem(rng, "n")


@register("o2n_ramp", LOOSE)
def _o2n_ramp(rng):
    """Stencil only, on a 16x16 ramp, w.r.t. the surface points themselves."""
    mesh = geom.grid_plane(4, 4, (2.0, 2.0))
    pos = mesh.positions - [1.0, 1.0, 0.0]
    pos[:, 2] = rng.uniform(-0.3, 0.3) * pos[:, 0]
    mesh = mesh.with_positions(pos)
    gb = rasterize(mesh, _top_camera(16))
    x0 = gb.position + 0.01 * rng.standard_normal(gb.position.shape) * gb.mask[..., None]
    w = rng.standard_normal((16, 16, 3)) * gb.mask[..., None]

    def value(p):
        n, _ = _stencil_forward(p["x_surf"], gb, 0.03)
        return float(np.sum(w * n))

    def grad(p):
        _, state = _stencil_forward(p["x_surf"], gb, 0.03)
        gx, _ = _stencil_backward(p["x_surf"], state, w)
        return {"x_surf": gx * gb.mask[..., None]}

    return Problem({"x_surf": x0}, value, grad)


@register("rasterize_backward", LOOSE)
def _raster(rng):
    base = _bumpy_plane(rng, n=4)
    cam = _top_camera(12)
    tri = rasterize(base, cam).triangle_id
    n0 = base.normals + 0.1 * rng.standard_normal(base.normals.shape)
    wp, wn = rng.standard_normal((12, 12, 3)), rng.standard_normal((12, 12, 3))
    wu, wd = rng.standard_normal((12, 12, 2)), rng.standard_normal((12, 12))
    mask = tri >= 0

    def gbuf(p):
        mesh = TriangleMesh(p["positions"], base.faces, uvs=base.uvs, normals=p["normals"])
        return interpolate(mesh, cam, tri)

    def value(p):
        gb = gbuf(p)
        m3 = mask[..., None]
        return float(np.sum(np.where(m3, wp * gb.position + wn * gb.normal, 0.0))
                     + np.sum(np.where(m3, wu * gb.uv, 0.0)) + np.sum(np.where(mask, wd * gb.depth, 0.0)))

    def grad(p):
        gp, gn = rasterize_backward(gbuf(p), wp, wn, wu, np.where(mask, wd, 0.0))
        return {"positions": gp, "normals": gn}

    return Problem({"positions": base.positions.copy(), "normals": n0}, value, grad)


@register("brdf_literal", TIGHT)
def _brdf_literal(rng):
    a0 = rng.uniform(0.1, 0.9, (30, 3))
    g0 = rng.uniform(0.1, 0.9, 30)
    w = rng.standard_normal((30, 3))

    def value(p):
        return float(np.sum(w * (p["albedo"] + p["roughness"][:, None])))

    def grad(p):
        return {"albedo": w.copy(), "roughness": w.sum(axis=1)}

    return Problem({"albedo": a0, "roughness": g0}, value, grad, step=1e-3)


def _hemisphere(rng, n, around):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v = np.where(np.sum(v * around, axis=1, keepdims=True) < 0, -v, v)
    return v


@register("brdf_microfacet", LOOSE)
def _brdf_micro(rng):
    n0 = np.array([0.0, 0.0, 1.0]) + 0.2 * rng.standard_normal((30, 3))
    n0 /= np.linalg.norm(n0, axis=1, keepdims=True)
    wi = _hemisphere(rng, 30, n0)
    wo = _hemisphere(rng, 30, n0)
    # keep both cosines comfortably positive
    wi = wi + 0.6 * n0
    wi /= np.linalg.norm(wi, axis=1, keepdims=True)
    wo = wo + 0.6 * n0
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    g0 = rng.uniform(0.15, 0.9, 30)
    a0 = rng.uniform(0.1, 0.9, (30, 3))
    w = rng.standard_normal((30, 3))

    def value(p):
        f = specular_lobe(p["roughness"], p["normal"], wi, wo)
        return float(np.sum(w * (p["albedo"] / np.pi + f[:, None])))

    def grad(p):
        _, df_da, dn = specular_lobe(p["roughness"], p["normal"], wi, wo, need_grad=True)
        ws = w.sum(axis=1)
        return {"roughness": ws * df_da, "normal": ws[:, None] * dn, "albedo": w / np.pi}

    return Problem({"roughness": g0, "normal": n0, "albedo": a0}, value, grad)


def _render_problem(rng, mode: str, wrt: str):
    mesh = _bumpy_plane(rng, n=4, amp=0.1)
    cam = _top_camera(8)
    gb = rasterize(mesh, cam)
    mask = gb.mask
    probes = probe_sphere(8, 16, rng.uniform(0.0, 1.0, (8, 16, 3)))
    n0 = gb.normal + 0.1 * rng.standard_normal(gb.normal.shape) * mask[..., None]
    n0 /= np.maximum(np.linalg.norm(n0, axis=-1, keepdims=True), 1e-12)
    # occlude grazing directions so the FD step never straddles the max(cos, 0) kink
    grazing = np.abs(n0[mask] @ probes.directions.T) < 1e-3
    vis = VisibilityBuffer((rng.uniform(size=grazing.shape) < 0.8) & ~grazing, mask.copy())
    a0 = rng.uniform(0.1, 0.9, (8, 8, 3))
    g0 = rng.uniform(0.15, 0.9, (8, 8))
    w = rng.standard_normal((8, 8, 3))
    r = PBRRender(mode)
    init = {"albedo": a0, "roughness": g0, "radiance": probes.radiance, "normal": n0}

    def full(p):
        q = dict(init)
        q.update(p)
        return q

    def value(p):
        q = full(p)
        img = r.forward(gb, q["normal"], q["albedo"], q["roughness"], probes.with_radiance(q["radiance"]), vis)
        return float(np.sum(w * img))

    def grad(p):
        q = full(p)
        r.forward(gb, q["normal"], q["albedo"], q["roughness"], probes.with_radiance(q["radiance"]), vis)
        return {wrt: getattr(r.backward(w), wrt)}

    return Problem({wrt: init[wrt].copy()}, value, grad)


for _mode in (LITERAL, MICROFACET):
    for _wrt in ("albedo", "roughness", "radiance", "normal"):
        def _make(rng, _mode=_mode, _wrt=_wrt):
            return _render_problem(rng, _mode, _wrt)
        REGISTRY[f"render_{_mode}_{_wrt}"] = OpSpec(_make, LOOSE)


@register("loss_mse", TIGHT)
def _mse(rng):
    t = rng.uniform(size=(8, 8, 3))
    mask = rng.uniform(size=(8, 8)) < 0.7

    def value(p):
        return losses.loss_mse(p["pred"], t, mask)[0]

    def grad(p):
        return {"pred": losses.loss_mse(p["pred"], t, mask)[1]}

    return Problem({"pred": rng.uniform(size=(8, 8, 3))}, value, grad, step=1e-3)


@register("loss_ssim", LOOSE)
def _ssim(rng):
    t = rng.uniform(size=(32, 32, 3))
    mask = np.zeros((32, 32), dtype=bool)
    mask[2:30, 3:31] = True

    def value(p):
        return losses.loss_ssim(p["pred"], t, mask)[0]

    def grad(p):
        return {"pred": losses.loss_ssim(p["pred"], t, mask)[1]}

    return Problem({"pred": rng.uniform(size=(32, 32, 3))}, value, grad)


@register("mesh_regularizers", LOOSE)
def _reg(rng):
    mesh = geom.uv_sphere(6, 10)
    x0 = mesh.positions + 0.05 * rng.standard_normal(mesh.positions.shape)
    weights = rng.uniform(0.1, 1.0, 3)
    lap = geom.uniform_laplacian(mesh.n_vertices, mesh.faces)

    def value(p):
        return geom.mesh_regularizers(p["positions"], mesh.faces, 0.4, lap).weighted(*weights)[0]

    def grad(p):
        return {"positions": geom.mesh_regularizers(p["positions"], mesh.faces, 0.4, lap).weighted(*weights)[1]}

    return Problem({"positions": x0}, value, grad)


@register("vertex_normals", LOOSE)
def _vn(rng):
    mesh = geom.uv_sphere(5, 8)
    x0 = mesh.positions + 0.05 * rng.standard_normal(mesh.positions.shape)
    w = rng.standard_normal(x0.shape)

    def value(p):
        return float(np.sum(w * geom.compute_vertex_normals(p["positions"], mesh.faces)))

    def grad(p):
        return {"positions": geom.vertex_normals_backward(p["positions"], mesh.faces, w)}

    return Problem({"positions": x0}, value, grad)


@register("pose", TIGHT)
def _pose(rng):
    mesh = geom.uv_sphere(4, 6)
    wts = rng.uniform(size=(mesh.n_vertices, 2))
    wts /= wts.sum(axis=1, keepdims=True)
    mesh = TriangleMesh(mesh.positions, mesh.faces, skin_weights=wts)
    from scipy.spatial.transform import Rotation
    pose = geom.Pose(Rotation.random(2, random_state=int(rng.integers(1 << 31))).as_matrix(),
                     rng.standard_normal((2, 3)))
    w = rng.standard_normal(mesh.positions.shape)

    def value(p):
        return float(np.sum(w * geom.pose_mesh(mesh.with_positions(p["positions"]), pose).positions))

    def grad(p):
        return {"positions": geom.pose_backward(mesh, pose, w)}

    return Problem({"positions": mesh.positions.copy()}, value, grad, step=1e-3)


"""Light probes, BRDFs, visibility and the discretized rendering sum.

    I(x, wo) = sum_i L_i * R(x, w_i, wo, n) * V(x, w_i) * max(w_i . n, 0) * dw_i

Two reflectance models are available. ``literal`` is R = albedo + roughness,
independent of direction. ``microfacet`` is albedo / pi plus a GGX specular
lobe (alpha = roughness, height-correlated Smith masking, Schlick Fresnel with
F0 = 0.04).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bvh import BVH, unoccluded
from .raster import GBuffer

LITERAL = "literal"
MICROFACET = "microfacet"
F0 = 0.04
ROUGHNESS_RANGE = (0.01, 1.0)


@dataclass
class LightProbeSphere:
    radiance: np.ndarray  # (n_lat, n_lon, 3)
    directions: np.ndarray  # (n_lat * n_lon, 3)
    solid_angles: np.ndarray  # (n_lat * n_lon,)

    @property
    def n_lat(self) -> int:
        return self.radiance.shape[0]

    @property
    def n_lon(self) -> int:
        return self.radiance.shape[1]

    @property
    def flat_radiance(self) -> np.ndarray:
        return self.radiance.reshape(-1, 3)

    def with_radiance(self, radiance) -> "LightProbeSphere":
        radiance = np.array(np.broadcast_to(radiance, self.radiance.shape), dtype=np.float64)
        return LightProbeSphere(radiance, self.directions, self.solid_angles)


def probe_sphere(n_lat: int = 16, n_lon: int = 32, radiance=0.0) -> LightProbeSphere:
    """Lat-long probe grid; theta is measured from +Z, cell solid angles are exact."""
    if n_lat < 1 or n_lon < 1:
        raise ValueError("probe grid needs at least one cell")
    theta_edges = np.linspace(0.0, np.pi, n_lat + 1)
    theta = 0.5 * (theta_edges[:-1] + theta_edges[1:])
    dphi = 2 * np.pi / n_lon
    phi = (np.arange(n_lon) + 0.5) * dphi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1).reshape(-1, 3)
    band = np.cos(theta_edges[:-1]) - np.cos(theta_edges[1:])
    omega = np.repeat(dphi * band, n_lon)
    rad = np.array(np.broadcast_to(np.asarray(radiance, dtype=np.float64), (n_lat, n_lon, 3)))
    return LightProbeSphere(rad, dirs, omega)


def direction_to_cell(probes: LightProbeSphere, direction) -> tuple[int, int]:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    theta = np.arccos(np.clip(d[2], -1, 1))
    phi = np.arctan2(d[1], d[0]) % (2 * np.pi)
    i = min(int(theta / np.pi * probes.n_lat), probes.n_lat - 1)
    j = min(int(phi / (2 * np.pi) * probes.n_lon), probes.n_lon - 1)
    return i, j


# ---------------------------------------------------------------------------
# BRDF


@dataclass
class MaterialSample:
    albedo: np.ndarray
    roughness: float

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        # 0 is accepted for the literal model's albedo-only case
        if not 0.0 <= self.roughness <= 1.0:
            raise ValueError("roughness must lie in [0, 1]")


def _ggx_terms(alpha, ci, co, ch, cvh):
    """Specular lobe and its partials w.r.t. (alpha, ci, co, ch). Arrays broadcast; cosines > 0."""
    a2 = alpha * alpha
    t = ch * ch * (a2 - 1.0) + 1.0
    d = a2 / (np.pi * t * t)
    dd_dch = -4.0 * a2 * ch * (a2 - 1.0) / (np.pi * t ** 3)
    dd_da = 2.0 * alpha / (np.pi * t * t) - 4.0 * alpha ** 3 * ch * ch / (np.pi * t ** 3)

    def lam(c):
        q = a2 * (1.0 - c * c) / (c * c)
        root = np.sqrt(1.0 + q)
        val = 0.5 * (root - 1.0)
        dq = 0.25 / root
        return val, dq * 2.0 * alpha * (1.0 - c * c) / (c * c), dq * (-2.0 * a2 / c ** 3)

    li, li_da, li_dc = lam(ci)
    lo, lo_da, lo_dc = lam(co)
    g = 1.0 / (1.0 + li + lo)
    g2 = g * g
    dg_da = -g2 * (li_da + lo_da)
    dg_dci = -g2 * li_dc
    dg_dco = -g2 * lo_dc
    fres = F0 + (1.0 - F0) * (1.0 - cvh) ** 5
    denom = 4.0 * ci * co
    f = d * fres * g / denom
    df_da = fres * (dd_da * g + d * dg_da) / denom
    df_dci = d * fres * (dg_dci / denom - g * 4.0 * co / denom ** 2)
    df_dco = d * fres * (dg_dco / denom - g * 4.0 * ci / denom ** 2)
    df_dch = dd_dch * fres * g / denom
    return f, df_da, df_dci, df_dco, df_dch


def specular_lobe(roughness, n, wi, wo, need_grad: bool = False):
    """GGX f_spec for broadcastable (..., 3) vectors; zero where either cosine <= 0.

    With ``need_grad`` also returns d f / d roughness and d f / d n.
    """
    n, wi, wo = (np.asarray(v, dtype=np.float64) for v in (n, wi, wo))
    h = wi + wo
    hn = np.linalg.norm(h, axis=-1, keepdims=True)
    h = h / np.maximum(hn, 1e-300)
    ci = np.sum(n * wi, axis=-1)
    co = np.sum(n * wo, axis=-1)
    ch = np.sum(n * h, axis=-1)
    cvh = np.clip(np.sum(wo * h, axis=-1), 0.0, 1.0)
    alpha = np.asarray(roughness, dtype=np.float64)
    ok = (ci > 0) & (co > 0)
    cis = np.where(ok, ci, 1.0)
    cos_ = np.where(ok, co, 1.0)
    f, df_da, df_dci, df_dco, df_dch = _ggx_terms(alpha, cis, cos_, ch, cvh)
    f = np.where(ok, f, 0.0)
    if not need_grad:
        return f
    df_da = np.where(ok, df_da, 0.0)
    dn = (np.where(ok, df_dci, 0.0)[..., None] * wi + np.where(ok, df_dco, 0.0)[..., None] * wo
          + np.where(ok, df_dch, 0.0)[..., None] * h)
    return f, df_da, dn


def _check_unit(name, v):
    if abs(np.linalg.norm(v) - 1.0) > 1e-3:
        raise ValueError(f"{name} must be a unit vector")


def brdf_eval(material: MaterialSample, n, wi, wo, mode: str = LITERAL) -> np.ndarray:
    """RGB reflectance for one (n, w_i, w_o) triple."""
    n, wi, wo = (np.asarray(v, dtype=np.float64) for v in (n, wi, wo))
    for name, v in (("n", n), ("w_i", wi), ("w_o", wo)):
        _check_unit(name, v)
    if mode == LITERAL:
        return material.albedo + material.roughness
    if mode == MICROFACET:
        return material.albedo / np.pi + float(specular_lobe(material.roughness, n, wi, wo))
    raise ValueError(f"unknown BRDF mode {mode!r}")


# ---------------------------------------------------------------------------
# visibility


@dataclass
class VisibilityBuffer:
    bits: np.ndarray  # (P, N) bool, P = masked pixels in row-major order
    mask: np.ndarray  # (H, W)


def visibility(x_surf: np.ndarray, mask: np.ndarray, bvh: BVH, probes: LightProbeSphere,
               epsilon_scale: float = 1e-4, scene_diagonal: float | None = None) -> VisibilityBuffer:
    if scene_diagonal is None:
        scene_diagonal = float(np.linalg.norm(bvh.box_max[0] - bvh.box_min[0]))
    bits = unoccluded(bvh, x_surf[mask], probes.directions, epsilon_scale * scene_diagonal)
    return VisibilityBuffer(bits, mask.copy())


def full_visibility(mask: np.ndarray, probes: LightProbeSphere) -> VisibilityBuffer:
    return VisibilityBuffer(np.ones((int(mask.sum()), len(probes.directions)), dtype=bool), mask.copy())


# ---------------------------------------------------------------------------
# rendering


@dataclass
class RenderGrads:
    albedo: np.ndarray  # (H, W, 3)
    roughness: np.ndarray  # (H, W)
    radiance: np.ndarray  # (n_lat, n_lon, 3)
    normal: np.ndarray  # (H, W, 3)


class PBRRender:
    """render_pbr forward with cached state for the adjoint."""

    def __init__(self, mode: str = LITERAL, background=(0.0, 0.0, 0.0)):
        if mode not in (LITERAL, MICROFACET):
            raise ValueError(f"unknown BRDF mode {mode!r}")
        self.mode = mode
        self.background = np.asarray(background, dtype=np.float64)
        self._cache = None

    def forward(self, gbuffer: GBuffer, n_surf, albedo, roughness, probes: LightProbeSphere,
                vis: VisibilityBuffer, x_surf=None) -> np.ndarray:
        mask = gbuffer.mask
        h, w = mask.shape
        if n_surf.shape != (h, w, 3) or albedo.shape != (h, w, 3) or roughness.shape != (h, w):
            raise ValueError("render inputs must share the G-buffer resolution")
        if vis.mask.shape != mask.shape or not np.array_equal(vis.mask, mask):
            raise ValueError("visibility was computed for a different mask")
        n = n_surf[mask]
        a = albedo[mask]
        g = roughness[mask]
        dirs = probes.directions
        lrad = probes.flat_radiance
        cos = n @ dirs.T  # (P, N)
        pos = cos > 0
        k = np.where(pos & vis.bits, cos, 0.0) * probes.solid_angles  # V * cos+ * dw
        img = np.empty((h, w, 3))
        img[...] = self.background
        cache = dict(gbuffer=gbuffer, n=n, a=a, g=g, k=k, pos=pos, vis=vis.bits, probes=probes)
        if self.mode == LITERAL:
            s = k @ lrad
            img[mask] = (a + g[:, None]) * s
            cache["s"] = s
        else:
            xs = gbuffer.position[mask] if x_surf is None else x_surf[mask]
            wo = gbuffer.camera.center - xs
            wo /= np.linalg.norm(wo, axis=1, keepdims=True)
            f, df_da, df_dn = specular_lobe(g[:, None], n[:, None, :], dirs[None, :, :], wo[:, None, :],
                                            need_grad=True)
            s = k @ lrad
            glossy = (k * f) @ lrad
            img[mask] = a / np.pi * s + glossy
            cache.update(s=s, f=f, df_da=df_da, df_dn=df_dn)
        self._cache = cache
        return img

    def backward(self, grad_image: np.ndarray) -> RenderGrads:
        if self._cache is None:
            raise RuntimeError("PBRRender.backward called before forward")
        c = self._cache
        gb, probes = c["gbuffer"], c["probes"]
        mask = gb.mask
        h, w = mask.shape
        gi = grad_image[mask]  # (P, 3)
        n, a, g, k, s = c["n"], c["a"], c["g"], c["k"], c["s"]
        lrad = probes.flat_radiance
        dirs = probes.directions
        cosmask = (c["pos"] & c["vis"]) * probes.solid_angles  # d k / d cos
        ga = np.zeros((h, w, 3))
        gg = np.zeros((h, w))
        gn = np.zeros((h, w, 3))
        if self.mode == LITERAL:
            r = a + g[:, None]
            ga[mask] = gi * s
            gg[mask] = np.sum(gi * s, axis=1)
            glight = k.T @ (gi * r)
            wgt = (gi * r) @ lrad.T  # (P, N)
            gn[mask] = (wgt * cosmask) @ dirs
        else:
            f, df_da, df_dn = c["f"], c["df_da"], c["df_dn"]
            ga[mask] = gi * s / np.pi
            gl = gi @ lrad.T  # (P, N): sum_c g_c L_ic
            gg[mask] = np.sum(gl * k * df_da, axis=1)
            glight = k.T @ (gi * a / np.pi) + (k * f).T @ gi
            wdiff = (gi * a / np.pi) @ lrad.T
            gn[mask] = ((wdiff + gl * f) * cosmask) @ dirs + np.einsum("pn,pnc->pc", gl * k, df_dn)
        return RenderGrads(ga, gg, glight.reshape(probes.radiance.shape), gn)


def render_pbr(gbuffer, n_surf, albedo, roughness, probes, vis, mode=LITERAL, background=(0, 0, 0), x_surf=None):
    return PBRRender(mode, background).forward(gbuffer, n_surf, albedo, roughness, probes, vis, x_surf)


def shading_image(gbuffer: GBuffer, n_surf, probes: LightProbeSphere, vis: VisibilityBuffer) -> np.ndarray:
    """Render with unit albedo, zero specular, literal model."""
    h, w = gbuffer.mask.shape
    return render_pbr(gbuffer, n_surf, np.ones((h, w, 3)), np.zeros((h, w)), probes, vis, LITERAL)


# ---------------------------------------------------------------------------
# environment maps


def _overlap(edges_a, edges_b):
    """(len(a)-1, len(b)-1) overlap lengths of two sorted interval partitions."""
    lo = np.maximum(edges_a[:-1, None], edges_b[None, :-1])
    hi = np.minimum(edges_a[1:, None], edges_b[None, 1:])
    return np.maximum(hi - lo, 0.0)


def envmap_to_probes(envmap: np.ndarray, n_lat: int = 16, n_lon: int = 32) -> LightProbeSphere:
    """Solid-angle-weighted average of equirectangular texels over each probe cell.

    Row 0 of the map is theta = 0 (+Z); column 0 starts at phi = 0.
    """
    envmap = np.asarray(envmap, dtype=np.float64)
    if envmap.ndim != 3 or envmap.shape[2] != 3 or envmap.shape[0] < 1 or envmap.shape[1] < 1:
        raise OSError(f"environment map must be (H, W, 3), got {envmap.shape}")
    if not np.all(np.isfinite(envmap)):
        raise OSError("environment map has non-finite texels")
    he, we = envmap.shape[:2]
    # weights in cos(theta) so that products are solid angles
    cos_probe = -np.cos(np.linspace(0.0, np.pi, n_lat + 1))
    cos_env = -np.cos(np.linspace(0.0, np.pi, he + 1))
    wlat = _overlap(cos_probe, cos_env)
    wlon = _overlap(np.linspace(0.0, 1.0, n_lon + 1), np.linspace(0.0, 1.0, we + 1))
    num = np.einsum("ir,jc,rcx->ijx", wlat, wlon, envmap)
    den = np.einsum("ir,jc->ij", wlat, wlon)
    probes = probe_sphere(n_lat, n_lon)
    probes.radiance = num / den[..., None]
    return probes


def probes_to_envmap(probes: LightProbeSphere) -> np.ndarray:
    """Probe grid as an (n_lat, n_lon, 3) equirectangular image."""
    return probes.radiance.copy()

"""Per-pixel offset surface points and the five-point cross-product normal stencil.

For pixel i with screen neighbours j (right), k (up), l (left), m (down)::

    n_i = (x_j-x_i)x(x_k-x_i) + (x_k-x_i)x(x_l-x_i) + (x_l-x_i)x(x_m-x_i) + (x_m-x_i)x(x_j-x_i)

This ordering makes n_i face the camera for front-facing surfaces. A term is
dropped when either of its neighbours is off the mask or across a depth jump;
pixels keeping fewer than two terms use the rasterized normal and are marked
invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import UVField, field_query, field_query_backward
from .raster import GBuffer, rasterize_backward

# (row, col) shifts of j, k, l, m
NEIGHBOURS = ((0, 1), (-1, 0), (0, -1), (1, 0))
TERMS = ((0, 1), (1, 2), (2, 3), (3, 0))
NORM_GUARD = 1e-12
DEFAULT_TAU = 0.03


@dataclass
class SurfaceMaps:
    x_surf: np.ndarray  # (H, W, 3)
    n_surf: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool


def _shift(a: np.ndarray, dr: int, dc: int, fill=0.0) -> np.ndarray:
    """out[r, c] = a[r + dr, c + dc], ``fill`` outside."""
    out = np.full_like(a, fill)
    h, w = a.shape[:2]
    rs = slice(max(0, -dr), min(h, h - dr))
    cs = slice(max(0, -dc), min(w, w - dc))
    rsrc = slice(max(0, dr), min(h, h + dr))
    csrc = slice(max(0, dc), min(w, w + dc))
    out[rs, cs] = a[rsrc, csrc]
    return out


def _unshift_add(target: np.ndarray, g: np.ndarray, dr: int, dc: int):
    """Adjoint of _shift: target[r + dr, c + dc] += g[r, c]."""
    h, w = g.shape[:2]
    rs = slice(max(0, -dr), min(h, h - dr))
    cs = slice(max(0, -dc), min(w, w - dc))
    rdst = slice(max(0, dr), min(h, h + dr))
    cdst = slice(max(0, dc), min(w, w + dc))
    target[rdst, cdst] += g[rs, cs]


def surface_points(gbuffer: GBuffer, offset_field: UVField, frame: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """x_surf = x + n * l on masked pixels. Returns (x_surf, l)."""
    if offset_field.channels != 1:
        raise ValueError("offset field must have one channel")
    mask = gbuffer.mask
    l = np.zeros(mask.shape)
    x_surf = np.zeros(mask.shape + (3,))
    if mask.any():
        l[mask] = field_query(offset_field, gbuffer.uv[mask], frame)[:, 0]
        x_surf[mask] = gbuffer.position[mask] + gbuffer.normal[mask] * l[mask][:, None]
    return x_surf, l


@dataclass
class _StencilState:
    term_ok: np.ndarray  # (4, H, W) bool
    n_raw: np.ndarray  # (H, W, 3)
    n_len: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W)


def _neighbour_ok(gbuffer: GBuffer, tau: float) -> np.ndarray:
    mask = gbuffer.mask
    depth = np.where(mask, gbuffer.depth, 0.0)
    ok = np.empty((4,) + mask.shape, dtype=bool)
    for q, (dr, dc) in enumerate(NEIGHBOURS):
        m = _shift(mask, dr, dc, False)
        d = _shift(depth, dr, dc, 0.0)
        ok[q] = m & mask & (np.abs(d - depth) <= tau * depth)
    return ok


def _stencil_forward(x_surf: np.ndarray, gbuffer: GBuffer, tau: float):
    nb_ok = _neighbour_ok(gbuffer, tau)
    shifted = [_shift(x_surf, dr, dc) - x_surf for dr, dc in NEIGHBOURS]
    term_ok = np.empty((4,) + gbuffer.mask.shape, dtype=bool)
    n_raw = np.zeros_like(x_surf)
    for t, (a, b) in enumerate(TERMS):
        term_ok[t] = nb_ok[a] & nb_ok[b]
        n_raw += np.where(term_ok[t][..., None], np.cross(shifted[a], shifted[b]), 0.0)
    n_len = np.linalg.norm(n_raw, axis=-1)
    valid = gbuffer.mask & (term_ok.sum(axis=0) >= 2) & (n_len >= NORM_GUARD)
    n_surf = np.where(valid[..., None], n_raw / np.maximum(n_len, NORM_GUARD)[..., None], gbuffer.normal)
    n_surf[~gbuffer.mask] = 0.0
    return n_surf, _StencilState(term_ok, n_raw, n_len, valid)


def offsets_to_normals(x_surf: np.ndarray, gbuffer: GBuffer, depth_discontinuity_tau: float = DEFAULT_TAU) -> SurfaceMaps:
    n_surf, state = _stencil_forward(x_surf, gbuffer, depth_discontinuity_tau)
    return SurfaceMaps(x_surf, n_surf, state.valid)


def _stencil_backward(x_surf, state: _StencilState, grad_n):
    """Returns (grad x_surf, grad for fallback pixels' base normal)."""
    valid = state.valid
    n_len = np.maximum(state.n_len, NORM_GUARD)[..., None]
    nbar = state.n_raw / n_len
    gn = np.where(valid[..., None], (grad_n - nbar * np.sum(nbar * grad_n, axis=-1, keepdims=True)) / n_len, 0.0)
    shifted = [_shift(x_surf, dr, dc) - x_surf for dr, dc in NEIGHBOURS]
    g_shift = [np.zeros_like(x_surf) for _ in NEIGHBOURS]
    for t, (a, b) in enumerate(TERMS):
        ok = state.term_ok[t][..., None]
        g_shift[a] += np.where(ok, np.cross(shifted[b], gn), 0.0)
        g_shift[b] += np.where(ok, np.cross(gn, shifted[a]), 0.0)
    gx = np.zeros_like(x_surf)
    for q, (dr, dc) in enumerate(NEIGHBOURS):
        gx -= g_shift[q]
        _unshift_add(gx, g_shift[q], dr, dc)
    g_base = np.where(valid[..., None], 0.0, grad_n)
    return gx, g_base


@dataclass
class O2NGrads:
    offset_values: np.ndarray
    offset_residuals: np.ndarray | None
    vertex_positions: np.ndarray
    vertex_normals: np.ndarray


class NormalConversion:
    """Forward/backward pair that caches what the adjoint needs."""

    def __init__(self, depth_discontinuity_tau: float = DEFAULT_TAU):
        self.tau = depth_discontinuity_tau
        self._cache = None

    def forward(self, gbuffer: GBuffer, offset_field: UVField, frame: int = 0) -> SurfaceMaps:
        x_surf, l = surface_points(gbuffer, offset_field, frame)
        n_surf, state = _stencil_forward(x_surf, gbuffer, self.tau)
        self._cache = (gbuffer, offset_field, frame, x_surf, l, state)
        return SurfaceMaps(x_surf, n_surf, state.valid)

    def backward(self, grad_n_surf: np.ndarray, grad_x_surf: np.ndarray | None = None,
                 through_barycentrics: bool = True) -> O2NGrads:
        if self._cache is None:
            raise RuntimeError("NormalConversion.backward called before forward")
        gbuffer, field, frame, x_surf, l, state = self._cache
        mask = gbuffer.mask
        gx, g_base = _stencil_backward(x_surf, state, np.where(mask[..., None], grad_n_surf, 0.0))
        if grad_x_surf is not None:
            gx = gx + grad_x_surf
        gx[~mask] = 0.0
        # x_surf = x + n * l
        g_pos = gx
        g_nrm = gx * l[..., None] + g_base
        g_l = np.sum(gbuffer.normal * gx, axis=-1)
        gv, gres, guv_m = field_query_backward(field, gbuffer.uv[mask], frame, g_l[mask][:, None], want_uv=True)
        g_uv = np.zeros(mask.shape + (2,))
        g_uv[mask] = guv_m
        vp, vn = rasterize_backward(gbuffer, grad_position=g_pos, grad_normal=g_nrm, grad_uv=g_uv,
                                    through_barycentrics=through_barycentrics)
        return O2NGrads(gv, gres, vp, vn)

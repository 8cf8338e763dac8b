"""Learnable bilinear grids over uv space.

Grid layout is ``values[row, col, channel]`` with shape (H, W, C); u maps to
columns and v to rows, node (row, col) sits at uv = (col / (W-1), row / (H-1)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class UVField:
    values: np.ndarray  # (H, W, C)
    clamp: tuple[float, float] | None = None
    residuals: np.ndarray | None = None  # (F, H, W, C)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("field values must be (H, W, C)")
        if self.residuals is not None:
            self.residuals = np.asarray(self.residuals, dtype=np.float64)
            if self.residuals.shape[1:] != self.values.shape:
                raise ValueError("residual grids must match the base grid")
        if self.clamp is not None:
            self.clamp = (float(self.clamp[0]), float(self.clamp[1]))

    @property
    def resolution(self) -> tuple[int, int]:
        """(W, H) node counts."""
        return self.values.shape[1], self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def frames(self) -> int:
        return 0 if self.residuals is None else self.residuals.shape[0]

    def copy(self) -> "UVField":
        return UVField(self.values.copy(), self.clamp, None if self.residuals is None else self.residuals.copy())


def field_init(resolution: tuple[int, int], channels: int, constant=0.0, clamp=None, frames: int = 0) -> UVField:
    w, h = resolution
    if w < 2 or h < 2:
        raise ValueError("field resolution must be at least 2x2")
    values = np.empty((h, w, channels))
    values[...] = np.broadcast_to(np.asarray(constant, dtype=np.float64), (channels,))
    residuals = np.zeros((frames, h, w, channels)) if frames > 0 else None
    return UVField(values, clamp, residuals)


@dataclass
class _Stencil:
    idx: np.ndarray  # (N, 4) flat node indices
    weights: np.ndarray  # (N, 4)
    dweights: np.ndarray  # (N, 4, 2) d weight / d uv
    n_nodes: int


def _stencil(field: UVField, uv: np.ndarray) -> _Stencil:
    h, w, _ = field.values.shape
    u = uv[:, 0]
    v = uv[:, 1]
    inside_u = (u > 0.0) & (u < 1.0)
    inside_v = (v > 0.0) & (v < 1.0)
    x = np.clip(u, 0.0, 1.0) * (w - 1)
    y = np.clip(v, 0.0, 1.0) * (h - 1)
    i0 = np.minimum(np.floor(x).astype(np.int64), w - 2)
    j0 = np.minimum(np.floor(y).astype(np.int64), h - 2)
    fx = x - i0
    fy = y - j0
    idx = np.stack([j0 * w + i0, j0 * w + i0 + 1, (j0 + 1) * w + i0, (j0 + 1) * w + i0 + 1], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    dxu = np.where(inside_u, w - 1.0, 0.0)
    dyv = np.where(inside_v, h - 1.0, 0.0)
    dfx = np.stack([-(1 - fy), 1 - fy, -fy, fy], axis=1) * dxu[:, None]
    dfy = np.stack([-(1 - fx), -fx, 1 - fx, fx], axis=1) * dyv[:, None]
    return _Stencil(idx, wts, np.stack([dfx, dfy], axis=2), h * w)


def _raw_query(field: UVField, st: _Stencil, frame: int) -> np.ndarray:
    c = field.channels
    flat = field.values.reshape(-1, c)
    nodes = flat[st.idx]
    if field.residuals is not None:
        nodes = nodes + field.residuals[frame].reshape(-1, c)[st.idx]
    return nodes


def _check_frame(field: UVField, frame: int):
    if field.residuals is not None and not 0 <= frame < field.frames:
        raise ValueError(f"frame {frame} out of range for {field.frames} residual grids")


def field_query(field: UVField, uv, frame: int = 0) -> np.ndarray:
    """Bilinear lookup at uv (..., 2) -> (..., C). uv is clamped to the unit square."""
    _check_frame(field, frame)
    uv = np.asarray(uv, dtype=np.float64)
    lead = uv.shape[:-1]
    st = _stencil(field, uv.reshape(-1, 2))
    out = np.einsum("nk,nkc->nc", st.weights, _raw_query(field, st, frame))
    if field.clamp is not None:
        out = np.clip(out, *field.clamp)
    return out.reshape(*lead, field.channels)


def field_query_backward(field: UVField, uv, frame: int, grad_out, want_uv: bool = False):
    """Adjoint of :func:`field_query`.

    Returns ``(grad_values, grad_residuals)``, plus the uv gradient when
    ``want_uv`` is set. ``grad_residuals`` is None when the field has none.
    Channels saturated by the clamp pass no gradient.
    """
    _check_frame(field, frame)
    uv = np.asarray(uv, dtype=np.float64)
    lead = uv.shape[:-1]
    c = field.channels
    st = _stencil(field, uv.reshape(-1, 2))
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1, c)
    nodes = _raw_query(field, st, frame)
    if field.clamp is not None:
        raw = np.einsum("nk,nkc->nc", st.weights, nodes)
        lo, hi = field.clamp
        g = np.where((raw <= lo) | (raw >= hi), 0.0, g)
    flat_idx = st.idx.ravel()
    grad = np.empty((st.n_nodes, c))
    for ch in range(c):
        grad[:, ch] = np.bincount(flat_idx, weights=(st.weights * g[:, ch:ch + 1]).ravel(), minlength=st.n_nodes)
    grad = grad.reshape(field.values.shape)
    grad_res = None
    if field.residuals is not None:
        grad_res = np.zeros_like(field.residuals)
        grad_res[frame] = grad
    if not want_uv:
        return grad, grad_res
    guv = np.einsum("nkd,nkc,nc->nd", st.dweights, nodes, g)
    return grad, grad_res, guv.reshape(*lead, 2)


def field_uv_jacobian(field: UVField, uv, frame: int = 0) -> np.ndarray:
    """d output / d uv, shape (..., C, 2), with clamp saturation applied."""
    uv = np.asarray(uv, dtype=np.float64)
    lead = uv.shape[:-1]
    st = _stencil(field, uv.reshape(-1, 2))
    nodes = _raw_query(field, st, frame)
    jac = np.einsum("nkd,nkc->ncd", st.dweights, nodes)
    if field.clamp is not None:
        raw = np.einsum("nk,nkc->nc", st.weights, nodes)
        sat = (raw <= field.clamp[0]) | (raw >= field.clamp[1])
        jac[sat] = 0.0
    return jac.reshape(*lead, field.channels, 2)


def project_field(field: UVField):
    """Clamp stored node values into the field's range in place."""
    if field.clamp is not None:
        np.clip(field.values, *field.clamp, out=field.values)

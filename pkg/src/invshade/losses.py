"""Image losses with adjoints, and evaluation metrics."""

from __future__ import annotations

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 99.0


def _channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def loss_mse(pred, target, mask=None) -> tuple[float, np.ndarray]:
    """Mean over masked pixels and channels of (pred - target)^2, and its gradient w.r.t. pred."""
    p = _channels(pred)
    t = _channels(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    m = np.ones(p.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(m.sum()) * p.shape[2]
    if n == 0:
        return 0.0, np.zeros_like(np.asarray(pred, dtype=np.float64))
    diff = np.where(m[..., None], p - t, 0.0)
    grad = 2.0 * diff / n
    return float(np.sum(diff ** 2) / n), grad.reshape(np.shape(pred))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    k = len(g)
    h, w = img.shape[:2]
    tmp = sum(g[i] * img[i:h - k + 1 + i] for i in range(k))
    return sum(g[j] * tmp[:, j:w - k + 1 + j] for j in range(k))


def _filter_valid_adjoint(grad: np.ndarray, g: np.ndarray, shape) -> np.ndarray:
    k = len(g)
    h, w = shape[:2]
    tmp = np.zeros((grad.shape[0], w) + grad.shape[2:])
    for j in range(k):
        tmp[:, j:w - k + 1 + j] += g[j] * grad
    out = np.zeros((h, w) + grad.shape[2:])
    for i in range(k):
        out[i:h - k + 1 + i] += g[i] * tmp
    return out


def ssim(pred, target, mask=None, need_grad: bool = False):
    """Mean SSIM over channels and over windows lying fully inside ``mask``.

    Returns ``ssim`` or ``(ssim, d ssim / d pred)``.
    """
    x = _channels(pred)
    y = _channels(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    h, w = x.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    m = np.ones((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    box = np.ones(SSIM_WINDOW) / SSIM_WINDOW
    inside = _filter_valid(m.astype(np.float64), box) > 1.0 - 1e-9
    count = int(inside.sum()) * x.shape[2]
    if count == 0:
        value = 1.0
        return (value, np.zeros_like(np.asarray(pred, dtype=np.float64))) if need_grad else value

    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    sel = inside[..., None]
    value = float(np.sum(np.where(sel, smap, 0.0)) / count)
    if not need_grad:
        return value

    gs = np.where(sel, 1.0 / count, 0.0)
    # partials of smap w.r.t. mx, E[x^2], E[xy] (sxx = E[x^2] - mx^2, sxy = E[xy] - mx my)
    d_a1 = gs * a2 / (b1 * b2)
    d_a2 = gs * a1 / (b1 * b2)
    d_b1 = -gs * smap / b1
    d_b2 = -gs * smap / b2
    d_mx = d_a1 * 2 * my + d_a2 * (-2 * my) + d_b1 * 2 * mx + d_b2 * (-2 * mx)
    d_exx = d_b2
    d_exy = 2 * d_a2
    grad = (_filter_valid_adjoint(d_mx, g, x.shape)
            + 2 * x * _filter_valid_adjoint(d_exx, g, x.shape)
            + y * _filter_valid_adjoint(d_exy, g, x.shape))
    return value, grad.reshape(np.shape(pred))


def loss_ssim(pred, target, mask=None) -> tuple[float, np.ndarray]:
    """1 - SSIM and its gradient w.r.t. pred."""
    value, grad = ssim(pred, target, mask, need_grad=True)
    return 1.0 - value, -grad


# ---------------------------------------------------------------------------
# metrics


def metric_psnr(pred, target, mask=None) -> float:
    p = _channels(pred)
    t = _channels(target)
    m = np.ones(p.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        return PSNR_CAP
    mse = float(np.mean((p[m] - t[m]) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def channel_scales(pred, target, mask=None) -> np.ndarray:
    """Least-squares per-channel s minimizing |s * pred - target| over the mask."""
    p = _channels(pred)
    t = _channels(target)
    m = np.ones(p.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pp = np.sum(p[m] * p[m], axis=0)
    pt = np.sum(p[m] * t[m], axis=0)
    return np.where(pp > 0, pt / np.where(pp > 0, pp, 1.0), 0.0)


def metric_scale_aligned(pred, target, mask=None) -> tuple[np.ndarray, float]:
    """Per-channel scale alignment, then PSNR. Returns (scales, psnr)."""
    s = channel_scales(pred, target, mask)
    aligned = _channels(pred) * s
    return s, metric_psnr(aligned, target, mask)


def angular_errors(pred_normals, target_normals, mask) -> np.ndarray:
    p = np.asarray(pred_normals)[mask]
    t = np.asarray(target_normals)[mask]
    pn = np.linalg.norm(p, axis=1)
    tn = np.linalg.norm(t, axis=1)
    if np.any(pn < 1e-12) or np.any(tn < 1e-12):
        raise ValueError("zero-length normal on the mask")
    cos = np.sum(p * t, axis=1) / (pn * tn)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def metric_normal_degree(pred_normals, target_normals, mask) -> float:
    """Mean angular error in degrees over the mask."""
    err = angular_errors(pred_normals, target_normals, mask)
    return float(err.mean()) if len(err) else 0.0

"""Albedo de-shading and normal-prior providers.

The analytic de-shader divides by the shading image computed from the current
light probes, visibility and surface normals. File-backed providers read
``{frame:06}.pfm`` images from a directory so that results of an external model
can be fed back in.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .raster import GBuffer
from .shade import LightProbeSphere, VisibilityBuffer, shading_image

DEFAULT_S_FLOOR = 0.05


@dataclass
class DeshadeRequest:
    albedo_shaded: np.ndarray  # (H, W, 3)
    n_surf: np.ndarray
    mask: np.ndarray
    frame: int = 0


@dataclass
class NormalPriorRequest:
    n_surf: np.ndarray
    i_rgb: np.ndarray
    mask: np.ndarray
    frame: int = 0
    view: int = 0


def deshade_analytic(request: DeshadeRequest, probes: LightProbeSphere, vis: VisibilityBuffer, gbuffer: GBuffer,
                     s_floor: float = DEFAULT_S_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Returns (clean albedo, confidence). Pixels whose darkest shading channel is below
    ``s_floor`` pass through with confidence 0."""
    s = shading_image(gbuffer, request.n_surf, probes, vis)
    conf = request.mask & (s.min(axis=-1) >= s_floor)
    out = request.albedo_shaded.copy()
    out[conf] = request.albedo_shaded[conf] / s[conf]
    np.clip(out, 0.0, 1.0, out=out)
    return out, conf


def frame_path(directory, frame: int) -> Path:
    return Path(directory) / f"{frame:06d}.pfm"


def load_frame_image(directory, frame: int, shape: tuple[int, ...]) -> np.ndarray:
    path = frame_path(directory, frame)
    if not path.exists():
        raise OSError(f"no provider image for frame {frame}: {path}")
    img = fileio.read_pfm(path)
    if img.shape != tuple(shape):
        raise OSError(f"provider image for frame {frame} has shape {img.shape}, expected {tuple(shape)}")
    return img.astype(np.float64)


def deshade_external(request: DeshadeRequest, directory) -> np.ndarray:
    return load_frame_image(directory, request.frame, request.albedo_shaded.shape)


def _tangent_axes(n: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random unit axes perpendicular to each normal."""
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    psi = rng.uniform(0.0, 2 * np.pi, len(n))
    return np.cos(psi)[:, None] * t1 + np.sin(psi)[:, None] * t2


def rotate(v: np.ndarray, axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation of rows of v about unit axes."""
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    return v * c + np.cross(axis, v) * s + axis * np.sum(axis * v, axis=1, keepdims=True) * (1 - c)


def noisy_normals(gt_normals: np.ndarray, mask: np.ndarray, sigma_deg: float, seed: int, frame: int,
                  view: int = 0) -> np.ndarray:
    """Rotate each ground-truth normal about a random tangent axis by an N(0, sigma^2) angle."""
    out = gt_normals.copy()
    if sigma_deg == 0:
        return out
    rng = np.random.default_rng([seed, frame, view])
    n = gt_normals[mask]
    axis = _tangent_axes(n, rng)
    angle = np.radians(sigma_deg) * rng.standard_normal(len(n))
    r = rotate(n, axis, angle)
    out[mask] = r / np.linalg.norm(r, axis=1, keepdims=True)
    return out


class NormalPrior:
    """N_enhance provider: ``identity``, ``gt_noisy`` or ``external``."""

    def __init__(self, provider: str = "identity", sigma_deg: float = 0.0, seed: int = 0, directory=None,
                 gt_normals=None):
        if provider not in ("identity", "gt_noisy", "external"):
            raise ValueError(f"unknown normal prior provider {provider!r}")
        if provider == "gt_noisy" and gt_normals is None:
            raise ValueError("gt_noisy provider needs ground-truth normal maps")
        if provider == "external" and directory is None:
            raise ValueError("external provider needs a directory")
        self.provider = provider
        self.sigma_deg = sigma_deg
        self.seed = seed
        self.directory = directory
        # gt_normals: callable (view, frame) -> (normals, mask)
        self.gt_normals = gt_normals

    def __call__(self, request: NormalPriorRequest) -> np.ndarray:
        if self.provider == "identity":
            return request.n_surf
        if self.provider == "gt_noisy":
            gt, gt_mask = self.gt_normals(request.view, request.frame)
            return noisy_normals(gt, gt_mask, self.sigma_deg, self.seed, request.frame, request.view)
        return load_frame_image(Path(self.directory) / f"view{request.view:02d}", request.frame,
                                request.n_surf.shape)


def normal_prior(request: NormalPriorRequest, provider: str, **params) -> np.ndarray:
    return NormalPrior(provider, **params)(request)

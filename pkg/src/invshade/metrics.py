"""Evaluation of a fitted scene against synthetic ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .bvh import build_bvh
from .config import ExperimentConfig
from .fileio import read_pfm
from .geom import Pose
from .losses import angular_errors, channel_scales, metric_psnr, ssim, SSIM_WINDOW
from .raster import GBuffer
from .scene import SceneDataset, render_truth, sky_envmap
from .shade import LightProbeSphere, PBRRender, envmap_to_probes, visibility
from .deshade import NormalPriorRequest
from .stages import GeometryPass, SceneState, make_normal_prior, query_image


# ---------------------------------------------------------------------------
# temporal consistency


def temporal_consistency(normals, correspondences) -> float:
    """Mean per-channel L1 between corresponding normals of consecutive frames, times 1e3.

    ``normals`` is a sequence of F (H, W, 3) maps, expressed in a common frame
    (canonical space for moving objects). ``correspondences`` holds F - 1 maps of
    shape (H, W, 2): for every pixel of frame t, the (row, col) it occupies in
    frame t + 1, or -1 when it has no partner.
    """
    normals = [np.asarray(n, dtype=np.float64) for n in normals]
    correspondences = [np.asarray(c) for c in correspondences]
    if len(normals) < 1:
        raise ValueError("need at least one normal map")
    if len(correspondences) != len(normals) - 1:
        raise ValueError(f"{len(normals)} frames need {len(normals) - 1} correspondence maps, "
                         f"got {len(correspondences)}")
    shape = normals[0].shape
    if len(shape) != 3 or shape[2] != 3:
        raise ValueError(f"normal maps must be (H, W, 3), got {shape}")
    total, count = 0.0, 0
    for t, corr in enumerate(correspondences):
        a, b = normals[t], normals[t + 1]
        if a.shape != shape or b.shape != shape:
            raise ValueError(f"normal map {t + 1} has shape {b.shape}, expected {shape}")
        if corr.shape != shape[:2] + (2,) or not np.issubdtype(corr.dtype, np.integer):
            raise ValueError(f"correspondence map {t} must be integer (H, W, 2), got {corr.dtype} {corr.shape}")
        has = np.all(corr >= 0, axis=-1)
        if np.any((corr[..., 0] >= 0) != (corr[..., 1] >= 0)):
            raise ValueError(f"correspondence map {t} mixes valid and missing coordinates")
        rows, cols = corr[has, 0], corr[has, 1]
        if rows.size and (rows.max() >= shape[0] or cols.max() >= shape[1]):
            raise ValueError(f"correspondence map {t} points outside the image")
        total += float(np.abs(a[has] - b[rows, cols]).sum())
        count += 3 * int(has.sum())
    return 1e3 * total / count if count else 0.0


def pixel_rotations(gbuffer: GBuffer, skin_weights: np.ndarray | None, pose: Pose) -> np.ndarray:
    """Blend-skinned bone rotation at each masked pixel, (P, 3, 3)."""
    m = gbuffer.mask
    p = int(m.sum())
    if pose.bone_count == 0 or skin_weights is None:
        return np.tile(np.eye(3), (p, 1, 1))
    fid = gbuffer.triangle_id[m]
    corners = gbuffer.mesh.faces[fid]
    w = np.einsum("pk,pkj->pj", gbuffer.barycentrics[m], skin_weights[corners])
    r = np.einsum("pj,jab->pab", w, pose.rotations)
    # blended rotations are not orthonormal; project back
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def to_canonical(normals: np.ndarray, gbuffer: GBuffer, skin_weights, pose: Pose) -> np.ndarray:
    out = np.zeros_like(normals)
    m = gbuffer.mask
    r = pixel_rotations(gbuffer, skin_weights, pose)
    out[m] = np.einsum("pba,pb->pa", r, normals[m])
    return out


# ---------------------------------------------------------------------------
# relighting


def held_out_envmap(source: str) -> np.ndarray:
    if source == "sky":
        return sky_envmap()
    env = read_pfm(source)
    if env.ndim != 3 or env.shape[2] != 3:
        raise OSError(f"{source}: environment map must have 3 channels")
    return env.astype(np.float64)


@dataclass
class ViewRender:
    pred: np.ndarray
    target: np.ndarray
    mask: np.ndarray


def _predicted_render(state: SceneState, gp: GeometryPass, cfg: ExperimentConfig, probes: LightProbeSphere):
    gb = gp.gbuffer
    vis = visibility(gb.position, gb.mask, build_bvh(gp.posed), probes, cfg.optim.visibility_eps,
                     gp.posed.bbox_diagonal())
    a = query_image(state.albedo, gb, gp.frame)
    g = query_image(state.roughness, gb, gp.frame)[..., 0]
    return PBRRender(cfg.brdf).forward(gb, gp.maps.n_surf, a, g, probes, vis, gp.maps.x_surf)


def relight(state: SceneState, ds: SceneDataset, cfg: ExperimentConfig, passes=None) -> list[ViewRender]:
    env = held_out_envmap(cfg.eval.envmap)
    factor = 4 if ds.meta.get("mismatch") else 1
    pred_probes = envmap_to_probes(env, cfg.probes.n_lat, cfg.probes.n_lon)
    gt_probes = envmap_to_probes(env, 16 * factor, 32 * factor)
    out = []
    for key in ds.keys():
        gp = passes[key] if passes else GeometryPass(state, ds, *key, use_o2n=cfg.o2n, tau=cfg.optim.tau)
        v, f = key
        truth, _ = render_truth(ds.gt_mesh, ds.poses[f], ds.cameras[v], ds.gt_albedo_texture, gt_probes)
        pred = _predicted_render(state, gp, cfg, pred_probes)
        out.append(ViewRender(pred, truth.gt_rgb, gp.mask & truth.gt_mask))
    return out


# ---------------------------------------------------------------------------
# aggregate report


def _stack(images):
    return np.concatenate(images, axis=0)


def aligned_psnr(preds, targets, masks) -> tuple[np.ndarray, float, float]:
    """Channel scales fitted jointly over all views; returns (scales, aligned psnr, raw psnr)."""
    p, t, m = _stack(preds), _stack(targets), _stack(masks)
    s = channel_scales(p, t, m)
    return s, metric_psnr(p * s, t, m), metric_psnr(p, t, m)


def mean_ssim(preds, targets, masks) -> float:
    vals = [ssim(np.clip(p, 0, 1), np.clip(t, 0, 1), m) for p, t, m in zip(preds, targets, masks)
            if min(m.shape) >= SSIM_WINDOW]
    return float(np.mean(vals)) if vals else 1.0


def evaluate(state: SceneState, ds: SceneDataset, cfg: ExperimentConfig, ran_stages=()) -> dict:
    """All metrics that apply to the stages that ran."""
    passes = {key: GeometryPass(state, ds, *key, use_o2n=cfg.o2n, tau=cfg.optim.tau) for key in ds.keys()}
    report: dict = {}
    masks = {k: gp.mask & _gt_mask(ds, k) for k, gp in passes.items()}

    if any(img.gt_normal is not None for img in ds.images.values()):
        errs = [angular_errors(passes[k].maps.n_surf, ds.images[k].gt_normal, masks[k]) for k in ds.keys()]
        report["normal_degree"] = float(np.mean(np.concatenate(errs)))

    if ds.gt_albedo_texture is not None:
        preds = [query_image(state.albedo, passes[k].gbuffer, k[1]) for k in ds.keys()]
        targets = [ds.images[k].gt_albedo for k in ds.keys()]
        ms = [masks[k] for k in ds.keys()]
        s, psnr_a, psnr_raw = aligned_psnr(preds, targets, ms)
        report["albedo_psnr_aligned"] = psnr_a
        report["albedo_psnr_raw"] = psnr_raw
        report["albedo_scales"] = s.tolist()

    if 2 in ran_stages or 3 in ran_stages:
        preds, targets, ms = [], [], []
        for k, gp in passes.items():
            gb = gp.gbuffer
            a = query_image(state.albedo, gb, k[1])
            g = query_image(state.roughness, gb, k[1])[..., 0]
            vis = visibility(gb.position, gb.mask, build_bvh(gp.posed), state.probes, cfg.optim.visibility_eps,
                             gp.posed.bbox_diagonal())
            preds.append(PBRRender(cfg.brdf).forward(gb, gp.maps.n_surf, a, g, state.probes, vis, gp.maps.x_surf))
            targets.append(ds.images[k].gt_rgb)
            ms.append(masks[k])
        report["image_psnr"] = metric_psnr(_stack(preds), _stack(targets), _stack(ms))
        report["image_ssim"] = mean_ssim(preds, targets, ms)
        if ds.gt_mesh is not None:
            views = relight(state, ds, cfg, passes)
            s, psnr_a, psnr_raw = aligned_psnr([r.pred for r in views], [r.target for r in views],
                                               [r.mask for r in views])
            report["relight_psnr_aligned"] = psnr_a
            report["relight_psnr_raw"] = psnr_raw
            report["relight_scales"] = s.tolist()
            report["relight_ssim"] = mean_ssim([r.pred * s for r in views], [r.target for r in views],
                                               [r.mask for r in views])

    if ds.gt_mesh is not None:
        cd, p2s = geom.chamfer_and_p2s(state.deformed(), ds.gt_mesh, cfg.eval.chamfer_samples, cfg.seed)
        report["chamfer"] = cd
        report["p2s"] = p2s

    if ds.n_frames > 1:
        report.update(temporal_report(state, ds, cfg, passes))
    return report


def _gt_mask(ds: SceneDataset, key) -> np.ndarray:
    img = ds.images[key]
    return img.gt_mask if img.gt_mask is not None else np.ones(img.gt_rgb.shape[:2], dtype=bool)


def temporal_report(state: SceneState, ds: SceneDataset, cfg: ExperimentConfig, passes=None) -> dict:
    """Temporal L1 of the fitted normals and of the normal prior, per view, averaged."""
    if any(ds.images[(v, f)].gt_next is None for v in range(ds.n_views) for f in range(ds.n_frames - 1)):
        return {}
    prior = make_normal_prior(ds, cfg) if cfg.providers.normal_prior != "identity" else None
    if passes is None:
        passes = {key: GeometryPass(state, ds, *key, use_o2n=cfg.o2n, tau=cfg.optim.tau) for key in ds.keys()}
    masks = {key: gp.mask & _gt_mask(ds, key) for key, gp in passes.items()}
    fitted, noisy = [], []
    for v in range(ds.n_views):
        seq_fit, seq_prior, corr = [], [], []
        for f in range(ds.n_frames):
            key = (v, f)
            gp, m = passes[key], masks[key]
            n_fit = np.where(m[..., None], gp.maps.n_surf, 0.0)
            seq_fit.append(to_canonical(n_fit, gp.gbuffer, state.base.skin_weights, ds.poses[f]))
            if prior is not None:
                n_pr = prior(NormalPriorRequest(gp.maps.n_surf, ds.images[key].gt_rgb, m, f, v))
                seq_prior.append(to_canonical(np.where(m[..., None], n_pr, 0.0), gp.gbuffer,
                                              state.base.skin_weights, ds.poses[f]))
            if f < ds.n_frames - 1:
                # only pairs where both ends are covered in both the fit and the ground truth
                c = ds.images[key].gt_next.copy()
                c[~m] = -1
                rows, cols = np.maximum(c[..., 0], 0), np.maximum(c[..., 1], 0)
                c[~masks[(v, f + 1)][rows, cols]] = -1
                corr.append(c)
        fitted.append(temporal_consistency(seq_fit, corr))
        if prior is not None:
            noisy.append(temporal_consistency(seq_prior, corr))
    out = {"temporal_l1": float(np.mean(fitted))}
    if noisy:
        out["temporal_l1_prior"] = float(np.mean(noisy))
    return out

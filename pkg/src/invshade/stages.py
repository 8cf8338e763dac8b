"""The three optimization stages and the state they share.

Stage 1 fits geometry (vertex offsets and the per-pixel offset field) to a
normal prior and the color field to the input images. Stage 2 fits albedo,
roughness and light probes with geometry frozen. Stage 3 refines geometry,
roughness and probes jointly against images rendered with de-shaded albedo,
while pulling the albedo field toward that de-shaded target.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import geom
from .bvh import build_bvh
from .config import ExperimentConfig
from .deshade import DeshadeRequest, NormalPrior, NormalPriorRequest, deshade_analytic, deshade_external
from .fields import UVField, field_init, field_query, field_query_backward
from .fileio import encode_normals
from .geom import TriangleMesh
from .losses import loss_mse, loss_ssim, SSIM_WINDOW
from .o2n import NormalConversion, SurfaceMaps
from .optim import ParamSet, adam_step, clamp_projection
from .raster import GBuffer, rasterize, rasterize_backward
from .scene import SceneDataset
from .shade import PBRRender, LightProbeSphere, VisibilityBuffer, probe_sphere, visibility


class StageError(RuntimeError):
    def __init__(self, stage: int, view: int, frame: int, cause: Exception):
        super().__init__(f"stage {stage} failed at view {view}, frame {frame}: {cause}")
        self.stage, self.view, self.frame, self.cause = stage, view, frame, cause


# ---------------------------------------------------------------------------
# state


@dataclass
class SceneState:
    base: TriangleMesh
    params: ParamSet
    offset: UVField
    color: UVField
    albedo: UVField
    roughness: UVField
    probes: LightProbeSphere
    max_offset: float
    edge_target: np.ndarray
    laplacian: sp.csr_matrix
    iteration: int = 0

    @property
    def vertex_offsets(self) -> np.ndarray:
        return self.params["vertex_offsets"].value

    def deformed(self) -> TriangleMesh:
        return geom.apply_vertex_offsets(self.base, self.vertex_offsets)


def _field_params(params: ParamSet, name: str, f: UVField, lr: float):
    params.add(name, f.values, lr, clamp_projection(*f.clamp) if f.clamp else None)
    if f.residuals is not None:
        params.add(name + "_res", f.residuals, lr)


def init_state(ds: SceneDataset, cfg: ExperimentConfig) -> SceneState:
    fc, ic, oc = cfg.fields, cfg.init, cfg.optim
    base = ds.base_mesh
    frames = ds.n_frames if fc.per_frame_residuals else 0
    max_offset = fc.max_offset_frac * base.bbox_diagonal()
    offset = field_init((fc.offset_res, fc.offset_res), 1, 0.0, (-max_offset, max_offset), frames)
    color = field_init((fc.color_res, fc.color_res), 3, ic.color, (0.0, 1.0), frames)
    albedo = field_init((fc.albedo_res, fc.albedo_res), 3, ic.albedo, (0.0, 1.0), frames)
    roughness = field_init((fc.roughness_res, fc.roughness_res), 1, ic.roughness, (0.01, 1.0), frames)
    probes = probe_sphere(cfg.probes.n_lat, cfg.probes.n_lon, ic.probe_radiance)

    params = ParamSet()
    params.add("vertex_offsets", np.zeros(base.n_vertices), oc.lr_offset, clamp_projection(-max_offset, max_offset))
    _field_params(params, "offset", offset, oc.lr_offset_field)
    _field_params(params, "color", color, oc.lr_field)
    _field_params(params, "albedo", albedo, oc.lr_field)
    _field_params(params, "roughness", roughness, oc.lr_field)
    params.add("probes", probes.radiance, oc.lr_probe, clamp_projection(0.0, None))

    e = geom.unique_edges(base.faces)
    rest = np.linalg.norm(base.positions[e[:, 1]] - base.positions[e[:, 0]], axis=1)
    lap = geom.uniform_laplacian(base.n_vertices, base.faces)
    return SceneState(base, params, offset, color, albedo, roughness, probes, max_offset, rest, lap)


def field_grad_names(name: str, f: UVField) -> tuple[str, str | None]:
    return name, (name + "_res" if f.residuals is not None else None)


def _slot(f: UVField, frame: int) -> int:
    return frame if f.residuals is not None else 0


# ---------------------------------------------------------------------------
# geometry pass


class GeometryPass:
    """Deform, pose, rasterize and convert offsets to normals for one (view, frame)."""

    def __init__(self, state: SceneState, ds: SceneDataset, view: int, frame: int, use_o2n: bool = True,
                 tau: float = 0.03):
        self.state, self.ds, self.view, self.frame = state, ds, view, frame
        self.use_o2n = use_o2n
        self.nc = NormalConversion(tau)
        self.canonical = state.deformed()
        self.pose = ds.poses[frame]
        self.posed = geom.pose_mesh(self.canonical, self.pose)
        self.gbuffer = rasterize(self.posed, ds.cameras[view])
        if use_o2n:
            self.maps = self.nc.forward(self.gbuffer, state.offset, _slot(state.offset, frame))
        else:
            gb = self.gbuffer
            self.maps = SurfaceMaps(gb.position.copy(), gb.normal.copy(), gb.mask.copy())

    @property
    def mask(self) -> np.ndarray:
        return self.gbuffer.mask

    def backward(self, grad_n: np.ndarray, grad_x: np.ndarray | None = None) -> dict[str, np.ndarray]:
        st = self.state
        grads: dict[str, np.ndarray] = {}
        if self.use_o2n:
            out = self.nc.backward(grad_n, grad_x)
            vp, vn = out.vertex_positions, out.vertex_normals
            grads["offset"] = out.offset_values
            if out.offset_residuals is not None:
                grads["offset_res"] = out.offset_residuals
        else:
            vp, vn = rasterize_backward(self.gbuffer, grad_position=grad_x, grad_normal=grad_n)
        vp = vp + geom.vertex_normals_backward(self.posed.positions, self.posed.faces, vn)
        gc = geom.pose_backward(self.canonical, self.pose, vp)
        grads["vertex_offsets"] = geom.vertex_offsets_backward(st.base, gc)
        return grads


def _add(acc: dict[str, np.ndarray], more: dict[str, np.ndarray]):
    for k, v in more.items():
        acc[k] = acc[k] + v if k in acc else v


def regularizer_grads(state: SceneState, canonical: TriangleMesh, cfg: ExperimentConfig) -> tuple[float, dict]:
    w = cfg.weights
    if w.w_edge == 0 and w.w_normal == 0 and w.w_laplacian == 0:
        return 0.0, {}
    reg = geom.mesh_regularizers(canonical.positions, canonical.faces, state.edge_target, state.laplacian)
    loss, g = reg.weighted(w.w_edge, w.w_normal, w.w_laplacian)
    return loss, {"vertex_offsets": geom.vertex_offsets_backward(state.base, g)}


# ---------------------------------------------------------------------------
# losses


def image_loss(pred, target, mask, cfg: ExperimentConfig) -> tuple[float, np.ndarray]:
    """w_mse * MSE + w_ssim * (1 - SSIM) on [0, 1]-clamped linear images."""
    w = cfg.weights
    inside = (pred >= 0.0) & (pred <= 1.0)
    p = np.clip(pred, 0.0, 1.0)
    t = np.clip(target, 0.0, 1.0)
    m3 = mask[..., None] if p.ndim == 3 else mask
    p = np.where(m3, p, 0.0)
    t = np.where(m3, t, 0.0)
    value, grad = 0.0, np.zeros_like(p)
    if w.w_mse:
        lm, gm = loss_mse(p, t, mask)
        value += w.w_mse * lm
        grad += w.w_mse * gm
    if w.w_ssim and min(mask.shape) >= SSIM_WINDOW:
        ls, gs = loss_ssim(p, t, mask)
        value += w.w_ssim * ls
        grad += w.w_ssim * gs
    return value, np.where(inside & m3, grad, 0.0)


def normal_loss(n_pred, n_target, mask, cfg: ExperimentConfig) -> tuple[float, np.ndarray]:
    """MSE on raw normals plus SSIM on their (n + 1) / 2 encoding."""
    w = cfg.weights
    m3 = mask[..., None]
    value, grad = 0.0, np.zeros_like(n_pred)
    if w.w_mse:
        lm, gm = loss_mse(np.where(m3, n_pred, 0.0), np.where(m3, n_target, 0.0), mask)
        value += w.w_mse * lm
        grad += w.w_mse * gm
    if w.w_ssim and min(mask.shape) >= SSIM_WINDOW:
        ls, gs = loss_ssim(encode_normals(n_pred, mask), encode_normals(n_target, mask), mask)
        value += w.w_ssim * ls
        grad += w.w_ssim * 0.5 * gs
    return value, np.where(m3, grad, 0.0)


def query_image(f: UVField, gb: GBuffer, frame: int, mask: np.ndarray | None = None) -> np.ndarray:
    mask = gb.mask if mask is None else mask
    out = np.zeros(mask.shape + (f.channels,))
    if mask.any():
        out[mask] = field_query(f, gb.uv[mask], _slot(f, frame))
    return out


def query_backward(name: str, f: UVField, gb: GBuffer, frame: int, grad_img: np.ndarray,
                   mask: np.ndarray | None = None) -> dict[str, np.ndarray]:
    mask = gb.mask if mask is None else mask
    g = grad_img.reshape(mask.shape + (f.channels,))
    gv, gr = field_query_backward(f, gb.uv[mask], _slot(f, frame), g[mask])
    out = {name: gv}
    if gr is not None:
        out[name + "_res"] = gr
    return out


# ---------------------------------------------------------------------------
# logging


@dataclass
class EpochLog:
    records: list[dict] = field(default_factory=list)
    sink: Callable[[dict], None] | None = None

    def add(self, record: dict):
        self.records.append(record)
        if self.sink is not None:
            self.sink(record)


class _Meter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.n = 0

    def add(self, **terms):
        for k, v in terms.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)

    def step(self):
        self.n += 1

    def mean(self) -> dict[str, float]:
        return {k: v / max(self.n, 1) for k, v in self.sums.items()}


# ---------------------------------------------------------------------------
# providers


def make_normal_prior(ds: SceneDataset, cfg: ExperimentConfig) -> NormalPrior:
    pc = cfg.providers

    def gt_normals(view, frame):
        img = ds.images[(view, frame)]
        if img.gt_normal is None:
            raise ValueError("dataset has no ground-truth normals")
        return img.gt_normal, img.gt_mask

    return NormalPrior(pc.normal_prior, pc.sigma_deg, pc.seed, pc.normal_dir,
                       gt_normals if pc.normal_prior == "gt_noisy" else None)


def _gt_mask(ds: SceneDataset, view: int, frame: int) -> np.ndarray:
    img = ds.images[(view, frame)]
    if img.gt_mask is not None:
        return img.gt_mask
    return np.ones(img.gt_rgb.shape[:2], dtype=bool)


class PriorCache:
    """N_enhance targets per (view, frame), re-queried every ``refresh`` epochs.

    During the first ``warmup`` epochs the provider is conditioned on the input
    image instead of the color field.
    """

    def __init__(self, prior: NormalPrior, refresh: int, warmup: int):
        self.prior, self.refresh, self.warmup = prior, max(int(refresh), 1), warmup
        self.entries: dict[tuple[int, int], tuple[int, np.ndarray]] = {}

    def target(self, key, epoch: int, n_surf, gt_rgb, i_rgb, mask) -> np.ndarray:
        entry = self.entries.get(key)
        if entry is None or epoch - entry[0] >= self.refresh:
            cond = gt_rgb if epoch < self.warmup else i_rgb
            view, frame = key
            entry = (epoch, self.prior(NormalPriorRequest(n_surf, cond, mask, frame, view)))
            self.entries[key] = entry
        return entry[1]


# ---------------------------------------------------------------------------
# stage 1


def stage1(state: SceneState, ds: SceneDataset, cfg: ExperimentConfig, epochs: int | None = None,
           log: EpochLog | None = None) -> EpochLog:
    epochs = cfg.epochs.stage1 if epochs is None else epochs
    log = log or EpochLog()
    priors = PriorCache(make_normal_prior(ds, cfg), cfg.optim.prior_refresh, cfg.optim.warmup_epochs)
    state.params.only("vertex_offsets", "offset", "offset_res", "color", "color_res")
    for epoch in range(epochs):
        t0 = time.perf_counter()
        meter = _Meter()
        for view, frame in ds.keys():
            try:
                gp = GeometryPass(state, ds, view, frame, cfg.o2n, cfg.optim.tau)
                gb = gp.gbuffer
                img = ds.images[(view, frame)]
                mask = gb.mask & _gt_mask(ds, view, frame)
                i_rgb = query_image(state.color, gb, frame)
                n_enh = priors.target((view, frame), epoch, gp.maps.n_surf, img.gt_rgb, i_rgb, mask)
                ln, gn = normal_loss(gp.maps.n_surf, n_enh, mask, cfg)
                grads = gp.backward(gn)
                lc, gcol = image_loss(i_rgb, img.gt_rgb, mask, cfg)
                _add(grads, query_backward("color", state.color, gb, frame, gcol))
                lr_, greg = regularizer_grads(state, gp.canonical, cfg)
                _add(grads, greg)
                adam_step(state.params, grads)
            except (OSError, ValueError) as exc:
                raise StageError(1, view, frame, exc) from exc
            state.iteration += 1
            meter.add(normal=ln, color=lc, mesh=lr_)
            meter.step()
        log.add({"stage": 1, "epoch": epoch, **meter.mean(), "seconds": time.perf_counter() - t0})
    return log


# ---------------------------------------------------------------------------
# stages 2 and 3


class VisibilityCache:
    """Per-(view, frame) visibility maps, refilled for pixels that appear and refreshed on a cadence."""

    def __init__(self, probes: LightProbeSphere, eps_scale: float):
        self.probes = probes
        self.eps_scale = eps_scale
        self.maps: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, int]] = {}

    def get(self, key, gp: GeometryPass, iteration: int, every: int | None) -> VisibilityBuffer:
        mask = gp.mask
        nd = len(self.probes.directions)
        entry = self.maps.get(key)
        stale = entry is None or (every is not None and iteration - entry[2] >= every)
        if stale:
            bits = np.zeros(mask.shape + (nd,), dtype=bool)
            have = np.zeros(mask.shape, dtype=bool)
            stamp = iteration
        else:
            bits, have, stamp = entry
        need = mask & ~have
        if need.any():
            # rays leave from the rasterized surface; offset points may sit just below it
            vb = visibility(gp.gbuffer.position, need, build_bvh(gp.posed), self.probes, self.eps_scale,
                            gp.posed.bbox_diagonal())
            bits[need] = vb.bits
            have = have | need
        self.maps[key] = (bits, have, stamp)
        return VisibilityBuffer(bits[mask], mask.copy())


def _render(state: SceneState, gp: GeometryPass, cfg: ExperimentConfig, albedo_img, rough_img,
            vis: VisibilityBuffer) -> tuple[PBRRender, np.ndarray]:
    r = PBRRender(cfg.brdf)
    img = r.forward(gp.gbuffer, gp.maps.n_surf, albedo_img, rough_img, state.probes, vis, gp.maps.x_surf)
    return r, img


def stage2(state: SceneState, ds: SceneDataset, cfg: ExperimentConfig, epochs: int | None = None,
           log: EpochLog | None = None) -> EpochLog:
    epochs = cfg.epochs.stage2 if epochs is None else epochs
    log = log or EpochLog()
    trainable = ["albedo", "albedo_res", "probes"]
    if cfg.optim.train_roughness:
        trainable += ["roughness", "roughness_res"]
    state.params.only(*trainable)
    geometry = {key: GeometryPass(state, ds, *key, use_o2n=cfg.o2n, tau=cfg.optim.tau) for key in ds.keys()}
    vcache = VisibilityCache(state.probes, cfg.optim.visibility_eps)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        meter = _Meter()
        for view, frame in ds.keys():
            try:
                gp = geometry[(view, frame)]
                gb = gp.gbuffer
                mask = gb.mask & _gt_mask(ds, view, frame)
                vis = vcache.get((view, frame), gp, state.iteration, None)
                a_img = query_image(state.albedo, gb, frame)
                g_img = query_image(state.roughness, gb, frame)[..., 0]
                r, pred = _render(state, gp, cfg, a_img, g_img, vis)
                li, gi = image_loss(pred, ds.images[(view, frame)].gt_rgb, mask, cfg)
                rg = r.backward(gi)
                grads = {"probes": rg.radiance}
                _add(grads, query_backward("albedo", state.albedo, gb, frame, rg.albedo))
                if cfg.optim.train_roughness:
                    _add(grads, query_backward("roughness", state.roughness, gb, frame, rg.roughness))
                adam_step(state.params, grads)
            except (OSError, ValueError) as exc:
                raise StageError(2, view, frame, exc) from exc
            state.iteration += 1
            meter.add(image=li)
            meter.step()
        log.add({"stage": 2, "epoch": epoch, **meter.mean(), "seconds": time.perf_counter() - t0})
    return log


def deshade(state: SceneState, gp: GeometryPass, vis: VisibilityBuffer, albedo_shaded: np.ndarray, mask, frame,
            cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    pc = cfg.providers
    req = DeshadeRequest(albedo_shaded, gp.maps.n_surf, mask, frame)
    if pc.deshade == "identity":
        return albedo_shaded.copy(), mask.copy()
    if pc.deshade == "analytic":
        return deshade_analytic(req, state.probes, vis, gp.gbuffer, pc.s_floor)
    if pc.deshade == "external":
        from pathlib import Path
        out = deshade_external(req, Path(pc.deshade_dir) / f"view{gp.view:02d}")
        return out, mask.copy()
    raise ValueError(f"unknown de-shading provider {pc.deshade!r}")


def stage3(state: SceneState, ds: SceneDataset, cfg: ExperimentConfig, epochs: int | None = None,
           log: EpochLog | None = None) -> EpochLog:
    epochs = cfg.epochs.stage3 if epochs is None else epochs
    log = log or EpochLog()
    trainable = ["vertex_offsets", "offset", "offset_res", "albedo", "albedo_res", "probes"]
    if cfg.optim.train_roughness:
        trainable += ["roughness", "roughness_res"]
    state.params.only(*trainable)
    vcache = VisibilityCache(state.probes, cfg.optim.visibility_eps)
    w_prior = cfg.weights.w_albedo_prior
    # the color field is frozen, so the prior is always conditioned on it (no warmup here)
    priors = PriorCache(make_normal_prior(ds, cfg), cfg.optim.prior_refresh, 0) if cfg.optim.stage3_normal_prior \
        else None
    for epoch in range(epochs):
        t0 = time.perf_counter()
        meter = _Meter()
        for view, frame in ds.keys():
            try:
                gp = GeometryPass(state, ds, view, frame, cfg.o2n, cfg.optim.tau)
                gb = gp.gbuffer
                mask = gb.mask & _gt_mask(ds, view, frame)
                vis = vcache.get((view, frame), gp, state.iteration, cfg.optim.k_vis)
                a_img = query_image(state.albedo, gb, frame)
                g_img = query_image(state.roughness, gb, frame)[..., 0]
                if cfg.providers.deshade_input == "color":
                    shaded = query_image(state.color, gb, frame)
                else:
                    shaded = a_img
                a_hat, conf = deshade(state, gp, vis, shaded, mask, frame, cfg)
                conf = conf & mask
                # pull albedo toward its de-shaded version on confident pixels
                la, ga = image_loss(a_img, a_hat, conf, cfg)
                grads = query_backward("albedo", state.albedo, gb, frame, w_prior * ga)
                # render with the de-shaded albedo held fixed
                r, pred = _render(state, gp, cfg, a_hat, g_img, vis)
                li, gi = image_loss(pred, ds.images[(view, frame)].gt_rgb, mask, cfg)
                rg = r.backward(gi)
                _add(grads, {"probes": rg.radiance})
                if cfg.optim.train_roughness:
                    _add(grads, query_backward("roughness", state.roughness, gb, frame, rg.roughness))
                g_normal = rg.normal
                ln = 0.0
                if priors is not None:
                    i_rgb = query_image(state.color, gb, frame)
                    n_enh = priors.target((view, frame), epoch, gp.maps.n_surf, None, i_rgb, mask)
                    ln, gn = normal_loss(gp.maps.n_surf, n_enh, mask, cfg)
                    g_normal = g_normal + gn
                _add(grads, gp.backward(g_normal))
                lr_, greg = regularizer_grads(state, gp.canonical, cfg)
                _add(grads, greg)
                adam_step(state.params, grads)
            except (OSError, ValueError) as exc:
                raise StageError(3, view, frame, exc) from exc
            state.iteration += 1
            meter.add(image=li, albedo_prior=la, normal=ln, mesh=lr_, confident=conf.sum() / max(mask.sum(), 1))
            meter.step()
        log.add({"stage": 3, "epoch": epoch, **meter.mean(), "seconds": time.perf_counter() - t0})
    return log

"""Experiment runner: dataset, stages, checkpoints, metrics and the report."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from . import fileio
from .config import ExperimentConfig, config_hash, config_to_dict, parse_config
from .metrics import evaluate
from .scene import SceneDataset, load_dataset, save_dataset, synthesize_scene
from .stages import EpochLog, GeometryPass, SceneState, init_state, query_image, stage1, stage2, stage3

STAGES = {1: stage1, 2: stage2, 3: stage3}
FIELD_NAMES = ("offset", "color", "albedo", "roughness")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: SceneState, directory, stage: int, cfg: ExperimentConfig):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in FIELD_NAMES:
        fileio.write_field(d / f"{name}.field", getattr(state, name))
    fileio.write_pfm(d / "probes.pfm", state.probes.radiance)
    np.savetxt(d / "probes_f64.txt", state.probes.radiance.reshape(-1, 3), fmt="%.17g")
    np.savetxt(d / "vertex_offsets.txt", state.vertex_offsets, fmt="%.17g")
    fileio.write_json(d / "manifest.json", {"stage": stage, "step": state.iteration,
                                            "config_hash": config_hash(cfg)})


def load_checkpoint(state: SceneState, directory) -> dict:
    """Restore parameter values in place; returns the manifest."""
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise OSError(f"{d}: no manifest.json")
    manifest = fileio.read_json(d / "manifest.json")
    for name in FIELD_NAMES:
        loaded = fileio.read_field(d / f"{name}.field")
        target = getattr(state, name)
        if loaded.values.shape != target.values.shape:
            raise OSError(f"{d / name}.field: grid {loaded.values.shape} does not match {target.values.shape}")
        target.values[...] = loaded.values
        if target.residuals is not None:
            if loaded.residuals is None or loaded.residuals.shape != target.residuals.shape:
                raise OSError(f"{d / name}.field: residual grids do not match the configuration")
            target.residuals[...] = loaded.residuals
    probes = np.loadtxt(d / "probes_f64.txt", ndmin=2)
    if probes.size != state.probes.radiance.size:
        raise OSError(f"{d}/probes_f64.txt: {probes.size} values, expected {state.probes.radiance.size}")
    state.probes.radiance[...] = probes.reshape(state.probes.radiance.shape)
    offsets = np.loadtxt(d / "vertex_offsets.txt", ndmin=1)
    if offsets.shape != state.vertex_offsets.shape:
        raise OSError(f"{d}/vertex_offsets.txt: {offsets.shape[0]} values, expected {state.vertex_offsets.shape[0]}")
    state.vertex_offsets[...] = offsets
    state.iteration = int(manifest.get("step", 0))
    return manifest


# ---------------------------------------------------------------------------
# datasets


def obtain_dataset(cfg: ExperimentConfig) -> SceneDataset:
    if cfg.scene.path:
        return load_dataset(cfg.scene.path)
    return synthesize_scene(cfg.scene, cfg.seed)


def dataset_statistics(ds: SceneDataset) -> dict:
    masks = [img.gt_mask if img.gt_mask is not None else np.ones(img.gt_rgb.shape[:2], bool)
             for img in ds.images.values()]
    rgb = np.concatenate([img.gt_rgb[m] for img, m in zip(ds.images.values(), masks)])
    return {
        "views": ds.n_views,
        "frames": ds.n_frames,
        "resolution": [ds.cameras[0].width, ds.cameras[0].height],
        "mask_pixels": int(sum(int(m.sum()) for m in masks)),
        "rgb_mean": rgb.mean(axis=0).tolist() if len(rgb) else [0.0, 0.0, 0.0],
        "base_vertices": ds.base_mesh.n_vertices,
        "base_faces": len(ds.base_mesh.faces),
        "recipe": ds.meta.get("recipe"),
        "seed": ds.meta.get("seed"),
    }


# ---------------------------------------------------------------------------
# previews


def write_previews(state: SceneState, ds: SceneDataset, cfg: ExperimentConfig, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for v, f in ds.keys():
        gp = GeometryPass(state, ds, v, f, cfg.o2n, cfg.optim.tau)
        gb = gp.gbuffer
        tag = f"view{v:02d}_{f:06d}"
        fileio.write_normal_png(d / f"normal_{tag}.png", gp.maps.n_surf, gb.mask)
        fileio.write_png(d / f"albedo_{tag}.png", query_image(state.albedo, gb, f))
        fileio.write_png(d / f"color_{tag}.png", query_image(state.color, gb, f))


# ---------------------------------------------------------------------------
# run


def _ordered_stages(stages) -> list[int]:
    out = list(stages)
    if len(set(out)) != len(out) or out != sorted(out):
        raise ValueError(f"stages must be increasing without repeats, got {out}")
    return out


def run_experiment(cfg: ExperimentConfig | dict, dataset: SceneDataset | None = None) -> dict:
    """Run the configured stages and write ``report.json`` under ``cfg.output_dir``.

    Returns the report. Wall-clock timings are kept under ``timings`` so that
    everything under ``metrics`` is reproducible bit for bit.
    """
    if isinstance(cfg, dict):
        cfg = parse_config(cfg)
    order = _ordered_stages(cfg.stages)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_json(out / "config.json", config_to_dict(cfg))
    log_path = out / "log.jsonl"
    log_path.write_text("")

    t0 = time.perf_counter()
    ds = obtain_dataset(cfg) if dataset is None else dataset
    if not cfg.scene.path and dataset is None:
        # work from the archived copy so a restored run sees exactly the same float32 images
        save_dataset(ds, out / "dataset")
        ds = load_dataset(out / "dataset")
    timings = {"dataset": time.perf_counter() - t0}

    state = init_state(ds, cfg)
    log = EpochLog(sink=lambda rec: fileio.append_jsonl(log_path, rec))
    history = {}
    for s in order:
        t0 = time.perf_counter()
        STAGES[s](state, ds, cfg, log=log)
        timings[f"stage{s}"] = time.perf_counter() - t0
        save_checkpoint(state, out / "checkpoints" / f"stage{s}", s, cfg)
        history[f"stage{s}"] = evaluate(state, ds, cfg, order[:order.index(s) + 1])

    t0 = time.perf_counter()
    final = history[f"stage{order[-1]}"] if order else evaluate(state, ds, cfg, [])
    timings["evaluation"] = time.perf_counter() - t0
    if cfg.eval.previews:
        write_previews(state, ds, cfg, out / "previews")

    report = {
        "config_hash": config_hash(cfg),
        "stages": order,
        "dataset": dataset_statistics(ds),
        "metrics": final,
        "per_stage": history,
        "timings": timings,
    }
    fileio.write_json(out / "report.json", report)
    return report


def restore_run(run_dir) -> tuple[ExperimentConfig, SceneDataset, SceneState, dict]:
    """Reload a finished run: its config, dataset and the last checkpoint."""
    run = Path(run_dir)
    if not (run / "config.json").exists():
        raise OSError(f"{run}: no config.json")
    cfg = parse_config(fileio.read_json(run / "config.json"))
    ds = load_dataset(cfg.scene.path if cfg.scene.path else run / "dataset")
    state = init_state(ds, cfg)
    manifest = {}
    if cfg.stages:
        manifest = load_checkpoint(state, run / "checkpoints" / f"stage{max(cfg.stages)}")
        if manifest.get("config_hash") != config_hash(cfg):
            raise OSError(f"{run}: checkpoint was written by a different configuration")
    return cfg, ds, state, manifest

"""Experiment configuration: nested dataclasses, a generated JSON schema and strict parsing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    recipe: str = "sphere_boxes"  # bumpy_plane | sphere_boxes | rotating_object | clothed_template
    path: str | None = None  # existing dataset directory; synthesized when None
    resolution: int = 64
    views: int = 4
    frames: int = 1
    elevation_deg: float = 20.0
    fov_deg: float = 40.0
    n_lights: int = 26
    light_power: float | None = None  # None: scaled so the brightest shading is shading_peak
    shading_peak: float = 0.95
    displacement: float = 1.0  # multiplier on the recipe's detail amplitude
    rotation_step_deg: float = 4.0  # per-frame rotation for rotating_object
    mismatch: bool = False  # ground truth rendered with a 4x finer probe grid
    seed: int = 0


@dataclass
class LossWeights:
    w_mse: float = 1.0
    w_ssim: float = 0.2
    w_edge: float = 1.0
    w_normal: float = 0.01
    w_laplacian: float = 0.1
    w_albedo_prior: float = 1.0


@dataclass
class FieldConfig:
    offset_res: int = 256
    color_res: int = 512
    albedo_res: int = 512
    roughness_res: int = 128
    per_frame_residuals: bool = False
    max_offset_frac: float = 0.05  # of the base mesh bounding-box diagonal


@dataclass
class InitConfig:
    albedo: float = 0.5
    roughness: float = 0.01
    color: float = 0.5
    probe_radiance: float = 0.15


@dataclass
class ProbeConfig:
    n_lat: int = 16
    n_lon: int = 32


@dataclass
class ProviderConfig:
    normal_prior: str = "gt_noisy"  # identity | gt_noisy | external
    sigma_deg: float = 5.0
    normal_dir: str | None = None
    deshade: str = "analytic"  # identity | analytic | external
    deshade_dir: str | None = None
    deshade_input: str = "albedo"  # albedo: the albedo field itself | color: the color field (carries full shading)
    s_floor: float = 0.05
    seed: int = 0


@dataclass
class OptimConfig:
    lr_field: float = 1e-2
    lr_probe: float = 1e-2
    lr_offset: float = 1e-3  # vertex offsets, scene units
    lr_offset_field: float = 1e-3  # offset field, scene units like the vertex offsets
    warmup_epochs: int = 2
    prior_refresh: int = 1
    k_vis: int = 10
    train_roughness: bool = True
    stage3_normal_prior: bool = True  # keep the stage-1 normal loss on geometry during joint refinement
    tau: float = 0.03
    visibility_eps: float = 1e-4


@dataclass
class EpochConfig:
    stage1: int = 200
    stage2: int = 100
    stage3: int = 100


@dataclass
class EvalConfig:
    envmap: str = "sky"  # held-out lighting for relighting: sky | path to an (H, W, 3) PFM
    chamfer_samples: int = 20000
    previews: bool = True


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    stages: list[int] = field(default_factory=lambda: [1, 2, 3])
    brdf: str = "literal"  # literal | microfacet
    o2n: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    fields: FieldConfig = field(default_factory=FieldConfig)
    init: InitConfig = field(default_factory=InitConfig)
    probes: ProbeConfig = field(default_factory=ProbeConfig)
    providers: ProviderConfig = field(default_factory=ProviderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: EpochConfig = field(default_factory=EpochConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs/default"


ENUMS = {
    ("scene", "recipe"): ["bumpy_plane", "sphere_boxes", "rotating_object", "clothed_template"],
    ("brdf",): ["literal", "microfacet"],
    ("providers", "normal_prior"): ["identity", "gt_noisy", "external"],
    ("providers", "deshade"): ["identity", "analytic", "external"],
    ("providers", "deshade_input"): ["albedo", "color"],
}
NONNEGATIVE = {"weights"}


def _schema_for(tp, path: tuple[str, ...]) -> dict:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        hints = typing.get_type_hints(tp)
        props = {f.name: _schema_for(hints[f.name], path + (f.name,)) for f in dataclasses.fields(tp)}
        if path and path[-1] in NONNEGATIVE:
            for p in props.values():
                p["minimum"] = 0
        return {"type": "object", "properties": props, "additionalProperties": False}
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        subs = [_schema_for(a, path) for a in args]
        return {"anyOf": subs}
    if origin is list:
        return {"type": "array", "items": _schema_for(args[0], path)}
    if tp is type(None):
        return {"type": "null"}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        if path in ENUMS:
            return {"type": "string", "enum": ENUMS[path]}
        return {"type": "string"}
    raise TypeError(f"no schema mapping for {tp!r}")


def config_schema() -> dict:
    schema = _schema_for(ExperimentConfig, ())
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "ExperimentConfig"
    schema["properties"]["stages"]["items"]["enum"] = [1, 2, 3]
    return schema


def _build(tp, data):
    if dataclasses.is_dataclass(tp):
        hints = typing.get_type_hints(tp)
        kwargs = {k: _build(hints[k], v) for k, v in data.items()}
        return tp(**kwargs)
    if isinstance(data, int) and not isinstance(data, bool) and tp in (float, float | None):
        return float(data)
    return data


def _error_message(err: jsonschema.ValidationError) -> str:
    where = ".".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        unknown = sorted(set(err.instance) - allowed)
        return f"unknown key(s) at {where}: {', '.join(unknown)}"
    return f"invalid value at {where}: {err.message}"


def parse_config(data: dict) -> ExperimentConfig:
    """Validate against the schema and build the dataclass tree. Raises ConfigError."""
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(_error_message(e) for e in errors))
    return _build(ExperimentConfig, data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(data)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _coerce(raw)
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]

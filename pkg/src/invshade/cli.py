"""Command-line entry point: ``invshade <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


from . import fileio
from .config import ConfigError, apply_overrides, config_schema, config_to_dict, parse_config
from .stages import StageError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO, EXIT_THRESHOLD = 0, 1, 2, 3, 4

# report --check thresholds: metric -> (comparison, bound)
THRESHOLDS = {
    "normal_degree": ("<=", 5.0),
    "albedo_psnr_aligned": (">=", 30.0),
    "relight_psnr_aligned": (">=", 30.0),
}


def _load_config(args):
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from None
    data = apply_overrides(data, args.set or [])
    if getattr(args, "out", None):
        data["output_dir"] = args.out
    return parse_config(data)


def _add_config_flags(p):
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. --set epochs.stage1=50 (repeatable)")


def cmd_synth(args) -> int:
    from .scene import save_dataset, synthesize_scene
    cfg = _load_config(args)
    ds = synthesize_scene(cfg.scene, cfg.seed)
    target = Path(args.out or cfg.scene.path or Path(cfg.output_dir) / "dataset")
    save_dataset(ds, target)
    print(f"wrote {ds.n_views} views x {ds.n_frames} frames to {target}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .runner import run_experiment
    cfg = _load_config(args)
    report = run_experiment(cfg)
    print(json.dumps(report["metrics"], indent=2, sort_keys=True))
    print(f"report: {Path(cfg.output_dir) / 'report.json'}")
    return EXIT_OK


def _render_views(run_dir, probes, out_dir, stem):
    from .bvh import build_bvh
    from .runner import restore_run
    from .shade import PBRRender, visibility
    from .stages import GeometryPass, query_image
    cfg, ds, state, _ = restore_run(run_dir)
    probes = state.probes if probes is None else probes
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v, f in ds.keys():
        gp = GeometryPass(state, ds, v, f, cfg.o2n, cfg.optim.tau)
        gb = gp.gbuffer
        vis = visibility(gb.position, gb.mask, build_bvh(gp.posed), probes, cfg.optim.visibility_eps,
                         gp.posed.bbox_diagonal())
        img = PBRRender(cfg.brdf).forward(gb, gp.maps.n_surf, query_image(state.albedo, gb, f),
                                          query_image(state.roughness, gb, f)[..., 0], probes, vis,
                                          gp.maps.x_surf)
        fileio.write_pfm(out / f"{stem}_view{v:02d}_{f:06d}.pfm", img)
        fileio.write_png(out / f"{stem}_view{v:02d}_{f:06d}.png", img)
    print(f"wrote {len(ds.keys())} renders to {out}")


def cmd_render(args) -> int:
    _render_views(args.run, None, args.out or Path(args.run) / "renders", "render")
    return EXIT_OK


def cmd_relight(args) -> int:
    from .metrics import held_out_envmap
    from .shade import envmap_to_probes
    probes = envmap_to_probes(held_out_envmap(args.envmap), args.n_lat, args.n_lon)
    _render_views(args.run, probes, args.out or Path(args.run) / "relit", "relit")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import evaluate
    from .runner import restore_run
    cfg, ds, state, _ = restore_run(args.run)
    print(json.dumps(evaluate(state, ds, cfg, cfg.stages), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck, registered_ops
    ops = args.op or registered_ops()
    failed = 0
    for op in ops:
        worst = max((gradcheck(op, seed) for seed in range(args.seeds)), key=lambda r: r["max_rel_err"])
        ok = worst["max_rel_err"] <= worst["tolerance"]
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {op:32s} max rel err {worst['max_rel_err']:.2e} "
              f"(tol {worst['tolerance']:.0e}, {args.seeds} seeds)")
    return EXIT_THRESHOLD if failed else EXIT_OK


def check_report(report: dict, thresholds=THRESHOLDS) -> list[str]:
    """Messages for every threshold the report misses (or lacks)."""
    metrics = report.get("metrics", {})
    problems = []
    for name, (op, bound) in thresholds.items():
        if name not in metrics:
            problems.append(f"{name}: missing")
            continue
        value = metrics[name]
        ok = value <= bound if op == "<=" else value >= bound
        if not ok:
            problems.append(f"{name}: {value:.4g} not {op} {bound}")
    return problems


def cmd_report(args) -> int:
    path = Path(args.run) / "report.json"
    if not path.exists():
        raise OSError(f"{path}: no report")
    report = fileio.read_json(path)
    print(json.dumps(report["metrics"], indent=2, sort_keys=True))
    if args.check:
        problems = check_report(report)
        for p in problems:
            print(f"threshold: {p}", file=sys.stderr)
        return EXIT_THRESHOLD if problems else EXIT_OK
    return EXIT_OK


def cmd_schema(args) -> int:
    text = json.dumps(config_schema(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_config(args) -> int:
    print(json.dumps(config_to_dict(_load_config(args)), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invshade", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", help="dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="run the configured stages and write a report")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render a finished run under its learned probes")
    p.add_argument("run")
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("relight", help="render a finished run under another environment map")
    p.add_argument("run")
    p.add_argument("--envmap", default="sky", help="'sky' or an equirectangular PFM")
    p.add_argument("--n-lat", type=int, default=16)
    p.add_argument("--n-lon", type=int, default=32)
    p.add_argument("--out")
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("metrics", help="recompute metrics from a run's last checkpoint")
    p.add_argument("run")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered adjoint")
    p.add_argument("--op", action="append", help="restrict to this op (repeatable)")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="print a run's metrics; --check applies acceptance thresholds")
    p.add_argument("run")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("schema", help="print the configuration JSON schema")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schema)

    p = sub.add_parser("config", help="print the resolved configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc.cause, OSError) else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

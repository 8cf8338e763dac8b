"""Ablation orderings: O2N on/off, stage 3 vs stage 2, fitted vs prior temporal L1,
and the shading-baked initialization.

    python scripts/ablations.py --out runs/ablations [--only o2n]
"""

import argparse
import json
from pathlib import Path

from invshade.runner import run_experiment


def o2n(out: Path) -> dict:
    res = {}
    for flag in (True, False):
        doc = {"scene": {"recipe": "bumpy_plane"}, "stages": [1], "o2n": flag, "output_dir": str(out / f"o2n_{flag}"),
               "eval": {"previews": False}}
        res[f"o2n_{'on' if flag else 'off'}"] = run_experiment(doc)["metrics"]["normal_degree"]
    return res


def deshading(out: Path) -> dict:
    per = run_experiment({"output_dir": str(out / "standard"), "eval": {"previews": False}})["per_stage"]
    return {s: {k: per[s][k] for k in ("normal_degree", "albedo_psnr_aligned", "relight_psnr_aligned")}
            for s in per}


def baked(out: Path) -> dict:
    doc = {"init": {"probe_radiance": 0.02, "albedo": 0.9}, "output_dir": str(out / "baked"),
           "eval": {"previews": False}}
    per = run_experiment(doc)["per_stage"]
    return {s: per[s]["albedo_psnr_aligned"] for s in per}


def temporal(out: Path) -> dict:
    doc = {"scene": {"recipe": "rotating_object", "views": 2, "frames": 4}, "stages": [1],
           "epochs": {"stage1": 100}, "output_dir": str(out / "temporal"), "eval": {"previews": False}}
    m = run_experiment(doc)["metrics"]
    return {"fitted": m["temporal_l1"], "prior": m["temporal_l1_prior"]}


STUDIES = {"o2n": o2n, "deshading": deshading, "baked": baked, "temporal": temporal}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--only", choices=sorted(STUDIES), action="append")
    args = ap.parse_args()
    for name in args.only or STUDIES:
        print(name, json.dumps(STUDIES[name](Path(args.out)), indent=1), flush=True)


if __name__ == "__main__":
    main()

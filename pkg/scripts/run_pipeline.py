"""Full three-stage run on a synthetic scene, printing metrics after every stage.

    python scripts/run_pipeline.py --recipe sphere_boxes --out runs/pipeline --set epochs.stage3=50
"""

import argparse
import json

from invshade.config import apply_overrides, parse_config
from invshade.runner import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--recipe", default="sphere_boxes")
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    doc = apply_overrides({"scene": {"recipe": args.recipe}, "output_dir": args.out}, args.set)
    report = run_experiment(parse_config(doc))
    for stage, metrics in report["per_stage"].items():
        keep = {k: round(v, 4) for k, v in metrics.items() if isinstance(v, float)}
        print(stage, json.dumps(keep))
    print("seconds", {k: round(v, 1) for k, v in report["timings"].items()})


if __name__ == "__main__":
    main()

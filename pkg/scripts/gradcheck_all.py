"""Finite-difference check of every registered adjoint over many seeds; prints the worst case per op."""

import argparse
import time

from invshade.gradcheck import gradcheck, registered_ops


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--op", action="append")
    args = ap.parse_args()
    t0 = time.perf_counter()
    bad = 0
    for op in args.op or registered_ops():
        reports = [gradcheck(op, s) for s in range(args.seeds)]
        worst = max(reports, key=lambda r: r["max_rel_err"])
        bad += not all(r["pass"] for r in reports)
        print(f"{op:30s} worst {worst['max_rel_err']:.2e} at seed {worst['seed']:2d} (tol {worst['tolerance']:.0e})")
    print(f"{bad} failing ops, {time.perf_counter() - t0:.1f}s")
    raise SystemExit(1 if bad else 0)


if __name__ == "__main__":
    main()

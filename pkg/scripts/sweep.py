"""Sweep one optimizer parameter over an existing run directory.

    python3 scripts/sweep.py --run runs/main --param lambda2 --values 0.002 0.006 0.02 --seed 1

The base run must already contain the world, flow and manifold.  Each value
gets its own copy of the run directory (``<run>-<param>-<value>``) so the
base results are untouched.  Prints one line per value with mean
within-reference diversity, mean distance to the reference, and the
fraction of starts that recorded a feasible best.
"""

import argparse
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np

from raregen.harness import experiments as ex

FIELDS = ("lambda1", "lambda2", "sigma", "k_prime", "n_starts", "max_epochs", "base_lr")


def sweep(run_path: Path, param: str, values, seed: int, refs=None, workers: int = 1):
    base = ex.RunDir(run_path)
    plan = base.plan()
    cast = type(getattr(plan.optimizer, param))
    rows = []
    for raw in values:
        value = cast(raw)
        target = run_path.parent / f"{run_path.name}-{param}-{value}"
        if target.exists():
            shutil.rmtree(target)
        shutil.copytree(run_path, target, ignore=shutil.ignore_patterns("results", "manifests"))
        changed = replace(plan, optimizer=replace(plan.optimizer, **{param: value}))
        run = ex.RunDir(target)
        ex.optimize_stage(run, changed, seed, refs=refs, variant="full", workers=workers)
        ref_rows, records = ex.load_variant(run, "full")
        feasible = np.mean([r["feasible"] for r in records])
        rows.append((value, float(np.nanmean(ex.within_diversity(ref_rows, records))),
                     float(np.nanmean(ex.reference_distance(ref_rows, records))), float(feasible)))
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True, type=Path)
    ap.add_argument("--param", required=True, choices=FIELDS)
    ap.add_argument("--values", required=True, nargs="+")
    ap.add_argument("--seed", type=int, default=20240601)
    ap.add_argument("--refs", type=int)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    print(f"{args.param:>10} {'diversity':>10} {'ref_dist':>10} {'feasible':>9}")
    for value, div, dist, feas in sweep(args.run, args.param, args.values, args.seed, args.refs, args.workers):
        print(f"{value!s:>10} {div:10.4f} {dist:10.4f} {feas:9.3f}")

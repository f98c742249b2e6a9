"""Run every CLI stage on one config and seed.

    python3 scripts/run_pipeline.py --config configs/experiment.toml --seed 1 --out runs/main

Stages run in order: make-world, train-flow, build-manifold, ablate (all
three variants, which also writes the full-variant eval inputs), eval,
correlate and heatmap.  Any stage failure stops the run with its exit code.
"""

import argparse
import sys
import time

from raregen.harness.cli import main


def run_all(config: str, seed: int, out: str, workers: int = 1, refs=None) -> int:
    extra = ["--workers", str(workers)] + (["--refs", str(refs)] if refs else [])
    stages = [
        ["make-world", "--config", config, "--seed", str(seed)],
        ["train-flow", "--seed", str(seed)],
        ["build-manifold"],
        ["ablate", "--seed", str(seed)] + extra,
        ["eval", "--seed", str(seed)],
        ["correlate", "--seed", str(seed)],
        ["heatmap"],
    ]
    for argv in stages:
        t0 = time.perf_counter()
        code = main(argv + ["--out", out])
        print(f"[{argv[0]}] exit {code} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        if code:
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/experiment.toml")
    ap.add_argument("--seed", type=int, default=20240601)
    ap.add_argument("--out", required=True)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--refs", type=int)
    args = ap.parse_args()
    sys.exit(run_all(args.config, args.seed, args.out, args.workers, args.refs))

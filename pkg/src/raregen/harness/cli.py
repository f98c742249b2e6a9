"""``raregen`` command line.

Each subcommand works on the run directory given by ``--out``.  Stages
that draw random numbers require ``--seed``.  Usage errors exit with 2,
validation and runtime failures with 1.  ``RAREGEN_LOG`` sets the log
level (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from raregen.errors import RaregenError
from raregen.harness import experiments as ex
from raregen.optimizer import VARIANTS

log = logging.getLogger("raregen")


def _plan(args, run: ex.RunDir) -> ex.ExperimentPlan:
    if args.config:
        return ex.load_plan(args.config)
    if run.path("plan.json").exists():
        return run.plan()
    return ex.ExperimentPlan()


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_make_world(args, run, plan):
    ex.make_world(run, plan, args.seed)
    print(f"world written to {run.root}")


def cmd_train_flow(args, run, plan):
    result = ex.train_flow_stage(run, plan, args.seed)
    print(f"best validation NLL {result.best_val_nll:.4f} at iteration {result.best_iteration}")


def cmd_build_manifold(args, run, plan):
    m = ex.build_manifold_stage(run, plan)
    print(f"real manifold: {len(m.radii)} balls, k={m.k}, digest {m.digest()[:16]}")


def cmd_optimize(args, run, plan):
    _print(ex.optimize_stage(run, plan, args.seed, args.refs, args.variant, args.workers))


def cmd_eval(args, run, plan):
    _print(ex.eval_stage(run, plan, args.seed))


def cmd_ablate(args, run, plan):
    _print(ex.ablate_stage(run, plan, args.seed, args.refs, args.workers))


def cmd_correlate(args, run, plan):
    _print(ex.correlate_stage(run, plan, args.seed))


def cmd_heatmap(args, run, plan):
    rows = ex.heatmap_stage(run, plan, args.resolution, args.extent)
    print(f"{len(rows)} grid points written to {run.path('heatmap.csv')}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raregen", description="Rare-sample generation experiments on a toy world.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text, seed=False, refs=False, variant=False):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", required=True, metavar="DIR", help="run directory")
        p.add_argument("--config", metavar="PATH", help="experiment plan (TOML or JSON); defaults to the run's plan.json")
        if seed:
            p.add_argument("--seed", required=True, type=int, metavar="U64", help="master seed")
        if refs:
            p.add_argument("--refs", type=int, metavar="N", help="number of references (default from the plan)")
            p.add_argument("--workers", type=int, default=1, metavar="N", help="worker processes")
        if variant:
            p.add_argument("--variant", choices=VARIANTS, default="full", help="objective variant")
        p.set_defaults(func=func)
        return p

    add("make-world", cmd_make_world, "resolve the world and sample real and baseline data", seed=True)
    add("train-flow", cmd_train_flow, "train the normalizing flow on real features", seed=True)
    add("build-manifold", cmd_build_manifold, "build the real k-NN manifold")
    add("optimize", cmd_optimize, "run the multi-start optimization", seed=True, refs=True, variant=True)
    add("eval", cmd_eval, "compute metrics for references and optimized samples", seed=True)
    add("ablate", cmd_ablate, "run all objective variants and tabulate them", seed=True, refs=True)
    add("correlate", cmd_correlate, "correlate flow likelihood with k-NN radii and rarity", seed=True)
    hm = add("heatmap", cmd_heatmap, "log-likelihood and manifold membership on a 2-D feature slice")
    hm.add_argument("--resolution", type=int, default=41, metavar="N")
    hm.add_argument("--extent", type=float, metavar="X", help="half-width of the slice (default: 3 std of the first axis)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("RAREGEN_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    if getattr(args, "workers", 1) < 1 or (getattr(args, "refs", None) is not None and args.refs < 1):
        parser.error("--workers and --refs must be positive")
    run = ex.RunDir(args.out)
    try:
        plan = _plan(args, run)
        args.func(args, run, plan)
    except (RaregenError, OSError, ValueError) as exc:
        print(f"raregen {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

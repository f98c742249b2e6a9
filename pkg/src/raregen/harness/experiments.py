"""Experiment plans and the pipeline stages behind the command line.

Every stage reads and writes a single run directory::

    plan.json  world.json                 resolved configuration
    real.fset  heldout.fset  heldout_points.fset
    fake_latents.fset  fakes.fset         baseline generator draws
    flow.gflw  train_trace.csv            trained density model
    real_radii.fset  manifold.json        real k-NN manifold
    results/<variant>.jsonl               one record per (reference, start)
    results/<variant>.references.jsonl    one record per reference
    report.json  report.csv  ablation.json  ablation.csv
    correlation.json  real_scatter.csv  fake_scatter.csv  heatmap.csv
    manifests/<stage>.json                input/output hashes of each stage

Outputs carry no timestamps, so repeating a stage with the same seed and
configuration reproduces every file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from raregen import __version__, featio
from raregen.errors import ContractError, DegenerateBoundaryError
from raregen.flow import FlowConfig, FlowModel, TrainConfig, forward_logprob, load_checkpoint, save_checkpoint, train_flow
from raregen.harness.metrics import (
    MetricsReport,
    mean_pairwise_distance,
    metrics_report,
    pearson,
    sign_test,
)
from raregen.knn import KnnManifold, build_manifold
from raregen.optimizer import (
    VARIANTS,
    OptimizerConfig,
    ReferenceContext,
    init_starts,
    make_context,
    optimize_references,
)
from raregen.world import (
    ToyWorld,
    WorldConfig,
    default_world_config,
    extract,
    load_world_config,
    oracle_logpdf,
    sample_real,
    tomllib,
    world_config_from_dict,
)

log = logging.getLogger(__name__)

START_OUTSIDE_WARNING = 0.3
# independent random streams derived from the master seed
STREAM_REAL, STREAM_FAKE, STREAM_HELDOUT, STREAM_REFS, STREAM_FLOW, STREAM_NULL = range(6)


# -- plan ----------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    n_real: int = 5000
    n_fake: int = 5000
    n_heldout: int = 2000
    k_real: int = 3


@dataclass(frozen=True)
class ExperimentPlan:
    world: WorldConfig = field(default_factory=default_world_config)
    flow: FlowConfig = FlowConfig()
    train: TrainConfig = TrainConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    data: DataConfig = DataConfig()
    refs: int = 50
    pairs: int = 10_000
    chunk: int = 10  # references per batched optimization graph

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "flow": asdict(self.flow),
            "train": asdict(self.train),
            "optimizer": asdict(self.optimizer),
            "data": asdict(self.data),
            "experiment": {"refs": self.refs, "pairs": self.pairs, "chunk": self.chunk},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _section(cls, raw: Optional[dict], name: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ContractError(f"unknown settings in [{name}]: {sorted(unknown)}")
    return cls(**raw)


def plan_from_dict(raw: dict, base_dir: Optional[Path] = None) -> ExperimentPlan:
    raw = dict(raw)
    if "world_file" in raw:
        path = Path(raw.pop("world_file"))
        world = load_world_config(path if path.is_absolute() or base_dir is None else base_dir / path)
    elif "world" in raw:
        world = world_config_from_dict(raw.pop("world"))
    else:
        world = default_world_config()
    sections = {"flow", "train", "optimizer", "data", "experiment"}
    unknown = set(raw) - sections
    if unknown:
        raise ContractError(f"unknown plan sections: {sorted(unknown)}")
    exp = dict(raw.get("experiment") or {})
    extra = set(exp) - {"refs", "pairs", "chunk"}
    if extra:
        raise ContractError(f"unknown settings in [experiment]: {sorted(extra)}")
    return ExperimentPlan(
        world=world,
        flow=_section(FlowConfig, raw.get("flow"), "flow"),
        train=_section(TrainConfig, raw.get("train"), "train"),
        optimizer=_section(OptimizerConfig, raw.get("optimizer"), "optimizer"),
        data=_section(DataConfig, raw.get("data"), "data"),
        **exp,
    )


def load_plan(path) -> ExperimentPlan:
    """Read a plan from TOML or JSON; ``world_file`` is resolved relative to the plan file."""
    path = Path(path)
    text = path.read_text()
    raw = tomllib.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
    return plan_from_dict(raw, base_dir=path.parent)


# -- run directory -----------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, *names: str) -> None:
        missing = [n for n in names if not self.path(n).exists()]
        if missing:
            raise ContractError(f"run directory {self.root} lacks {missing}; run the earlier stages first")

    def plan(self) -> ExperimentPlan:
        self.require("plan.json")
        return plan_from_dict(json.loads(self.path("plan.json").read_text()))

    def world(self) -> ToyWorld:
        self.require("world.json")
        return ToyWorld.from_config(world_config_from_dict(json.loads(self.path("world.json").read_text())))

    def manifold(self) -> KnnManifold:
        self.require("real.fset", "real_radii.fset", "manifold.json")
        meta = json.loads(self.path("manifold.json").read_text())
        manifold = KnnManifold(featio.load_fset(self.path("real.fset")), featio.load_fset(self.path("real_radii.fset"))[:, 0], meta["k"])
        if manifold.digest() != meta["digest"]:
            raise ContractError("real manifold files do not match the recorded digest")
        return manifold

    def flow(self) -> FlowModel:
        self.require("flow.gflw")
        return load_checkpoint(self.path("flow.gflw"))

    def write_manifest(self, stage: str, args: dict, inputs: Sequence[str], outputs: Sequence[str]) -> Path:
        plan_digest = hashlib.sha256(self.path("plan.json").read_bytes()).hexdigest() if self.path("plan.json").exists() else None
        manifest = {
            "stage": stage,
            "version": __version__,
            "args": args,
            "plan_sha256": plan_digest,
            "inputs": {n: sha256_file(self.path(n)) for n in inputs},
            "outputs": {n: sha256_file(self.path(n)) for n in outputs},
        }
        path = self.path(f"manifests/{stage}.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(manifest))
        return path


def _rng(seed: int, stream: int):
    return np.random.default_rng([seed, stream])


def write_csv(path, header: Sequence[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- stages --------------------------------------------------------------------------


def make_world(run: RunDir, plan: ExperimentPlan, seed: int) -> None:
    """Resolve the world, sample real data and baseline generator draws."""
    run.root.mkdir(parents=True, exist_ok=True)
    world = ToyWorld.from_config(plan.world)
    if plan.flow.input_dim != plan.world.feature_dim:
        raise ContractError(f"flow input_dim {plan.flow.input_dim} != world feature_dim {plan.world.feature_dim}")
    d = plan.data
    run.path("plan.json").write_text(plan.to_json() + "\n")
    run.path("world.json").write_text(plan.world.to_json() + "\n")
    featio.save_fset(run.path("real.fset"), extract(world.extractor, sample_real(world.mixture, d.n_real, _rng(seed, STREAM_REAL))))
    held = sample_real(world.mixture, d.n_heldout, _rng(seed, STREAM_HELDOUT))
    featio.save_fset(run.path("heldout_points.fset"), held)
    featio.save_fset(run.path("heldout.fset"), extract(world.extractor, held))
    z = _rng(seed, STREAM_FAKE).standard_normal((d.n_fake, world.latent_dim))
    featio.save_fset(run.path("fake_latents.fset"), z)
    featio.save_fset(run.path("fakes.fset"), world.features(z))
    outputs = ["plan.json", "world.json", "real.fset", "heldout_points.fset", "heldout.fset", "fake_latents.fset", "fakes.fset"]
    run.write_manifest("make-world", {"seed": seed}, [], outputs)


def train_flow_stage(run: RunDir, plan: ExperimentPlan, seed: int):
    run.require("real.fset")
    real = featio.load_fset(run.path("real.fset"))
    result = train_flow(real, plan.flow, seed=[seed, STREAM_FLOW], train=plan.train)
    save_checkpoint(run.path("flow.gflw"), result.model)
    val = dict(result.val_nll)
    rows = [(i + 1, loss, val.get(i + 1)) for i, loss in enumerate(result.train_nll)]
    write_csv(run.path("train_trace.csv"), ["iteration", "train_nll", "val_nll"], [(0, None, val[0])] + rows)
    run.write_manifest(
        "train-flow", {"seed": seed, "best_iteration": result.best_iteration}, ["plan.json", "real.fset"], ["flow.gflw", "train_trace.csv"]
    )
    return result


def build_manifold_stage(run: RunDir, plan: ExperimentPlan) -> KnnManifold:
    run.require("real.fset")
    manifold = build_manifold(featio.load_fset(run.path("real.fset")), plan.data.k_real)
    featio.save_fset(run.path("real_radii.fset"), manifold.radii[:, None])
    run.path("manifold.json").write_text(dumps({"k": manifold.k, "count": len(manifold.radii), "digest": manifold.digest()}))
    run.write_manifest("build-manifold", {}, ["plan.json", "real.fset"], ["real_radii.fset", "manifold.json"])
    return manifold


# optimization --------------------------------------------------------------------

_SHARED: dict = {}


def _optimize_chunk(task):
    contexts, seeds = task
    s = _SHARED
    return optimize_references(contexts, s["config"], s["world"].generator, s["world"].extractor, s["flow"], seeds)


def select_references(n_available: int, count: int, seed: int) -> np.ndarray:
    """Seeded, order-preserving choice of baseline indices that serve as references."""
    if not 1 <= count <= n_available:
        raise ContractError(f"cannot choose {count} references from {n_available} baseline draws")
    return np.sort(_rng(seed, STREAM_REFS).choice(n_available, size=count, replace=False))


def build_contexts(world: ToyWorld, manifold: KnnManifold, fake_latents, fakes, indices, config: OptimizerConfig):
    contexts, skipped = [], []
    for i in indices:
        i = int(i)
        try:
            contexts.append(
                make_context(fake_latents[i], world.generator, world.extractor, fakes, manifold, config.k_prime,
                             index=i, exclude=i, metric=config.metric)
            )
        except DegenerateBoundaryError as exc:
            log.warning("reference %d skipped: %s", i, exc)
            skipped.append(i)
    return contexts, skipped


def start_outside_fraction(contexts: Sequence[ReferenceContext], config: OptimizerConfig, world: ToyWorld, seed: int) -> float:
    """Fraction of the initial perturbed starts that fall outside the real manifold."""
    outside = total = 0
    for ctx in contexts:
        z = init_starts(ctx.z_star, config.n_starts, config.sigma, [seed, ctx.index])
        inside = ctx.real_manifold.contains(world.features(z))
        outside += int(np.sum(~inside))
        total += inside.size
    return outside / total if total else 0.0


def run_optimization(world: ToyWorld, flow: FlowModel, contexts: Sequence[ReferenceContext], config: OptimizerConfig,
                     seed: int, chunk: int, workers: int = 1) -> list:
    """Optimize every reference; batches are fixed by ``chunk`` so ``workers`` never changes results."""
    tasks = []
    for start in range(0, len(contexts), chunk):
        part = list(contexts[start : start + chunk])
        tasks.append((part, [[seed, c.index] for c in part]))
    _SHARED.update(config=config, world=world, flow=flow)
    try:
        if workers > 1 and len(tasks) > 1:
            with multiprocessing.get_context("fork").Pool(min(workers, len(tasks))) as pool:
                chunks = pool.map(_optimize_chunk, tasks)
        else:
            chunks = [_optimize_chunk(t) for t in tasks]
    finally:
        _SHARED.clear()
    results = [r for part in chunks for r in part]
    return sorted(results, key=lambda r: r.context.index)


def _floats(a) -> list:
    return [float(v) for v in np.ravel(a)]


def result_records(results, manifold: KnnManifold) -> list:
    records = []
    for res in results:
        ctx = res.context
        feats = [s.best_feature for s in res.starts if s.feasible]
        scores = manifold.rarity(np.array(feats)) if feats else None
        k = 0
        for i, s in enumerate(res.starts):
            rec = {"reference": ctx.index, "start": i, "feasible": s.feasible}
            if s.feasible:
                score = scores[k]
                k += 1
                rec.update(
                    best_epoch=s.best_epoch,
                    best_latent=_floats(s.best_latent),
                    best_feature=_floats(s.best_feature),
                    loss={"l_rare": s.best_loss.l_rare, "l_sim": s.best_loss.l_sim, "l_div": s.best_loss.l_div, "total": s.best_loss.total},
                    rarity="undefined" if np.ma.is_masked(score) else float(score),
                    ref_distance=float(np.linalg.norm(s.best_feature - ctx.x_star)),
                )
            records.append(rec)
    return records


def reference_records(contexts: Sequence[ReferenceContext], manifold: KnnManifold) -> list:
    scores = manifold.rarity(np.array([c.x_star for c in contexts])) if contexts else []
    return [
        {
            "reference": c.index,
            "z_star": _floats(c.z_star),
            "x_star": _floats(c.x_star),
            "d_star": c.d_star,
            "rarity": "undefined" if np.ma.is_masked(s) else float(s),
        }
        for c, s in zip(contexts, scores)
    ]


def write_jsonl(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_jsonl(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def optimize_stage(run: RunDir, plan: ExperimentPlan, seed: int, refs: Optional[int] = None, variant: str = "full",
                   workers: int = 1) -> dict:
    run.require("fake_latents.fset", "fakes.fset", "flow.gflw", "real_radii.fset")
    config = plan.optimizer.variant(variant)
    world, flow, manifold = run.world(), run.flow(), run.manifold()
    latents, fakes = featio.load_fset(run.path("fake_latents.fset")), featio.load_fset(run.path("fakes.fset"))
    indices = select_references(len(fakes), refs or plan.refs, seed)
    contexts, skipped = build_contexts(world, manifold, latents, fakes, indices, config)
    outside = start_outside_fraction(contexts, config, world, seed)
    if outside > START_OUTSIDE_WARNING:
        msg = f"{outside:.0%} of initial starts lie outside the real manifold; sigma={config.sigma} may be too large"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        log.warning(msg)
    results = run_optimization(world, flow, contexts, config, seed, plan.chunk, workers)
    records = result_records(results, manifold)
    name = f"results/{variant}.jsonl"
    ref_name = f"results/{variant}.references.jsonl"
    write_jsonl(run.path(name), records)
    write_jsonl(run.path(ref_name), reference_records(contexts, manifold))
    summary = {
        "variant": variant,
        "references": len(contexts),
        "skipped_degenerate": skipped,
        "starts": len(records),
        "feasible_starts": sum(r["feasible"] for r in records),
        "start_outside_fraction": outside,
        "manifold_digest": manifold.digest(),
    }
    run.path(f"results/{variant}.summary.json").write_text(dumps(summary))
    run.write_manifest(
        f"optimize-{variant}",
        {"seed": seed, "refs": len(indices), "variant": variant},
        ["plan.json", "world.json", "flow.gflw", "real.fset", "real_radii.fset", "fakes.fset", "fake_latents.fset"],
        [name, ref_name, f"results/{variant}.summary.json"],
    )
    return summary


# evaluation ----------------------------------------------------------------------


def load_variant(run: RunDir, variant: str):
    """``(references, records)`` of one optimized variant."""
    run.require(f"results/{variant}.jsonl", f"results/{variant}.references.jsonl")
    return read_jsonl(run.path(f"results/{variant}.references.jsonl")), read_jsonl(run.path(f"results/{variant}.jsonl"))


def per_reference(records) -> dict:
    """Feasible best features grouped by reference index."""
    out: dict = {}
    for r in records:
        if r["feasible"]:
            out.setdefault(r["reference"], []).append(r["best_feature"])
    return {k: np.array(v) for k, v in out.items()}


def _score(value) -> float:
    return float("nan") if value == "undefined" else float(value)


def uplift_pairs(refs, records):
    """Per reference: (reference rarity, mean defined rarity of its recorded bests); NaN where undefined."""
    best: dict = {}
    for r in records:
        if r["feasible"] and r["rarity"] != "undefined":
            best.setdefault(r["reference"], []).append(r["rarity"])
    ref_scores = np.array([_score(r["rarity"]) for r in refs])
    best_scores = np.array([np.mean(best[r["reference"]]) if r["reference"] in best else np.nan for r in refs])
    return ref_scores, best_scores


def within_diversity(refs, records) -> np.ndarray:
    """Mean pairwise distance among each reference's feasible bests (NaN with fewer than two)."""
    groups = per_reference(records)
    return np.array([
        mean_pairwise_distance(groups[r["reference"]], None) if len(groups.get(r["reference"], [])) >= 2 else np.nan
        for r in refs
    ])


def reference_distance(refs, records) -> np.ndarray:
    dist: dict = {}
    for r in records:
        if r["feasible"]:
            dist.setdefault(r["reference"], []).append(r["ref_distance"])
    return np.array([np.mean(dist[r["reference"]]) if r["reference"] in dist else np.nan for r in refs])


def reference_set_hash(refs) -> str:
    return hashlib.sha256(json.dumps([r["reference"] for r in refs]).encode()).hexdigest()


def _report_row(name: str, rep: MetricsReport) -> list:
    d = rep.to_dict()
    return [name] + [d[k] for k in REPORT_FIELDS]


REPORT_FIELDS = [f.name for f in fields(MetricsReport)]


def eval_stage(run: RunDir, plan: ExperimentPlan, seed: int) -> dict:
    """Metrics for the reference set and for every optimized variant present in the run."""
    manifold = run.manifold()
    real = manifold.centers
    variants = [v for v in VARIANTS if run.path(f"results/{v}.jsonl").exists()]
    if not variants:
        raise ContractError("no optimization results to evaluate; run `optimize` first")
    rows, uplift = {}, {}
    for v in variants:
        refs, records = load_variant(run, v)
        if "reference" not in rows:
            x_star = np.array([r["x_star"] for r in refs])
            rows["reference"] = metrics_report(x_star, real, manifold, plan.data.k_real, plan.pairs, seed)
        feats = np.array([r["best_feature"] for r in records if r["feasible"]])
        rows[v] = metrics_report(feats, real, manifold, plan.data.k_real, plan.pairs, seed)
        before, after = uplift_pairs(refs, records)
        uplift[v] = asdict(sign_test(after, before))
    report = {
        "rows": {k: v.to_dict() for k, v in rows.items()},
        "rarity_uplift_sign_test": uplift,
        "manifold_digest": manifold.digest(),
    }
    run.path("report.json").write_text(dumps(report))
    write_csv(run.path("report.csv"), ["set"] + REPORT_FIELDS, [_report_row(k, v) for k, v in rows.items()])
    inputs = ["real.fset", "real_radii.fset"] + [f"results/{v}.jsonl" for v in variants]
    run.write_manifest("eval", {"seed": seed}, inputs, ["report.json", "report.csv"])
    return report


def ablation_table(run: RunDir, plan: ExperimentPlan, seed: int) -> dict:
    manifold = run.manifold()
    rows, within, ref_hashes = {}, {}, {}
    for v in VARIANTS:
        refs, records = load_variant(run, v)
        feats = np.array([r["best_feature"] for r in records if r["feasible"]])
        rep = metrics_report(feats, manifold.centers, manifold, plan.data.k_real, plan.pairs, seed).to_dict()
        rep["diversity_all_pairs"] = mean_pairwise_distance(feats, None)
        within[v] = within_diversity(refs, records)
        rep["diversity_within_reference"] = float(np.nanmean(within[v]))
        rep["reference_set_hash"] = ref_hashes[v] = reference_set_hash(refs)
        rows[v] = rep
    if len(set(ref_hashes.values())) != 1:
        raise ContractError("ablation variants were run on different reference sets")
    table = {
        "rows": rows,
        "sign_tests": {
            "full_vs_rare_within_diversity": asdict(sign_test(within["full"], within["rare"])),
            "rare+sim_vs_rare_within_diversity": asdict(sign_test(within["rare+sim"], within["rare"])),
            "full_vs_rare+sim_within_diversity": asdict(sign_test(within["full"], within["rare+sim"])),
        },
    }
    return table


def ablate_stage(run: RunDir, plan: ExperimentPlan, seed: int, refs: Optional[int] = None, workers: int = 1) -> dict:
    for v in VARIANTS:
        optimize_stage(run, plan, seed, refs, v, workers)
    table = ablation_table(run, plan, seed)
    run.path("ablation.json").write_text(dumps(table))
    cols = REPORT_FIELDS + ["diversity_all_pairs", "diversity_within_reference", "reference_set_hash"]
    write_csv(run.path("ablation.csv"), ["variant"] + cols, [[v] + [table["rows"][v][c] for c in cols] for v in VARIANTS])
    run.write_manifest(
        "ablate", {"seed": seed, "refs": refs or plan.refs},
        [f"results/{v}.jsonl" for v in VARIANTS], ["ablation.json", "ablation.csv"],
    )
    return table


# correlation and heatmap ---------------------------------------------------------


def run_correlation(flow: FlowModel, manifold: KnnManifold, fakes, seed: int, heldout=None, heldout_points=None,
                    mixture=None) -> dict:
    """Pearson r of -log p against k-NN radii (real) and rarity scores (fakes, defined only)."""
    real = manifold.centers
    nll_real = -forward_logprob(flow, real).logp
    scores = manifold.rarity(fakes)
    defined = ~np.ma.getmaskarray(scores)
    if defined.sum() < 3:
        raise ContractError(f"only {int(defined.sum())} generated samples have a defined rarity score")
    nll_fake = -forward_logprob(flow, np.asarray(fakes)[defined]).logp
    rarity = scores.compressed()
    out = {
        "r_real": pearson(nll_real, manifold.radii),
        "r_fake": pearson(nll_fake, rarity),
        "r_real_shuffled": pearson(nll_real, _rng(seed, STREAM_NULL).permutation(manifold.radii)),
        "n_real": int(len(real)),
        "n_fake_defined": int(defined.sum()),
        "n_fake_undefined": int((~defined).sum()),
        "real_scatter": (manifold.radii, nll_real),
        "fake_scatter": (rarity, nll_fake),
    }
    if heldout is not None:
        out["r_oracle"] = pearson(-forward_logprob(flow, heldout).logp, -oracle_logpdf(mixture, heldout_points))
    return out


def correlate_stage(run: RunDir, plan: ExperimentPlan, seed: int) -> dict:
    run.require("fakes.fset", "heldout.fset", "heldout_points.fset")
    res = run_correlation(
        run.flow(), run.manifold(), featio.load_fset(run.path("fakes.fset")), seed,
        heldout=featio.load_fset(run.path("heldout.fset")),
        heldout_points=featio.load_fset(run.path("heldout_points.fset")),
        mixture=run.world().mixture,
    )
    real_x, real_y = res.pop("real_scatter")
    fake_x, fake_y = res.pop("fake_scatter")
    write_csv(run.path("real_scatter.csv"), ["knnd", "neg_logp"], zip(real_x, real_y))
    write_csv(run.path("fake_scatter.csv"), ["rarity", "neg_logp"], zip(fake_x, fake_y))
    run.path("correlation.json").write_text(dumps(res))
    run.write_manifest(
        "correlate", {"seed": seed},
        ["flow.gflw", "real.fset", "real_radii.fset", "fakes.fset", "heldout.fset"],
        ["correlation.json", "real_scatter.csv", "fake_scatter.csv"],
    )
    return res


def heatmap_slice(flow: FlowModel, manifold: KnnManifold, center, axes, extent: float, resolution: int):
    """Scaled-space log-likelihood and manifold membership on the plane ``center + s a1 + t a2``.

    Returns rows ``(s, t, logp, in_manifold)`` with ``s`` varying slowest.
    """
    axes = np.asarray(axes, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if axes.shape != (2, center.size):
        raise ContractError(f"axes must have shape (2, {center.size})")
    if np.max(np.abs(axes @ axes.T - np.eye(2))) > 1e-8:
        raise ContractError("heatmap axes must be orthonormal")
    if resolution < 2 or not extent > 0:
        raise ContractError("need resolution >= 2 and a positive extent")
    ticks = np.linspace(-extent, extent, resolution)
    s, t = np.meshgrid(ticks, ticks, indexing="ij")
    s, t = s.ravel(), t.ravel()
    points = center + s[:, None] * axes[0] + t[:, None] * axes[1]
    logp = forward_logprob(flow, points).logp
    inside = manifold.contains(points)
    return list(zip(s, t, logp, inside))


def principal_axes(points) -> np.ndarray:
    """Top two principal directions, with a deterministic sign convention."""
    x = np.asarray(points, dtype=np.float64)
    _, vecs = np.linalg.eigh(np.cov(x, rowvar=False))
    axes = vecs[:, ::-1][:, :2].T.copy()
    for a in axes:
        if a[np.argmax(np.abs(a))] < 0:
            a *= -1
    return axes


def heatmap_stage(run: RunDir, plan: ExperimentPlan, resolution: int = 41, extent: Optional[float] = None) -> list:
    manifold = run.manifold()
    real = manifold.centers
    axes = principal_axes(real)
    center = real.mean(axis=0)
    if extent is None:
        extent = float(3.0 * np.sqrt(np.var(real @ axes[0])))
    rows = heatmap_slice(run.flow(), manifold, center, axes, extent, resolution)
    write_csv(run.path("heatmap.csv"), ["s", "t", "logp", "in_manifold"], rows)
    run.path("heatmap.json").write_text(dumps({"center": _floats(center), "axes": [_floats(a) for a in axes],
                                               "extent": extent, "resolution": resolution}))
    run.write_manifest("heatmap", {"resolution": resolution, "extent": extent}, ["flow.gflw", "real.fset"],
                       ["heatmap.csv", "heatmap.json"])
    return rows

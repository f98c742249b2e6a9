"""End-to-end acceptance checks on the shipped toy world.

The module builds one experiment through the command line (world, flow,
manifold, all three objective variants on 50 references) and two
parameter sweeps through the Python API, then checks every criterion on
the files those runs wrote.  Each test records a PASS/FAIL line that is
printed in the pytest terminal summary.
"""

import json
import math
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from oracles import bf_contains, bf_fraction_inside, bf_knnd, bf_radii, bf_rarity, central_fd, fd_jacobian
from raregen.flow import FlowConfig, FlowModel, MinMaxScaler, TrainConfig, forward_logprob, inverse, train_flow
from raregen.harness import experiments as ex
from raregen.harness.cli import main
from raregen.harness.metrics import sign_test
from raregen.knn import build_manifold, contains, knnd, precision, rarity_score, recall
from raregen.numerics import tape as T
from raregen.optimizer import init_starts, objective
from test_knn import _instance

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEED = 20240601
ALPHA = 0.05


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "main"
    cfg = str(CONFIGS / "experiment.toml")
    timings = {}
    t0 = time.perf_counter()
    assert main(["make-world", "--config", cfg, "--seed", str(SEED), "--out", str(out)]) == 0
    assert main(["train-flow", "--seed", str(SEED), "--out", str(out)]) == 0
    assert main(["build-manifold", "--out", str(out)]) == 0
    timings["setup"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    assert main(["ablate", "--seed", str(SEED), "--out", str(out)]) == 0
    timings["ablate"] = time.perf_counter() - t0
    assert main(["correlate", "--seed", str(SEED), "--out", str(out)]) == 0

    plan = ex.RunDir(out).plan()
    sweeps = {}
    for name, changed in {
        "lambda2": replace(plan, optimizer=replace(plan.optimizer, lambda2=0.02)),
        "kprime": replace(plan, optimizer=replace(plan.optimizer, k_prime=200)),
    }.items():
        target = out.parent / name
        shutil.copytree(out, target, ignore=shutil.ignore_patterns("results", "manifests"))
        t0 = time.perf_counter()
        ex.optimize_stage(ex.RunDir(target), changed, SEED, variant="full")
        timings[name] = time.perf_counter() - t0
        sweeps[name] = target
    return {"out": out, "sweeps": sweeps, "timings": timings}


# 1 ----------------------------------------------------------------------------------


def test_criterion_01_flow_correctness(experiment, criterion):
    t0 = time.perf_counter()
    run = ex.RunDir(experiment["out"])
    trained = run.flow()
    real = run.manifold().centers
    worst_round_trip = float(np.max(np.abs(inverse(trained, forward_logprob(trained, real).latents) - real)))

    worst_jac = 0.0
    for seed in range(3):
        model = FlowModel.create(FlowConfig(4, 1, 4, 2, 16), MinMaxScaler(np.full(4, -1.0), np.full(4, 1.0)), seed=seed)
        rng = np.random.default_rng(seed)
        model = model.copy({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in model.params.items()})
        for x in rng.uniform(-0.8, 0.8, size=(4, 4)):
            res = forward_logprob(model, x)
            z = np.concatenate(res.latents)
            logdet = res.logp + 0.5 * float(z @ z) + 2.0 * math.log(2 * math.pi)
            jac = fd_jacobian(lambda v: np.concatenate(forward_logprob(model, v).latents), x, h=1e-6)
            worst_jac = max(worst_jac, abs(logdet + model.log_offset - np.linalg.slogdet(jac)[1]))
            back = inverse(model, res.latents)
            worst_round_trip = max(worst_round_trip, float(np.max(np.abs(back - x))))

    rng = np.random.default_rng(1)
    data = rng.normal(size=(1500, 2)) @ np.array([[1.0, 0.3], [0.0, 0.5]])
    flow2 = train_flow(data, FlowConfig(2, 1, 4, 2, 16), seed=0, train=TrainConfig(epochs=10, base_lr=2e-3)).model
    u = np.linspace(-1.0, 2.0, 500)
    gx, gy = np.meshgrid(u, u, indexing="ij")
    grid = flow2.scaler.low + np.stack([gx.ravel(), gy.ravel()], 1) * flow2.scaler.width
    mass = float(np.exp(forward_logprob(flow2, grid).logp).sum() * (u[1] - u[0]) ** 2)
    elapsed = time.perf_counter() - t0

    ok = worst_round_trip <= 1e-6 and worst_jac <= 1e-4 and abs(mass - 1) <= 0.02 and elapsed < 60
    criterion(1, ok, f"round-trip {worst_round_trip:.2e} (<=1e-6), log-det vs FD {worst_jac:.2e} (<=1e-4), "
                     f"2-D mass {mass:.4f} (1+-0.02), {elapsed:.1f}s")
    assert ok


# 2 ----------------------------------------------------------------------------------


def test_criterion_02_total_loss_gradient(experiment, criterion):
    t0 = time.perf_counter()
    run = ex.RunDir(experiment["out"])
    plan, world, flow, manifold = run.plan(), run.world(), run.flow(), run.manifold()
    refs = ex.read_jsonl(run.path("results/full.references.jsonl"))[:10]
    x_stars = np.array([r["x_star"] for r in refs])
    d_stars = np.array([r["d_star"] for r in refs])
    Z = np.stack([init_starts(np.array(r["z_star"]), 10, 0.4, [SEED, i]) for i, r in enumerate(refs)])
    cfg = plan.optimizer

    def total(v):
        return float(objective(v, x_stars, d_stars, cfg, world.generator, world.extractor, flow).total.value)

    leaf = T.variable(Z)
    terms = objective(leaf, x_stars, d_stars, cfg, world.generator, world.extractor, flow)
    (g,) = T.grad(terms.total, [leaf])
    fd = central_fd(total, Z, h=1e-6)
    near_sphere = np.abs(terms.ref_distance - d_stars[:, None]) < 1e-3
    per_point = np.max(np.abs(g - fd), axis=-1) / np.maximum(np.max(np.abs(fd), axis=-1), 1e-8)
    per_point = per_point[~near_sphere]
    outside = int(np.sum(terms.l_sim > 0))
    elapsed = time.perf_counter() - t0
    ok = per_point.size >= 95 and float(per_point.max()) <= 1e-4 and elapsed < 120
    criterion(2, ok, f"max relative error {per_point.max():.2e} over {per_point.size} points "
                     f"({outside} outside the boundary), {elapsed:.1f}s")
    assert ok


# 3 ----------------------------------------------------------------------------------


def test_criterion_03_knn_oracle(criterion):
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(50):
        X, k, queries = _instance(seed)
        Xl = X.tolist()
        manifold = build_manifold(X, k)
        radii = bf_radii(Xl, k)
        mismatches += int(not np.allclose(manifold.radii, radii, rtol=1e-12, atol=1e-15))
        for q in queries:
            ql = q.tolist()
            mismatches += int(not math.isclose(knnd(q, X, k), bf_knnd(ql, Xl, k), rel_tol=1e-12, abs_tol=1e-15))
            mismatches += int(contains(manifold, q) != bf_contains(Xl, radii, ql))
            got, want = rarity_score(q, manifold), bf_rarity(Xl, radii, ql)
            mismatches += int((got is None) != (want is None) or (want is not None and not math.isclose(got, want, rel_tol=1e-12)))
        mismatches += int(precision(queries, manifold) != bf_fraction_inside(queries.tolist(), Xl, radii))
        qr = bf_radii(queries.tolist(), 1)
        mismatches += int(recall(X, build_manifold(queries, 1)) != bf_fraction_inside(Xl, queries.tolist(), qr))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    criterion(3, ok, f"{mismatches} mismatches against brute force on 50 instances, {elapsed:.1f}s")
    assert ok


# 4 ----------------------------------------------------------------------------------


def test_criterion_04_rarity_uplift(experiment, criterion):
    refs, records = ex.load_variant(ex.RunDir(experiment["out"]), "full")
    before, after = ex.uplift_pairs(refs, records)
    test = sign_test(after, before)
    mean_before = float(np.nanmean(before))
    defined_best = [r["rarity"] for r in records if r["feasible"] and r["rarity"] != "undefined"]
    mean_after = float(np.mean(defined_best))
    minutes = experiment["timings"]["ablate"] / 3 / 60
    ok = mean_after > mean_before and test.p_value < ALPHA and len(refs) == 50
    criterion(4, ok, f"mean rarity {mean_before:.3f} -> {mean_after:.3f}, sign test {test.wins}/{test.n} "
                     f"p={test.p_value:.2e}, {len(refs)} references, ~{minutes:.1f} min")
    assert ok


# 5 ----------------------------------------------------------------------------------


def test_criterion_05_ablation_ordering(experiment, criterion):
    table = json.loads((experiment["out"] / "ablation.json").read_text())
    pooled = [table["rows"][v]["diversity_all_pairs"] for v in ("rare", "rare+sim", "full")]
    test = table["sign_tests"]["full_vs_rare_within_diversity"]
    sim = table["sign_tests"]["full_vs_rare+sim_within_diversity"]
    ordered = pooled[0] <= pooled[1] <= pooled[2]
    ok = ordered and pooled[2] > pooled[0] and test["p_value"] < ALPHA
    within = [table["rows"][v]["diversity_within_reference"] for v in ("rare", "rare+sim", "full")]
    criterion(5, ok, "pooled diversity rare/rare+sim/full = " + "/".join(f"{p:.4f}" for p in pooled)
              + f"; full vs rare per reference {test['wins']}/{test['wins'] + test['losses']} p={test['p_value']:.2e}"
              + " (within-reference means " + "/".join(f"{w:.3f}" for w in within)
              + f"; full vs rare+sim {sim['wins']}/{sim['wins'] + sim['losses']} p={sim['p_value']:.1e})")
    assert ok


# 6 ----------------------------------------------------------------------------------


def test_criterion_06_constraint_soundness(experiment, criterion):
    t0 = time.perf_counter()
    runs = [(experiment["out"], v) for v in ("rare", "rare+sim", "full")]
    runs += [(p, "full") for p in experiment["sweeps"].values()]
    checked = violations = 0
    for path, variant in runs:
        run = ex.RunDir(path)
        manifold = run.manifold()
        refs, records = ex.load_variant(run, variant)
        by_ref = {r["reference"]: r for r in refs}
        for rec in records:
            if not rec["feasible"]:
                continue
            x = np.array(rec["best_feature"])
            ref = by_ref[rec["reference"]]
            inside = bool(manifold.contains(x[None])[0])
            within = float(np.linalg.norm(x - np.array(ref["x_star"]))) <= ref["d_star"]
            checked += 1
            violations += int(not (inside and within))
    elapsed = time.perf_counter() - t0
    ok = checked > 0 and violations == 0 and elapsed < 60
    criterion(6, ok, f"{checked - violations}/{checked} recorded bests feasible on recomputation, {elapsed:.1f}s")
    assert ok


# 7 / 8 ----------------------------------------------------------------------------------


def test_criterion_07_correlation_direction(experiment, criterion):
    corr = json.loads((experiment["out"] / "correlation.json").read_text())
    ok = corr["r_real"] >= 0.5 and corr["r_fake"] >= 0.3
    criterion(7, ok, f"r(-logp, k-NND) real = {corr['r_real']:.3f} (>=0.5), "
                     f"r(-logp, rarity) fake = {corr['r_fake']:.3f} (>=0.3, n={corr['n_fake_defined']})")
    assert ok


def test_criterion_08_ground_truth_density(experiment, criterion):
    corr = json.loads((experiment["out"] / "correlation.json").read_text())
    ok = corr["r_oracle"] >= 0.8
    criterion(8, ok, f"r(flow -logp, true -log density) on held-out real = {corr['r_oracle']:.3f} (>=0.8)")
    assert ok


# 9 ----------------------------------------------------------------------------------


def test_criterion_09_parameter_monotonicity(experiment, criterion):
    base_refs, base = ex.load_variant(ex.RunDir(experiment["out"]), "full")
    l2_refs, l2 = ex.load_variant(ex.RunDir(experiment["sweeps"]["lambda2"]), "full")
    kp_refs, kp = ex.load_variant(ex.RunDir(experiment["sweeps"]["kprime"]), "full")
    assert ex.reference_set_hash(base_refs) == ex.reference_set_hash(l2_refs) == ex.reference_set_hash(kp_refs)
    div_base, div_l2 = ex.within_diversity(base_refs, base), ex.within_diversity(l2_refs, l2)
    dist_base, dist_kp = ex.reference_distance(base_refs, base), ex.reference_distance(kp_refs, kp)
    t_div, t_dist = sign_test(div_l2, div_base), sign_test(dist_kp, dist_base)
    ok = (np.nanmean(div_l2) >= np.nanmean(div_base) and t_div.p_value < ALPHA
          and np.nanmean(dist_kp) >= np.nanmean(dist_base) and t_dist.p_value < ALPHA)
    criterion(9, ok, f"lambda2 0.002->0.02 diversity {np.nanmean(div_base):.3f}->{np.nanmean(div_l2):.3f} "
                     f"({t_div.wins}/{t_div.n}, p={t_div.p_value:.1e}); k' 100->200 reference distance "
                     f"{np.nanmean(dist_base):.3f}->{np.nanmean(dist_kp):.3f} ({t_dist.wins}/{t_dist.n}, p={t_dist.p_value:.1e})")
    assert ok


# 10 ---------------------------------------------------------------------------------


def test_criterion_10_reproducibility(tmp_path, criterion):
    cfg = str(CONFIGS / "smoke.toml")
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        for argv in (
            ["make-world", "--config", cfg, "--seed", "3"],
            ["train-flow", "--seed", "3"],
            ["build-manifold"],
            ["optimize", "--seed", "4"],
            ["eval", "--seed", "5"],
            ["correlate", "--seed", "6"],
            ["heatmap", "--resolution", "9"],
        ):
            assert main(argv + ["--out", str(d)]) == 0
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    differing = [str(f) for f in files if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes()]
    ok = not differing and len(files) >= 20
    criterion(10, ok, f"{len(files) - len(differing)}/{len(files)} files byte-identical across repeated runs"
                      + (f"; differing: {differing}" if differing else ""))
    assert ok

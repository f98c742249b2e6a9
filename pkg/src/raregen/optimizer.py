"""Multi-start latent optimization towards rare, feasible samples.

For a reference latent ``z*`` with feature ``x* = f(G(z*))`` the method
perturbs ``z*`` into ``N`` starts and descends, jointly over all starts,

    sum_i  log p(x_i) + lambda1 * (max(d(x_i, x*), d*) - d*)^2
                      - lambda2 * sum_{j != i} d(x_i, x_j)^2

where ``p`` is the flow density and ``d*`` the distance from ``x*`` to its
k'-th nearest generated sample.  Steps are unconstrained.  An iterate is
only *recorded* when it lies in the real k-NN manifold and within ``d*``
of ``x*``, and only when its own total loss is the lowest feasible value
that start has seen.

Several references can be optimized in one batched graph.  Their losses
are additive and Adam acts elementwise, so each reference follows exactly
the trajectory it would follow alone; results depend only on how
references are grouped into batches, which callers keep fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from raregen.errors import ContractError, DegenerateBoundaryError, NumericError
from raregen.flow import FlowModel
from raregen.knn import KnnManifold
from raregen.numerics import AdamState, StepLR, adam_step
from raregen.numerics import tape as T
from raregen.world import FeatureExtractor, ToyGenerator, extract, generate

METRICS = ("euclidean", "l1", "cosine")
VARIANTS = ("rare", "rare+sim", "full")
DEGENERATE_RADIUS = 1e-9


@dataclass(frozen=True)
class OptimizerConfig:
    lambda1: float = 30.0
    lambda2: float = 0.002
    sigma: float = 0.1
    k_prime: int = 100
    n_starts: int = 10
    max_epochs: int = 200
    base_lr: float = 0.02
    step_size: int = 50
    gamma: float = 0.9
    metric: str = "euclidean"

    def __post_init__(self):
        if not (math.isfinite(self.lambda1) and math.isfinite(self.lambda2)) or self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError(f"loss weights must be finite and non-negative, got {self.lambda1}, {self.lambda2}")
        if not self.sigma > 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")
        if self.k_prime < 1 or self.n_starts < 1 or self.max_epochs < 0:
            raise ContractError("k_prime and n_starts must be >= 1 and max_epochs >= 0")
        if self.metric not in METRICS:
            raise ContractError(f"metric must be one of {METRICS}, got {self.metric!r}")

    def variant(self, name: str) -> "OptimizerConfig":
        """The ablation variants: log-likelihood only, plus similarity, or the full objective."""
        if name == "rare":
            return replace(self, lambda1=0.0, lambda2=0.0)
        if name == "rare+sim":
            return replace(self, lambda2=0.0)
        if name == "full":
            return self
        raise ContractError(f"unknown variant {name!r}; expected one of {VARIANTS}")


# -- distances and loss terms ------------------------------------------------------


def distance(a, b, metric: str = "euclidean"):
    """Row-wise distance between broadcastable arrays/nodes (last axis is the feature axis)."""
    diff = T.as_node(a) - b
    if metric == "euclidean":
        return T.sqrt(T.sum_(T.square(diff), axis=-1))
    if metric == "l1":
        return T.sum_(T.abs_(diff), axis=-1)
    if metric == "cosine":
        a, b = T.as_node(a), T.as_node(b)
        dot = T.sum_(a * b, axis=-1)
        norms = T.sqrt(T.sum_(T.square(a), axis=-1) * T.sum_(T.square(b), axis=-1))
        return 1.0 - dot / norms
    raise ContractError(f"unknown metric {metric!r}")


def _squared_pairwise(X, metric: str):
    """``(..., N, N)`` squared distances between the rows of ``X`` (``(..., N, n)``), zero diagonal."""
    X = T.as_node(X)
    n_rows, dim = X.shape[-2], X.shape[-1]
    lead = X.shape[:-2]
    left = T.reshape(X, lead + (n_rows, 1, dim))
    right = T.reshape(X, lead + (1, n_rows, dim))
    if metric == "euclidean":
        sq = T.sum_(T.square(left - right), axis=-1)
    else:
        sq = T.square(distance(left, right, metric))
    return sq * (1.0 - np.eye(n_rows))


def loss_sim(x, x_star, d_star, metric: str = "euclidean"):
    """``(max(d, d*) - d*)^2``: zero inside the boundary, squared overshoot outside."""
    d = distance(x, x_star, metric)
    out = T.square(T.maximum(d, d_star) - d_star)
    return out if isinstance(x, T.Node) else out.value


def loss_div(i, X, metric: str = "euclidean"):
    """``-sum_{j != i} d(x_i, x_j)^2`` for the ``i``-th row of ``X``."""
    sq = _squared_pairwise(X, metric)
    out = -T.sum_(sq[i])
    return out if isinstance(X, T.Node) else float(out.value)


def penalizing_boundary(x_star, fake_set, k_prime: int, exclude: Optional[int] = None, metric: str = "euclidean") -> float:
    """Distance from ``x_star`` to its ``k_prime``-th nearest fake sample.

    ``x_star`` itself is left out: the row ``exclude`` if given, otherwise
    the first row exactly equal to ``x_star``.  A boundary at or below
    1e-9 (duplicates of ``x_star``) raises :class:`DegenerateBoundaryError`.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    fakes = np.asarray(fake_set, dtype=np.float64)
    if exclude is None:
        same = np.flatnonzero(np.all(fakes == x_star, axis=1))
        exclude = int(same[0]) if same.size else None
    d = np.asarray(distance(fakes, x_star, metric).value)
    if exclude is not None:
        d = np.delete(d, exclude)
    if k_prime < 1 or d.size < k_prime:
        raise ContractError(f"k'={k_prime} needs at least {k_prime} other fakes, got {d.size}")
    radius = float(np.partition(d, k_prime - 1)[k_prime - 1])
    if radius <= DEGENERATE_RADIUS:
        raise DegenerateBoundaryError(f"penalizing boundary {radius:.3g} is degenerate (duplicate fakes)")
    return radius


def init_starts(z_star, n_starts: int, sigma: float, seed) -> np.ndarray:
    """``n_starts`` draws of ``z* + N(0, sigma^2 I)``."""
    if n_starts < 1 or not sigma > 0:
        raise ContractError("need n_starts >= 1 and sigma > 0")
    z_star = np.asarray(z_star, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return z_star + sigma * rng.standard_normal((n_starts,) + z_star.shape)


# -- contexts and results ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReferenceContext:
    z_star: np.ndarray
    x_star: np.ndarray
    d_star: float
    real_manifold: KnnManifold
    fake_set: np.ndarray
    index: int = 0

    def __post_init__(self):
        if not self.d_star > DEGENERATE_RADIUS:
            raise DegenerateBoundaryError(f"penalizing boundary {self.d_star:.3g} is degenerate")


def make_context(z_star, G: ToyGenerator, f: FeatureExtractor, fake_set, real_manifold: KnnManifold,
                 k_prime: int, index: int = 0, exclude: Optional[int] = None, metric: str = "euclidean") -> ReferenceContext:
    z_star = np.asarray(z_star, dtype=np.float64)
    x_star = extract(f, generate(G, z_star))
    d_star = penalizing_boundary(x_star, fake_set, k_prime, exclude=exclude, metric=metric)
    return ReferenceContext(z_star, x_star, d_star, real_manifold, fake_set, index)


@dataclass(frozen=True)
class LossBreakdown:
    l_rare: float
    l_sim: float
    l_div: float
    total: float


@dataclass
class StartResult:
    feasible: bool
    best_latent: Optional[np.ndarray] = None
    best_feature: Optional[np.ndarray] = None
    best_loss: Optional[LossBreakdown] = None
    best_epoch: Optional[int] = None


@dataclass
class OptimizationResult:
    context: ReferenceContext
    starts: list
    final_latents: Optional[np.ndarray] = None  # (N, m) iterate after the last step
    trace: Optional[np.ndarray] = None  # (epochs + 1, N) total loss of every iterate
    feasible_trace: Optional[np.ndarray] = None  # (epochs + 1, N) feasibility of every iterate

    @property
    def any_feasible(self) -> bool:
        return any(s.feasible for s in self.starts)


@dataclass
class LossTerms:
    """Per-start loss terms of one evaluation, shape ``(R, N)`` each."""

    total: T.Node  # scalar sum used for the gradient
    l_rare: np.ndarray
    l_sim: np.ndarray
    l_div: np.ndarray
    per_start: np.ndarray
    features: np.ndarray  # (R, N, n)
    ref_distance: np.ndarray  # (R, N)


def objective(Z, x_stars, d_stars, config: OptimizerConfig, G: ToyGenerator, f: FeatureExtractor, flow: FlowModel) -> LossTerms:
    """Evaluate the summed objective for latents ``Z`` of shape ``(R, N, m)``."""
    Z = T.as_node(Z)
    R, N, m = Z.shape
    X = extract(f, generate(G, T.reshape(Z, (R * N, m))))
    n = X.shape[-1]
    rare = T.reshape(flow.log_prob(X), (R, N))
    X3 = T.reshape(X, (R, N, n))
    d_ref = distance(X3, np.asarray(x_stars)[:, None, :], config.metric)
    floor = np.asarray(d_stars, dtype=np.float64)[:, None]
    sim = T.square(T.maximum(d_ref, floor) - floor)
    div = -T.sum_(_squared_pairwise(X3, config.metric), axis=-1)
    per_start = rare + sim * config.lambda1 + div * config.lambda2
    return LossTerms(
        total=T.sum_(per_start),
        l_rare=rare.value,
        l_sim=sim.value,
        l_div=div.value,
        per_start=per_start.value,
        features=X3.value,
        ref_distance=d_ref.value,
    )


def optimize_references(contexts: Sequence[ReferenceContext], config: OptimizerConfig, G: ToyGenerator,
                        f: FeatureExtractor, flow: FlowModel, seeds: Sequence, keep_trace: bool = False) -> list:
    """Optimize several references in one batched graph; one result per context."""
    if len(contexts) != len(seeds):
        raise ContractError("need one seed per reference")
    if not contexts:
        return []
    R, N = len(contexts), config.n_starts
    Z = np.stack([init_starts(c.z_star, N, config.sigma, s) for c, s in zip(contexts, seeds)])
    x_stars = np.stack([c.x_star for c in contexts])
    d_stars = np.array([c.d_star for c in contexts])
    schedule = StepLR(config.base_lr, config.step_size, config.gamma)
    state = AdamState()

    best_total = np.full((R, N), np.inf)
    best = [[StartResult(False) for _ in range(N)] for _ in range(R)]
    traces, feas_traces = [], []

    for epoch in range(config.max_epochs + 1):
        leaf = T.variable(Z, name="latents")
        try:
            terms = objective(leaf, x_stars, d_stars, config, G, f, flow)
            if not np.all(np.isfinite(terms.per_start)):
                r, i = np.argwhere(~np.isfinite(terms.per_start))[0]
                raise NumericError(f"non-finite loss for start {i}")
        except NumericError as exc:
            bad = [c.index for c in contexts]
            raise NumericError(f"epoch {epoch}, references {bad}: {exc}") from exc

        flat = terms.features.reshape(R * N, -1)
        inside = np.zeros(R * N, dtype=bool)
        for r, ctx in enumerate(contexts):
            rows = slice(r * N, (r + 1) * N)
            inside[rows] = ctx.real_manifold.contains(flat[rows])
        feasible = inside.reshape(R, N) & (terms.ref_distance <= d_stars[:, None])
        improved = feasible & (terms.per_start < best_total)
        for r, i in zip(*np.nonzero(improved)):
            best_total[r, i] = terms.per_start[r, i]
            best[r][i] = StartResult(
                feasible=True,
                best_latent=Z[r, i].copy(),
                best_feature=terms.features[r, i].copy(),
                best_loss=LossBreakdown(
                    float(terms.l_rare[r, i]), float(terms.l_sim[r, i]), float(terms.l_div[r, i]), float(terms.per_start[r, i])
                ),
                best_epoch=epoch,
            )
        if keep_trace:
            traces.append(terms.per_start.copy())
            feas_traces.append(feasible.copy())
        if epoch == config.max_epochs:
            break
        (g,) = T.grad(terms.total, [leaf])
        (Z,), state = adam_step([Z], [g], state, schedule(epoch))

    results = []
    for r, ctx in enumerate(contexts):
        results.append(
            OptimizationResult(
                context=ctx,
                starts=best[r],
                final_latents=Z[r].copy(),
                trace=np.stack([t[r] for t in traces]) if keep_trace else None,
                feasible_trace=np.stack([t[r] for t in feas_traces]) if keep_trace else None,
            )
        )
    return results


def optimize_reference(ctx: ReferenceContext, config: OptimizerConfig, G: ToyGenerator, f: FeatureExtractor,
                       flow: FlowModel, seed, keep_trace: bool = False) -> OptimizationResult:
    """Run the multi-start optimization for a single reference."""
    return optimize_references([ctx], config, G, f, flow, [seed], keep_trace=keep_trace)[0]


def assert_feasible(result: OptimizationResult, metric: str = "euclidean") -> None:
    """Raise if any recorded best violates either constraint."""
    ctx = result.context
    for i, s in enumerate(result.starts):
        if not s.feasible:
            continue
        if not ctx.real_manifold.contains(s.best_feature[None])[0]:
            raise ContractError(f"start {i}: recorded best lies outside the real manifold")
        if float(distance(s.best_feature, ctx.x_star, metric).value) > ctx.d_star:
            raise ContractError(f"start {i}: recorded best lies beyond the penalizing boundary")

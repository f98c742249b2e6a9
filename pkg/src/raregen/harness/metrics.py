"""Evaluation metrics: correlation, Fréchet distance, diversity, sign tests and reports."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from raregen.errors import ContractError
from raregen.knn import KnnManifold, build_manifold, precision, recall
from raregen.numerics import psd_sqrt

REGULARIZER = 1e-6


def pearson(xs, ys) -> float:
    """Sample Pearson correlation, computed from centred values (two passes)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ContractError(f"need two equal-length 1-D sequences of at least 3 values, got {x.shape} and {y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ContractError("zero variance: correlation undefined")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def _covariance(x: np.ndarray, label: str) -> np.ndarray:
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if x.shape[0] < x.shape[1] + 1 or np.linalg.eigvalsh(cov).min() <= 1e-12 * max(1.0, float(np.trace(cov))):
        warnings.warn(f"degenerate covariance for {label}; adding {REGULARIZER:g} * I", RuntimeWarning, stacklevel=3)
        cov = cov + REGULARIZER * np.eye(cov.shape[0])
    return cov


def frechet_distance(a, b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    ``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``; the
    symmetric product has the same trace root as ``S_a S_b`` but stays in
    the symmetric PSD cone.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"feature sets must be 2-D with equal width, got {a.shape} and {b.shape}")
    if min(len(a), len(b)) < 2:
        raise ContractError("each set needs at least 2 points")
    sa, sb = _covariance(a, "first set"), _covariance(b, "second set")
    root_a = psd_sqrt(sa)
    cross = root_a @ sb @ root_a
    cross = psd_sqrt(0.5 * (cross + cross.T))
    diff = a.mean(axis=0) - b.mean(axis=0)
    return max(0.0, float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross)))


def mean_pairwise_distance(points, n_pairs: Optional[int] = 10_000, seed=0) -> float:
    """Mean Euclidean distance over random distinct pairs.

    Uses every pair when there are no more than ``n_pairs`` of them, or when
    ``n_pairs`` is ``None``.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ContractError("need at least two points")
    total = n * (n - 1) // 2
    if n_pairs is None or total <= n_pairs:
        acc = 0.0
        for i in range(n - 1):
            acc += float(np.sqrt(((x[i + 1 :] - x[i]) ** 2).sum(axis=1)).sum())
        return acc / total
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    return float(np.mean(np.sqrt(((x[i] - x[j]) ** 2).sum(axis=1))))


@dataclass(frozen=True)
class SignTest:
    wins: int
    losses: int
    ties: int
    p_value: float

    @property
    def n(self) -> int:
        return self.wins + self.losses


def sign_test(treated, control) -> SignTest:
    """One-sided paired sign test of ``treated > control``; ties and NaN pairs are dropped."""
    t = np.asarray(treated, dtype=np.float64)
    c = np.asarray(control, dtype=np.float64)
    ok = np.isfinite(t) & np.isfinite(c)
    wins = int(np.sum(t[ok] > c[ok]))
    losses = int(np.sum(t[ok] < c[ok]))
    ties = int(np.sum(ok)) - wins - losses
    n = wins + losses
    p = 1.0 if n == 0 else sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n
    return SignTest(wins, losses, ties, float(p))


@dataclass(frozen=True)
class MetricsReport:
    n_samples: int
    n_real: int
    mean_rarity: Optional[float]  # over defined scores only
    undefined_fraction: float
    precision: float
    recall: Optional[float]
    diversity: Optional[float]
    frechet: Optional[float]
    manifold_digest: str

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_report(samples, real, real_manifold: KnnManifold, k: int = 3, n_pairs: int = 10_000, seed=0) -> MetricsReport:
    """Rarity, precision/recall, diversity and Fréchet distance of ``samples`` against ``real``."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or len(samples) == 0:
        raise ContractError("no samples to evaluate")
    scores = real_manifold.rarity(samples)
    defined = scores.compressed()
    rec = recall(real, build_manifold(samples, k)) if len(samples) > k else None
    fd = frechet_distance(samples, real) if len(samples) >= 2 else None
    return MetricsReport(
        n_samples=len(samples),
        n_real=len(real),
        mean_rarity=float(defined.mean()) if defined.size else None,
        undefined_fraction=float(np.mean(scores.mask)),
        precision=precision(samples, real_manifold),
        recall=rec,
        diversity=mean_pairwise_distance(samples, n_pairs, seed) if len(samples) >= 2 else None,
        frechet=fd,
        manifold_digest=real_manifold.digest(),
    )

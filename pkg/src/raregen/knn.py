"""k-NN manifolds: ball unions with k-th-neighbour radii, and the metrics built on them.

A manifold is the union of closed balls centred at each reference point,
each with radius equal to the distance to that point's k-th nearest *other*
reference point.  Precision, recall and the rarity score are all defined
by membership in such a union.

Distances are exact Euclidean distances computed from coordinate
differences.  The bulk membership query screens candidates with the
faster Gram-matrix expansion and re-evaluates anything near a ball
boundary exactly, so every decision equals the brute-force one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from raregen.errors import ContractError

_CHUNK_ELEMENTS = 2_000_000


def _as_points(x, name="points") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        return arr.reshape(0, 0)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ContractError(f"{name} must be a 2-D array of shape (count, dim), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite coordinates")
    return arr


def pairwise_distances(a, b) -> np.ndarray:
    """Exact Euclidean distance matrix, shape ``(len(a), len(b))``."""
    a = _as_points(a, "a")
    b = _as_points(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((a.shape[0], b.shape[0]))
    rows = max(1, _CHUNK_ELEMENTS // max(1, b.shape[0] * b.shape[1]))
    for start in range(0, a.shape[0], rows):
        diff = a[start : start + rows, None, :] - b[None, :, :]
        out[start : start + rows] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def knnd(x, X, k: int, exclude: Optional[int] = None) -> float:
    """Distance from ``x`` to its k-th nearest point of ``X``.

    ``exclude`` drops one index of ``X`` (the query itself when it is a
    member).  Raises :class:`ContractError` when fewer than ``k`` candidates
    remain.
    """
    X = _as_points(X, "X")
    d = pairwise_distances(np.asarray(x, dtype=np.float64)[None, :], X)[0]
    if exclude is not None:
        d = np.delete(d, exclude)
    if k < 1 or k > d.size:
        raise ContractError(f"k={k} but only {d.size} neighbours available")
    return float(np.sort(d, kind="stable")[k - 1])


def knn_radii(X, k: int) -> np.ndarray:
    """Self-excluded k-NN distance for every point of ``X``."""
    X = _as_points(X, "X")
    n = X.shape[0]
    if k < 1 or n < k + 1:
        raise ContractError(f"need at least k+1={k + 1} points for k={k}, got {n}")
    radii = np.empty(n)
    rows = max(1, _CHUNK_ELEMENTS // max(1, n * X.shape[1]))
    for start in range(0, n, rows):
        block = pairwise_distances(X[start : start + rows], X)
        idx = np.arange(block.shape[0])
        block[idx, start + idx] = np.inf
        radii[start : start + rows] = np.partition(block, k - 1, axis=1)[:, k - 1]
    return radii


@dataclass(frozen=True, eq=False)
class KnnManifold:
    """Union of closed k-NN balls around ``centers``."""

    centers: np.ndarray
    radii: np.ndarray
    k: int

    def __post_init__(self):
        if len(self.radii) != len(self.centers):
            raise ContractError("radii and centers differ in length")
        if np.any(self.radii < 0):
            raise ContractError("negative radius")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def digest(self) -> str:
        """Content hash; two manifolds with equal digests answer every query identically."""
        h = hashlib.sha256()
        h.update(np.int64(self.k).tobytes())
        h.update(np.ascontiguousarray(self.centers, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.radii, dtype="<f8").tobytes())
        return h.hexdigest()

    def _best_containing(self, points: np.ndarray) -> np.ndarray:
        """Index of the smallest-radius ball containing each point, or -1."""
        points = _as_points(points, "query")
        if points.shape[1] != self.dim:
            raise ContractError(f"query dimension {points.shape[1]} != manifold dimension {self.dim}")
        c = self.centers
        c_sq = np.einsum("ij,ij->i", c, c)
        r_sq = self.radii**2
        out = np.full(points.shape[0], -1, dtype=np.int64)
        rows = max(1, _CHUNK_ELEMENTS // max(1, c.shape[0]))
        for start in range(0, points.shape[0], rows):
            q = points[start : start + rows]
            q_sq = np.einsum("ij,ij->i", q, q)
            approx = q_sq[:, None] + c_sq[None, :] - 2.0 * (q @ c.T)
            slack = 1e-9 * (q_sq[:, None] + c_sq[None, :] + r_sq[None, :] + 1.0)
            inside = approx <= r_sq[None, :] - slack
            unsure = np.abs(approx - r_sq[None, :]) <= slack
            qi, ci = np.nonzero(unsure)
            if qi.size:
                diff = q[qi] - c[ci]
                exact = np.sqrt(np.einsum("ij,ij->i", diff, diff)) <= self.radii[ci]
                inside[qi, ci] = exact
            masked = np.where(inside, self.radii[None, :], np.inf)
            best = np.argmin(masked, axis=1)
            found = np.isfinite(masked[np.arange(q.shape[0]), best])
            out[start : start + rows] = np.where(found, best, -1)
        return out

    def contains(self, points) -> np.ndarray:
        """Boolean membership for each row of ``points`` (closed balls)."""
        return self._best_containing(points) >= 0

    def rarity(self, points) -> np.ma.MaskedArray:
        """Rarity score per point; undefined scores are masked, never 0 or NaN."""
        best = self._best_containing(points)
        values = np.where(best >= 0, self.radii[np.maximum(best, 0)], 0.0)
        return np.ma.MaskedArray(values, mask=best < 0)


def build_manifold(X, k: int) -> KnnManifold:
    X = _as_points(X, "X")
    return KnnManifold(centers=X.copy(), radii=knn_radii(X, k), k=k)


def contains(manifold: KnnManifold, x) -> bool:
    return bool(manifold.contains(np.asarray(x, dtype=np.float64)[None, :])[0])


def rarity_score(x, manifold: KnnManifold) -> Optional[float]:
    """Smallest radius among the balls containing ``x``; ``None`` when no ball does."""
    score = manifold.rarity(np.asarray(x, dtype=np.float64)[None, :])
    return None if score.mask[0] else float(score.data[0])


def precision(fake, real_manifold: KnnManifold) -> float:
    """Fraction of fake points inside the real manifold."""
    fake = _as_points(fake, "fake")
    if fake.shape[0] == 0:
        raise ContractError("empty fake set")
    return float(np.mean(real_manifold.contains(fake)))


def recall(real, fake_manifold: KnnManifold) -> float:
    """Fraction of real points inside the fake manifold."""
    real = _as_points(real, "real")
    if real.shape[0] == 0:
        raise ContractError("empty real set")
    return float(np.mean(fake_manifold.contains(real)))

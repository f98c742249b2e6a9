"""A synthetic world with a known data distribution.

The world bundles three things:

* a Gaussian mixture over data space with one or more low-weight "rare"
  components, plus its exact log-density;
* a smooth generator ``G(z)`` that gates between per-component affine
  maps with a sharpened softmax, so low-weight components receive less
  latent mass than they should (a controllable form of mode collapse);
* a fixed feature extractor ``f(p) = scale * squash(W p + b)``.

Both maps accept tape nodes so gradients flow from features back to
latents.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from raregen.errors import ContractError
from raregen.numerics import psd_sqrt
from raregen.numerics import tape as T

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

RARE_WEIGHT = 0.1


# -- mixture -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w, mu, cov = self.weights, self.means, self.covs
        if w.ndim != 1 or mu.shape[0] != w.size or cov.shape != (w.size, mu.shape[1], mu.shape[1]):
            raise ContractError(f"inconsistent mixture shapes {w.shape}, {mu.shape}, {cov.shape}")
        if np.any(w <= 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise ContractError(f"weights must lie in (0, 1] and sum to 1, got {w}")
        for c in cov:
            if np.max(np.abs(c - c.T)) > 1e-12 or np.linalg.eigvalsh(c).min() < 0:
                raise ContractError("component covariance is not symmetric PSD")

    @property
    def data_dim(self) -> int:
        return self.means.shape[1]

    @property
    def rare(self) -> np.ndarray:
        """Indices of components with weight <= 0.1."""
        return np.flatnonzero(self.weights <= RARE_WEIGHT)


def sample_real(spec: MixtureSpec, count: int, seed, return_labels: bool = False):
    """Draw ``count`` i.i.d. points from the mixture."""
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    labels = rng.choice(spec.weights.size, size=count, p=spec.weights)
    noise = rng.standard_normal((count, spec.data_dim))
    roots = np.stack([psd_sqrt(c) for c in spec.covs])
    points = spec.means[labels] + np.einsum("nij,nj->ni", roots[labels], noise)
    return (points, labels) if return_labels else points


def oracle_logpdf(spec: MixtureSpec, points) -> np.ndarray:
    """Exact mixture log-density, ``log sum_k w_k N(p; mu_k, Sigma_k)``.

    Accepts one point or a batch; raises :class:`ContractError` for a
    singular covariance.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if p.shape[1] != spec.data_dim:
        raise ContractError(f"point dimension {p.shape[1]} != {spec.data_dim}")
    terms = []
    for w, mu, cov in zip(spec.weights, spec.means, spec.covs):
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ContractError("singular component covariance") from exc
        diag = np.diag(chol)
        if diag.min() <= 1e-300:
            raise ContractError("singular component covariance")
        sol = np.linalg.solve(chol, (p - mu).T)
        maha = np.sum(sol * sol, axis=0)
        terms.append(np.log(w) - 0.5 * maha - np.sum(np.log(diag)) - 0.5 * spec.data_dim * np.log(2 * np.pi))
    terms = np.stack(terms)
    top = terms.max(axis=0)
    out = top + np.log(np.exp(terms - top).sum(axis=0))
    return out if np.ndim(points) > 1 else out[0]


# -- generator and extractor ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ToyGenerator:
    """``G(z) = sum_k softmax_k(alpha * (u_k . z[:g] + b_k)) * (mu_k + A_k z[g:])``."""

    gate_dirs: np.ndarray  # (K, g)
    gate_bias: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    maps: np.ndarray  # (K, D, m - g)
    alpha: float

    @property
    def latent_dim(self) -> int:
        return self.gate_dirs.shape[1] + self.maps.shape[2]

    @property
    def gating_dim(self) -> int:
        return self.gate_dirs.shape[1]

    @property
    def data_dim(self) -> int:
        return self.means.shape[1]

    def gates(self, z):
        z = T.as_node(z)
        g = self.gating_dim
        return T.softmax((z[:, :g] @ self.gate_dirs.T + self.gate_bias) * self.alpha, axis=-1)

    def __call__(self, z):
        return generate(self, z)


def generate(G: ToyGenerator, z):
    """Map latents ``(batch, m)`` (array or node) to data points ``(batch, D)``."""
    node = T.as_node(z)
    squeeze = node.ndim == 1
    if squeeze:
        node = T.reshape(node, (1, -1))
    if node.shape[1] != G.latent_dim:
        raise ContractError(f"latent dimension {node.shape[1]} != {G.latent_dim}")
    K, D, tail = G.maps.shape
    gates = G.gates(node)  # (B, K)
    flat_maps = np.transpose(G.maps, (2, 0, 1)).reshape(tail, K * D)
    modes = T.reshape(node[:, G.gating_dim :] @ flat_maps, (-1, K, D)) + G.means
    out = T.sum_(modes * T.reshape(gates, (-1, K, 1)), axis=1)
    if squeeze:
        out = T.reshape(out, (D,))
    return out if isinstance(z, T.Node) else out.value


SQUASHES = {"tanh": T.tanh, "identity": lambda v: v}


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    """``f(p) = scale * squash(W p + b)``; ``W`` has shape ``(n, D)``."""

    weight: np.ndarray
    bias: np.ndarray
    squash: str = "tanh"
    scale: float = 1.0

    def __post_init__(self):
        if self.squash not in SQUASHES:
            raise ContractError(f"unknown squash {self.squash!r}")

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, points):
        return extract(self, points)


def extract(f: FeatureExtractor, points):
    node = T.as_node(points)
    if node.shape[-1] != f.weight.shape[1]:
        raise ContractError(f"data dimension {node.shape[-1]} != {f.weight.shape[1]}")
    if node.ndim == 1:
        pre = T.reshape(node, (1, -1)) @ f.weight.T + f.bias
        out = T.reshape(SQUASHES[f.squash](pre) * f.scale, (f.feature_dim,))
    else:
        out = SQUASHES[f.squash](node @ f.weight.T + f.bias) * f.scale
    return out if isinstance(points, T.Node) else out.value


# -- world configuration ---------------------------------------------------------


@dataclass(frozen=True)
class ComponentConfig:
    weight: float
    mean: tuple
    cov: tuple
    gate_direction: tuple
    gate_bias: float = 0.0


@dataclass(frozen=True)
class WorldConfig:
    components: tuple
    latent_dim: int = 8
    gating_dim: int = 2
    alpha: float = 8.0
    feature_dim: int = 8
    feature_scale: float = 10.0
    squash: str = "tanh"
    extractor_gain: float = 0.8
    generator_seed: int = 1
    extractor_seed: int = 2

    @property
    def data_dim(self) -> int:
        return len(self.components[0].mean)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["components"] = [
            {**c, "mean": list(c["mean"]), "cov": [list(r) for r in c["cov"]], "gate_direction": list(c["gate_direction"])}
            for c in d["components"]
        ]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _component_from_dict(raw: dict, dim_hint: Optional[int]) -> ComponentConfig:
    mean = tuple(float(v) for v in raw["mean"])
    dim = len(mean)
    if "cov" in raw:
        cov = np.asarray(raw["cov"], dtype=np.float64)
    elif "std" in raw:
        cov = float(raw["std"]) ** 2 * np.eye(dim)
    else:
        raise ContractError("component needs either 'cov' or 'std'")
    return ComponentConfig(
        weight=float(raw["weight"]),
        mean=mean,
        cov=tuple(tuple(float(v) for v in row) for row in cov),
        gate_direction=tuple(float(v) for v in raw["gate_direction"]),
        gate_bias=float(raw.get("gate_bias", 0.0)),
    )


def world_config_from_dict(raw: dict) -> WorldConfig:
    raw = dict(raw)
    comps = tuple(_component_from_dict(c, None) for c in raw.pop("components"))
    known = {f for f in WorldConfig.__dataclass_fields__} - {"components"}
    unknown = set(raw) - known
    if unknown:
        raise ContractError(f"unknown world settings: {sorted(unknown)}")
    return WorldConfig(components=comps, **raw)


def load_world_config(path) -> WorldConfig:
    """Read a world description from ``.json`` or ``.toml``.

    A TOML file may hold the world at top level or under a ``[world]`` table.
    """
    path = Path(path)
    text = path.read_text()
    raw = tomllib.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
    return world_config_from_dict(raw.get("world", raw))


def default_world_config() -> WorldConfig:
    """Eight-dimensional world with one common and two rare components."""
    dim = 8

    def axis(i, length):
        v = [0.0] * dim
        v[i] = length
        return v

    return world_config_from_dict(
        {
            "components": [
                {"weight": 0.85, "mean": [0.0] * dim, "std": 0.3, "gate_direction": [0.0, 0.0], "gate_bias": 0.0},
                {"weight": 0.10, "mean": axis(0, 2.4), "std": 0.3, "gate_direction": [1.0, 0.0], "gate_bias": -1.5},
                {"weight": 0.05, "mean": axis(1, 2.4), "std": 0.3, "gate_direction": [0.0, 1.0], "gate_bias": -2.0},
            ],
        }
    )


@dataclass(frozen=True, eq=False)
class ToyWorld:
    config: WorldConfig
    mixture: MixtureSpec
    generator: ToyGenerator
    extractor: FeatureExtractor

    @classmethod
    def from_config(cls, config: WorldConfig) -> "ToyWorld":
        comps = config.components
        dim = config.data_dim
        m, g = config.latent_dim, config.gating_dim
        if not 0 < g <= m:
            raise ContractError(f"gating_dim must be in 1..latent_dim, got {g}")
        if any(len(c.mean) != dim or len(c.gate_direction) != g for c in comps):
            raise ContractError("components disagree on dimensions")
        mixture = MixtureSpec(
            weights=np.array([c.weight for c in comps]),
            means=np.array([c.mean for c in comps]),
            covs=np.array([c.cov for c in comps]),
        )
        gen_rng = np.random.default_rng(config.generator_seed)
        maps = []
        for c in comps:
            # affine map whose image covariance matches the component's covariance
            # restricted to a random (m - g)-dimensional subspace
            q, _ = np.linalg.qr(gen_rng.standard_normal((dim, dim)))
            basis = q[:, : m - g] if m - g <= dim else np.hstack([q, np.zeros((dim, m - g - dim))])
            maps.append(psd_sqrt(np.asarray(c.cov)) @ basis)
        generator = ToyGenerator(
            gate_dirs=np.array([c.gate_direction for c in comps]),
            gate_bias=np.array([c.gate_bias for c in comps]),
            means=mixture.means.copy(),
            maps=np.stack(maps),
            alpha=float(config.alpha),
        )
        ext_rng = np.random.default_rng(config.extractor_seed)
        extractor = FeatureExtractor(
            weight=config.extractor_gain * ext_rng.standard_normal((config.feature_dim, dim)) / np.sqrt(dim),
            bias=0.1 * ext_rng.standard_normal(config.feature_dim),
            squash=config.squash,
            scale=float(config.feature_scale),
        )
        return cls(config, mixture, generator, extractor)

    @property
    def latent_dim(self) -> int:
        return self.generator.latent_dim

    def features(self, z):
        """``f(G(z))`` for an array or a tape node."""
        return extract(self.extractor, generate(self.generator, z))

    def sample_latents(self, count: int, seed) -> np.ndarray:
        return np.random.default_rng(seed).standard_normal((count, self.latent_dim))

    def real_features(self, count: int, seed) -> np.ndarray:
        return extract(self.extractor, sample_real(self.mixture, count, seed))

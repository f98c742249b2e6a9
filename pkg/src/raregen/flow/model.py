"""Grouped-Glow normalizing flow over flat feature vectors.

Layout of one block (``C`` channels of length ``L`` at block ``b``)::

    invertible linear over the whole flat vector     (general permutation)
    reshape into C x L                               (grouping, log-det 0)
    repeat flows_per_block times:
        actnorm        per-channel scale and bias
        1x1 linear     C x C matrix shared across the L positions
        affine coupling first C/2 channels condition the last C/2
    split: last C/2 channels leave as latents (not after the final block)

Channels double from block to block (``C_b = groups * 2**b``), so a
4096-wide input with 4 groups gives the 4x1024, 8x256, 16x64, 32x16
layouts.

Inputs are min-max scaled to [0, 1] and then shifted by -1/2 so that the
latent origin sits at the midpoint of the scaler box.  Log-likelihoods are
reported in scaled space; ``FlowModel.log_offset`` converts them to raw
feature units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from raregen.errors import ContractError, NumericError
from raregen.numerics import lu_decompose
from raregen.numerics import tape as T

LOG_2PI = math.log(2.0 * math.pi)
SCALE_SHIFT = 2.0  # coupling scale = logistic(raw + 2) / logistic(2)
_LOG_SIG_SHIFT = -math.log1p(math.exp(-SCALE_SHIFT))
CENTER = 0.5


@dataclass(frozen=True)
class FlowConfig:
    input_dim: int = 8
    n_blocks: int = 2
    flows_per_block: int = 8
    groups: int = 2
    hidden: int = 64

    def __post_init__(self):
        if min(self.input_dim, self.n_blocks, self.flows_per_block, self.groups, self.hidden) < 1:
            raise ContractError(f"all flow sizes must be positive: {self}")
        for b in range(self.n_blocks):
            channels = self.groups * 2**b
            if self.input_dim % 2**b or (self.input_dim // 2**b) % channels or channels % 2:
                raise ContractError(
                    f"block {b}: dimension {self.input_dim / 2**b:g} cannot be grouped into "
                    f"{channels} channels (need divisibility and an even channel count)"
                )

    def layout(self) -> list[tuple[int, int]]:
        """``(channels, length)`` of each block."""
        out = []
        for b in range(self.n_blocks):
            channels = self.groups * 2**b
            out.append((channels, self.input_dim // 2**b // channels))
        return out


@dataclass(frozen=True)
class MinMaxScaler:
    low: np.ndarray
    high: np.ndarray
    eps: float = 1e-6

    @classmethod
    def fit(cls, data, eps: float = 1e-6) -> "MinMaxScaler":
        data = np.asarray(data, dtype=np.float64)
        return cls(low=data.min(axis=0), high=data.max(axis=0), eps=eps)

    @property
    def width(self) -> np.ndarray:
        return self.high - self.low + self.eps

    @property
    def midpoint(self) -> np.ndarray:
        return self.low + CENTER * self.width

    def transform(self, x):
        return (x - self.low) / self.width

    def inverse(self, y):
        return np.asarray(y) * self.width + self.low


# -- layers ---------------------------------------------------------------------


class _Linear:
    """Invertible linear map ``W = P L (U + diag(sign * exp(log_s)))``."""

    kind = "linear"

    def __init__(self, name: str, size: int, positions: int, flat: bool):
        self.name, self.size, self.positions, self.flat = name, size, positions, flat
        self._tril = np.tril(np.ones((size, size)), -1)
        self._triu = np.triu(np.ones((size, size)), 1)

    def param_shapes(self):
        s = self.size
        return {"lower": (s, s), "upper": (s, s), "log_s": (s,)}

    def buffer_shapes(self):
        s = self.size
        return {"perm": (s, s), "sign": (s,)}

    def init(self, rng, identity: bool):
        s = self.size
        if identity:
            return ({"lower": np.zeros((s, s)), "upper": np.zeros((s, s)), "log_s": np.zeros(s)},
                    {"perm": np.eye(s), "sign": np.ones(s)})
        q, _ = np.linalg.qr(rng.standard_normal((s, s)))
        p, lower, upper = lu_decompose(q)
        diag = np.diag(upper)
        return (
            {"lower": lower * self._tril, "upper": upper * self._triu, "log_s": np.log(np.abs(diag))},
            {"perm": p, "sign": np.sign(diag)},
        )

    def matrix(self, p, b):
        lower = T.as_node(p["lower"]) * self._tril + np.eye(self.size)
        upper = T.as_node(p["upper"]) * self._triu + T.reshape(T.exp(p["log_s"]) * b["sign"], (1, -1)) * np.eye(self.size)
        return T.matmul(b["perm"], lower) @ upper

    def forward(self, h, p, b):
        w = self.matrix(p, b)
        out = h @ T.transpose(w) if self.flat else w @ h
        return out, T.sum_(T.as_node(p["log_s"])) * float(self.positions)

    def inverse(self, y, p, b):
        w = self.matrix(p, b).value
        if self.flat:
            return np.linalg.solve(w, y.T).T
        return np.linalg.solve(w, y)


class _ActNorm:
    kind = "actnorm"

    def __init__(self, name: str, channels: int, length: int):
        self.name, self.channels, self.length = name, channels, length

    def param_shapes(self):
        return {"bias": (self.channels,), "logs": (self.channels,)}

    def buffer_shapes(self):
        return {}

    def init(self, rng, identity: bool):
        return {"bias": np.zeros(self.channels), "logs": np.zeros(self.channels)}, {}

    def data_init(self, h: np.ndarray):
        """Parameters giving zero mean and unit variance per channel on ``h``."""
        mean = h.mean(axis=(0, 2))
        std = h.std(axis=(0, 2))
        return {"bias": -mean, "logs": -np.log(std + 1e-6)}

    def forward(self, h, p, b):
        bias = T.reshape(p["bias"], (-1, 1))
        logs = T.reshape(p["logs"], (-1, 1))
        return (h + bias) * T.exp(logs), T.sum_(T.as_node(p["logs"])) * float(self.length)

    def inverse(self, y, p, b):
        return y * np.exp(-np.asarray(p["logs"]))[:, None] - np.asarray(p["bias"])[:, None]


class _Coupling:
    kind = "coupling"

    def __init__(self, name: str, channels: int, length: int, hidden: int):
        self.name, self.channels, self.length, self.hidden = name, channels, length, hidden
        self.half = channels // 2
        self.width = self.half * length

    def param_shapes(self):
        return {
            "w1": (self.width, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, 2 * self.width),
            "b2": (2 * self.width,),
        }

    def buffer_shapes(self):
        return {}

    def init(self, rng, identity: bool):
        return (
            {
                "w1": rng.standard_normal((self.width, self.hidden)) / math.sqrt(self.width),
                "b1": np.zeros(self.hidden),
                "w2": np.zeros((self.hidden, 2 * self.width)),
                "b2": np.zeros(2 * self.width),
            },
            {},
        )

    def _shift_logscale(self, xa, p):
        flat = T.reshape(xa, (-1, self.width))
        hid = T.tanh(flat @ p["w1"] + p["b1"])
        out = hid @ p["w2"] + p["b2"]
        shift = T.reshape(out[:, : self.width], (-1, self.half, self.length))
        raw = T.reshape(out[:, self.width :], (-1, self.half, self.length))
        return shift, T.log_logistic(raw + SCALE_SHIFT) - _LOG_SIG_SHIFT

    def forward(self, h, p, b):
        xa, xb = h[:, : self.half, :], h[:, self.half :, :]
        shift, log_scale = self._shift_logscale(xa, p)
        yb = (xb + shift) * T.exp(log_scale)
        return T.concat([xa, yb], axis=1), T.sum_(T.reshape(log_scale, (-1, self.width)), axis=1)

    def inverse(self, y, p, b):
        xa, yb = y[:, : self.half, :], y[:, self.half :, :]
        shift, log_scale = self._shift_logscale(T.constant(xa), p)
        xb = yb * np.exp(-log_scale.value) - shift.value
        return np.concatenate([xa, xb], axis=1)


# -- model ---------------------------------------------------------------------


@dataclass
class LogProbResult:
    """Scaled-space log-likelihood and the Gaussian codes (one array per split, in order)."""

    logp: np.ndarray
    latents: list
    layer_logdets: dict = field(default_factory=dict)


class FlowModel:
    """Parameter container plus forward and inverse passes.

    ``params`` holds learnable arrays and ``buffers`` the fixed ones
    (permutations, signs), both keyed ``"<layer>.<name>"``.
    """

    def __init__(self, config: FlowConfig, scaler: MinMaxScaler, params: dict, buffers: dict):
        self.config = config
        self.scaler = scaler
        self.params = params
        self.buffers = buffers
        self.blocks = build_layers(config)
        self._keys = {}
        for layer in iter_layers(self.blocks):
            prefix = layer.name + "."
            self._keys[layer.name] = (
                [(n, prefix + n) for n in layer.param_shapes()],
                [(n, prefix + n) for n in layer.buffer_shapes()],
            )

    # construction -----------------------------------------------------------

    @classmethod
    def create(cls, config: FlowConfig, scaler: MinMaxScaler, seed=0, identity: bool = False) -> "FlowModel":
        """Fresh model: seeded random rotations, or exactly the identity map."""
        if len(scaler.low) != config.input_dim:
            raise ContractError(f"scaler dimension {len(scaler.low)} != input_dim {config.input_dim}")
        rng = np.random.default_rng(seed)
        params, buffers = {}, {}
        for layer in iter_layers(build_layers(config)):
            p, b = layer.init(rng, identity)
            params.update({f"{layer.name}.{k}": v for k, v in p.items()})
            buffers.update({f"{layer.name}.{k}": v for k, v in b.items()})
        return cls(config, scaler, params, buffers)

    def copy(self, params: Optional[dict] = None) -> "FlowModel":
        src = self.params if params is None else params
        return FlowModel(
            self.config,
            self.scaler,
            {k: np.array(v, dtype=np.float64) for k, v in src.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    @property
    def log_offset(self) -> float:
        """Add to a scaled-space log-likelihood to get the raw-feature-space value."""
        return float(-np.sum(np.log(self.scaler.width)))

    @property
    def dim(self) -> int:
        return self.config.input_dim

    def _view(self, layer, params):
        pkeys, bkeys = self._keys[layer.name]
        return {n: params[k] for n, k in pkeys}, {n: self.buffers[k] for n, k in bkeys}

    # passes -----------------------------------------------------------------

    def transform(self, x, params: Optional[dict] = None, record: bool = False, on_actnorm=None):
        """Run the flow on ``x`` (array or node, shape ``(B, D)``).

        Returns ``(latents, logdet, layer_logdets)`` where ``logdet`` is a
        per-sample node of shape ``(B,)``.  ``on_actnorm`` lets data-dependent
        initialization overwrite actnorm parameters just before they are used.
        """
        params = self.params if params is None else params
        h = T.as_node(x)
        if h.ndim != 2 or h.shape[1] != self.dim:
            raise ContractError(f"expected input of shape (batch, {self.dim}), got {h.shape}")
        h = (h - self.scaler.low) / self.scaler.width - CENTER
        batch = h.shape[0]
        logdet = T.constant(np.zeros(batch))
        latents, per_layer = [], {}
        last = len(self.blocks) - 1
        for b, (pre, flows, (channels, length)) in enumerate(self.blocks):
            layers = [pre, ("group", channels, length)] + flows
            for layer in layers:
                if isinstance(layer, tuple):
                    h = group(h, channels)
                    continue
                if on_actnorm is not None and layer.kind == "actnorm":
                    on_actnorm(layer, h.value)
                p, buf = self._view(layer, params)
                h, ld = layer.forward(h, p, buf)
                if not np.all(np.isfinite(h.value)):
                    raise NumericError(f"non-finite output in layer {layer.name}")
                logdet = logdet + ld
                if record:
                    per_layer[layer.name] = np.broadcast_to(ld.value, (batch,)).copy()
            if b < last:
                h, released = split(h)
                latents.append(ungroup(released))
                h = ungroup(h)
            else:
                latents.append(ungroup(h))
        return latents, logdet, per_layer

    def log_prob(self, x, params: Optional[dict] = None):
        """Per-sample log-likelihood node, shape ``(B,)``."""
        latents, logdet, _ = self.transform(x, params)
        return logdet + sum(gaussian_logpdf(z) for z in latents)

    def inverse(self, latents) -> np.ndarray:
        """Map a list of latent arrays (one per split, batched) back to raw features."""
        latents = [np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in latents]
        if len(latents) != len(self.blocks):
            raise ContractError(f"expected {len(self.blocks)} latent parts, got {len(latents)}")
        batch = latents[0].shape[0]
        h = None
        for b in reversed(range(len(self.blocks))):
            pre, flows, (channels, length) = self.blocks[b]
            z = latents[b]
            if b == len(self.blocks) - 1:
                if z.shape[1] != channels * length:
                    raise ContractError(f"latent part {b} has width {z.shape[1]}, expected {channels * length}")
                h = z.reshape(batch, channels, length)
            else:
                half = channels // 2
                if z.shape[1] != half * length:
                    raise ContractError(f"latent part {b} has width {z.shape[1]}, expected {half * length}")
                h = np.concatenate([h.reshape(batch, half, length), z.reshape(batch, half, length)], axis=1)
            for layer in reversed(flows):
                p, buf = self._view(layer, self.params)
                h = layer.inverse(h, p, buf)
                if not np.all(np.isfinite(h)):
                    raise NumericError(f"non-finite value inverting layer {layer.name}")
            h = h.reshape(batch, -1)
            p, buf = self._view(pre, self.params)
            h = pre.inverse(h, p, buf)
        return self.scaler.inverse(h + CENTER)


def group(x, groups: int):
    """Reshape ``(..., D)`` into ``groups`` channel rows ``(..., groups, D // groups)``; log-det 0."""
    shape = np.shape(x.value if isinstance(x, T.Node) else x)
    if groups < 1 or shape[-1] % groups:
        raise ContractError(f"dimension {shape[-1]} is not divisible into {groups} groups")
    new = shape[:-1] + (groups, shape[-1] // groups)
    return T.reshape(x, new) if isinstance(x, T.Node) else np.reshape(x, new)


def ungroup(h):
    """Inverse of :func:`group`."""
    shape = np.shape(h.value if isinstance(h, T.Node) else h)
    new = shape[:-2] + (shape[-2] * shape[-1],)
    return T.reshape(h, new) if isinstance(h, T.Node) else np.reshape(h, new)


def split(h):
    """Halve the channel rows: ``(kept, released)`` with the released half going to the prior."""
    channels = (h.shape if isinstance(h, T.Node) else np.shape(h))[-2]
    if channels % 2:
        raise ContractError(f"cannot split {channels} channel rows in half")
    half = channels // 2
    return h[..., :half, :], h[..., half:, :]


def gaussian_logpdf(z):
    """Standard-normal log-density summed over the last axis."""
    z = T.as_node(z)
    return T.sum_(T.square(z), axis=-1) * -0.5 - 0.5 * LOG_2PI * z.shape[-1]


def build_layers(config: FlowConfig):
    blocks = []
    for b, (channels, length) in enumerate(config.layout()):
        dim = channels * length
        pre = _Linear(f"b{b}.pre", dim, positions=1, flat=True)
        flows = []
        for i in range(config.flows_per_block):
            tag = f"b{b}.f{i}"
            flows.append(_ActNorm(f"{tag}.actnorm", channels, length))
            flows.append(_Linear(f"{tag}.conv", channels, positions=length, flat=False))
            flows.append(_Coupling(f"{tag}.coupling", channels, length, config.hidden))
        blocks.append((pre, flows, (channels, length)))
    return blocks


def iter_layers(blocks):
    for pre, flows, _ in blocks:
        yield pre
        yield from flows


# -- public operations ----------------------------------------------------------


def forward_logprob(model: FlowModel, x) -> LogProbResult:
    """Exact scaled-space log-likelihood for one point ``(D,)`` or a batch ``(B, D)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    latents, logdet, per_layer = model.transform(np.atleast_2d(x), record=True)
    logp = (logdet + sum(gaussian_logpdf(z) for z in latents)).value
    lat = [z.value for z in latents]
    if single:
        return LogProbResult(float(logp[0]), [z[0] for z in lat], {k: float(v[0]) for k, v in per_layer.items()})
    return LogProbResult(logp, lat, per_layer)


def inverse(model: FlowModel, latents) -> np.ndarray:
    single = np.ndim(latents[0]) == 1
    x = model.inverse(latents)
    return x[0] if single else x


def grad_logprob(model: FlowModel, x) -> np.ndarray:
    """Gradient of the log-likelihood with respect to the raw input point(s)."""
    x = np.asarray(x, dtype=np.float64)
    node = T.variable(np.atleast_2d(x), name="x")
    (g,) = T.grad(T.sum_(model.log_prob(node)), [node])
    return g[0] if x.ndim == 1 else g

"""Independent reference computations used by the test-suite.

Nothing here imports the package under test.
"""

import itertools
import math

import numpy as np


def central_fd(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def fd_jacobian(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * h))
    return np.stack(cols, axis=1)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(floor, float(np.max(np.abs(b)))))


def cofactor_det(m):
    m = [list(map(float, row)) for row in m]
    n = len(m)
    if n == 1:
        return m[0][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1 :] for row in m[1:]]
        total += (-1) ** j * m[0][j] * cofactor_det(minor)
    return total


def permutation_det(m):
    """Leibniz formula; exact brute force for small matrices."""
    n = len(m)
    total = 0.0
    for perm in itertools.permutations(range(n)):
        inversions = sum(1 for i in range(n) for j in range(i + 1, n) if perm[i] > perm[j])
        prod = 1.0
        for i in range(n):
            prod *= m[i][perm[i]]
        total += (-1) ** inversions * prod
    return total


# -- k-NN references (plain python loops over pairs) --------------------------


def bf_dist(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def bf_knnd(x, points, k, skip=None):
    ds = sorted(bf_dist(x, p) for i, p in enumerate(points) if i != skip)
    return ds[k - 1]


def bf_radii(points, k):
    return [bf_knnd(p, points, k, skip=i) for i, p in enumerate(points)]


def bf_contains(centers, radii, x):
    return any(bf_dist(x, c) <= r for c, r in zip(centers, radii))


def bf_rarity(centers, radii, x):
    inside = [r for c, r in zip(centers, radii) if bf_dist(x, c) <= r]
    return min(inside) if inside else None


def bf_fraction_inside(queries, centers, radii):
    return sum(bf_contains(centers, radii, q) for q in queries) / len(queries)


def two_pass_pearson(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    sxx = sum((a - mx) ** 2 for a in xs)
    syy = sum((b - my) ** 2 for b in ys)
    return sxy / math.sqrt(sxx * syy)


# -- flow reference: plain numpy re-derivation of every layer's log-determinant ----


def _np_log_sigmoid(v):
    return -np.logaddexp(0.0, -v)


def assemble_linear(params, buffers, name):
    """W = P (I + strict lower) (strict upper + diag(sign * exp(log_s)))."""
    lower = np.tril(params[name + ".lower"], -1) + np.eye(len(params[name + ".log_s"]))
    upper = np.triu(params[name + ".upper"], 1) + np.diag(buffers[name + ".sign"] * np.exp(params[name + ".log_s"]))
    return buffers[name + ".perm"] @ lower @ upper


def coupling_np(params, name, h, scale_shift=2.0):
    c, length = h.shape
    half = c // 2
    width = half * length
    xa = h[:half].reshape(-1)
    hid = np.tanh(xa @ params[name + ".w1"] + params[name + ".b1"])
    out = hid @ params[name + ".w2"] + params[name + ".b2"]
    shift = out[:width].reshape(half, length)
    log_scale = (_np_log_sigmoid(out[width:] + scale_shift) - _np_log_sigmoid(scale_shift)).reshape(half, length)
    yb = (h[half:] + shift) * np.exp(log_scale)
    return np.concatenate([h[:half], yb]), float(np.sum(log_scale))


def reference_flow(params, buffers, layout, flows_per_block, low, width, x):
    """Single-point forward pass; returns (logp, latents, {layer: logdet})."""
    h = (np.asarray(x, dtype=np.float64) - low) / width - 0.5
    logdets, latents = {}, []
    for b, (c, length) in enumerate(layout):
        w = assemble_linear(params, buffers, f"b{b}.pre")
        h = w @ h
        logdets[f"b{b}.pre"] = float(np.linalg.slogdet(w)[1])
        h = h.reshape(c, length)
        for i in range(flows_per_block):
            tag = f"b{b}.f{i}"
            logs = params[tag + ".actnorm.logs"]
            h = (h + params[tag + ".actnorm.bias"][:, None]) * np.exp(logs)[:, None]
            logdets[tag + ".actnorm"] = float(np.sum(logs) * length)
            w = assemble_linear(params, buffers, tag + ".conv")
            h = w @ h
            logdets[tag + ".conv"] = float(np.linalg.slogdet(w)[1] * length)
            h, logdets[tag + ".coupling"] = coupling_np(params, tag + ".coupling", h)
        if b < len(layout) - 1:
            latents.append(h[c // 2 :].reshape(-1))
            h = h[: c // 2].reshape(-1)
        else:
            latents.append(h.reshape(-1))
    z = np.concatenate(latents)
    gauss = -0.5 * float(z @ z) - 0.5 * z.size * math.log(2 * math.pi)
    return gauss + sum(logdets.values()), latents, logdets

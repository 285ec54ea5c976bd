"""Independent reference implementations used as test oracles.

Nothing here imports the package; each routine is a slow, literal
transcription of the quantity it checks (loops, math.fsum, brute force).
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = math.fsum(a[i, t] * b[t, j] for t in range(k))
    return out


def infonce_loops(ha, hb, inv_tau: float) -> float:
    """Symmetric InfoNCE summed over the batch, one term at a time."""
    ha, hb = np.asarray(ha, dtype=np.float64), np.asarray(hb, dtype=np.float64)
    n = ha.shape[0]
    sim = [[math.fsum(ha[i, d] * hb[j, d] for d in range(ha.shape[1])) * inv_tau for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        row = math.fsum(math.exp(sim[i][k]) for k in range(n))
        col = math.fsum(math.exp(sim[k][i]) for k in range(n))
        total += -0.5 * math.log(math.exp(sim[i][i]) / row) - 0.5 * math.log(math.exp(sim[i][i]) / col)
    return total


def unit_rows(g: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = g.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def adamw_first_step(p, g, lr, b1, b2, eps, wd):
    """Closed form of one decoupled-decay Adam step from zero moments."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    return p * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)


def per_class_tally(top1, labels):
    counts: dict[int, list[int]] = {}
    for p, y in zip(top1, labels):
        c = counts.setdefault(int(y), [0, 0])
        c[0] += 1
        c[1] += int(p) == int(y)
    oa = 100.0 * sum(c[1] for c in counts.values()) / len(labels)
    macc = 100.0 * sum(c[1] / c[0] for c in counts.values()) / len(counts)
    return oa, macc, counts


def brute_rank(scores, ids=None):
    """Indices (or ids) by descending score, earlier position first on ties."""
    idx = list(range(len(scores)))
    key_ids = ids if ids is not None else idx
    # python's sort is stable; sort by id first so equal scores keep id order
    order = sorted(idx, key=lambda i: key_ids[i])
    order = sorted(order, key=lambda i: -scores[i])
    return order if ids is None else [ids[i] for i in order]


def camera(view: int, step_deg=12.0, elev_deg=20.0, radius=2.5):
    """Camera centre and (right, up, forward) axes, built from angles directly."""
    az, el = math.radians(view * step_deg), math.radians(elev_deg)
    c = (radius * math.cos(el) * math.cos(az), radius * math.cos(el) * math.sin(az), radius * math.sin(el))
    fwd = tuple(-x / radius for x in c)
    right = (-math.sin(az), math.cos(az), 0.0)
    up = (
        right[1] * fwd[2] - right[2] * fwd[1],
        right[2] * fwd[0] - right[0] * fwd[2],
        right[0] * fwd[1] - right[1] * fwd[0],
    )
    return c, right, up, fwd


def zbuffer_brute(points, view: int, res: int, focal_ratio=0.8):
    """Per-pixel minimum depth by visiting every point for every pixel."""
    c, right, up, fwd = camera(view)
    f, pp = focal_ratio * res, res / 2.0
    proj = []
    for p in np.asarray(points, dtype=np.float64):
        d = [p[i] - c[i] for i in range(3)]
        x = sum(d[i] * right[i] for i in range(3))
        y = sum(d[i] * up[i] for i in range(3))
        z = sum(d[i] * fwd[i] for i in range(3))
        if z <= 1e-6:
            continue
        col = math.floor(pp + f * x / z + 0.5)
        row = math.floor(pp - f * y / z + 0.5)
        proj.append((row, col, z))
    out = np.full((res, res), np.inf)
    for r in range(res):
        for q in range(res):
            zs = [z for (rr, cc, z) in proj if rr == r and cc == q]
            if zs:
                out[r, q] = min(zs)
    return out

"""Shared test utilities: naive reference implementations and tiny builders.

The loss references here are deliberately slow double loops, independent of
the vectorized implementations they oracle.
"""

from __future__ import annotations

import math

import numpy as np

from sptlab.bagstore import SlideBag


def make_bag(n=8, d=4, seed=0, slide_id="bag", label=None, grid=None):
    """Random valid bag; embeddings are float32-representable by construction."""
    rng = np.random.default_rng(seed)
    grid = grid or max(2, int(math.ceil(math.sqrt(n))) + 1)
    cells = rng.choice(grid * grid, size=n, replace=False)
    coords = np.stack([cells // grid, cells % grid], axis=1)
    emb = rng.normal(size=(n, d)).astype(np.float32).astype(np.float64)
    return SlideBag(slide_id, emb, coords, label=label)


# ---------------------------------------------------------------------------
# naive loss references (double loops)
# ---------------------------------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v)


def ref_nt_xent(z1, z2, temperature):
    n = z1.shape[0]
    z = np.concatenate([z1, z2], axis=0)
    u = np.stack([_unit(row) for row in z])
    total = 0.0
    for i in range(2 * n):
        pos = i + n if i < n else i - n
        denom = 0.0
        for a in range(2 * n):
            if a != i:
                denom += math.exp(float(u[i] @ u[a]) / temperature)
        total += -math.log(math.exp(float(u[i] @ u[pos]) / temperature) / denom)
    return total / (2 * n)


def ref_supcon(z1, z2, labels, temperature):
    n = z1.shape[0]
    z = np.concatenate([z1, z2], axis=0)
    lab = np.concatenate([labels, labels])
    u = np.stack([_unit(row) for row in z])
    anchor_losses = []
    for i in range(2 * n):
        positives = [p for p in range(2 * n) if p != i and lab[p] == lab[i]]
        if not positives:
            continue
        denom = sum(math.exp(float(u[i] @ u[a]) / temperature)
                    for a in range(2 * n) if a != i)
        loss_i = 0.0
        for p in positives:
            loss_i += -math.log(math.exp(float(u[i] @ u[p]) / temperature) / denom)
        anchor_losses.append(loss_i / len(positives))
    return float(np.mean(anchor_losses))


def ref_vicreg(z1, z2, invariance=25.0, variance=25.0, covariance=1.0, gamma=1.0, eps=1e-4):
    n, d = z1.shape
    inv = float(((z1 - z2) ** 2).mean())
    total = invariance * inv
    for z in (z1, z2):
        var_term = 0.0
        for j in range(d):
            col = z[:, j]
            v = float(((col - col.mean()) ** 2).sum() / (n - 1))
            var_term += max(0.0, gamma - math.sqrt(v + eps))
        total += variance * 0.5 * var_term / d

        centered = z - z.mean(axis=0)
        cov = centered.T @ centered / (n - 1)
        off = 0.0
        for a in range(d):
            for b in range(d):
                if a != b:
                    off += cov[a, b] ** 2
        total += covariance * 0.5 * off / d
    return total


def ref_byol(p, z_target):
    total = 0.0
    for i in range(p.shape[0]):
        total += float(((_unit(p[i]) - _unit(z_target[i])) ** 2).sum())
    return total / p.shape[0]

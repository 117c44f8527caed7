"""Pair objectives for slide representation learning.

Four losses over projected pair batches: normalized-temperature cross entropy
(simclr), a variance/invariance/covariance composite (vicreg), normalized-MSE
self-distillation (byol), and label-positive contrastive (supcon).  Each
function returns the scalar loss together with exact analytic gradients with
respect to its raw (pre-normalization) inputs; the test suite holds them to
naive double-loop references and finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import normalize_rows, normalize_rows_bwd

__all__ = [
    "ObjectiveConfig", "PairBatch", "ObjectiveError",
    "nt_xent", "vicreg", "byol_loss", "supcon", "pair_loss",
]


class ObjectiveError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    """Objective choice plus its hyperparameters (all exposed, none hidden)."""

    name: str = "simclr"
    temperature: float = 0.1
    vicreg_invariance: float = 25.0
    vicreg_variance: float = 25.0
    vicreg_covariance: float = 1.0
    vicreg_gamma: float = 1.0
    vicreg_eps: float = 1e-4
    byol_momentum: float = 0.99

    def validate(self) -> None:
        if self.name not in ("simclr", "byol", "vicreg", "supcon"):
            raise ObjectiveError(f"unknown objective {self.name!r}")
        if self.temperature <= 0:
            raise ObjectiveError("temperature must be positive")
        if min(self.vicreg_invariance, self.vicreg_variance, self.vicreg_covariance) < 0:
            raise ObjectiveError("vicreg coefficients must be nonnegative")
        if self.vicreg_gamma <= 0 or self.vicreg_eps <= 0:
            raise ObjectiveError("vicreg gamma and eps must be positive")
        if not 0.0 <= self.byol_momentum < 1.0:
            raise ObjectiveError("byol_momentum must lie in [0, 1)")


@dataclass
class PairBatch:
    """Projected first/second views plus optional labels and predictions."""

    z1: np.ndarray
    z2: np.ndarray
    labels: np.ndarray | None = None
    p1: np.ndarray | None = None
    p2: np.ndarray | None = None


def _anchor_softmax_loss(z1: np.ndarray, z2: np.ndarray, temperature: float,
                         targets: np.ndarray, anchor_weight: np.ndarray):
    """Shared core of the contrastive family.

    Stacks the 2N embeddings, L2-normalizes rows, forms cosine logits at the
    given temperature (self-similarity excluded), and evaluates per-anchor
    cross entropy against a target distribution ``targets`` (rows summing to
    one over j != i).  ``anchor_weight`` weights each anchor's contribution to
    the mean.  Returns (loss, dz1, dz2).
    """
    n = z1.shape[0]
    z = np.concatenate([z1, z2], axis=0)
    u, norm_cache = normalize_rows(z)
    sim = (u @ u.T) / temperature
    np.fill_diagonal(sim, -np.inf)

    shifted = sim - sim.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    denom = exps.sum(axis=1, keepdims=True)
    log_p = shifted - np.log(denom)
    p = exps / denom

    # 0 * log(0) on the excluded diagonal must not poison the sum
    picked = np.where(targets > 0, log_p, 0.0)
    loss = float(-(anchor_weight[:, None] * targets * picked).sum())
    # d loss / d sim, accumulating the anchor-row softmax terms
    g = anchor_weight[:, None] * (targets.sum(axis=1, keepdims=True) * p - targets)
    np.fill_diagonal(g, 0.0)
    du = ((g + g.T) @ u) / temperature
    dz = normalize_rows_bwd(norm_cache, du)
    return loss, dz[:n], dz[n:]


def nt_xent(z1: np.ndarray, z2: np.ndarray, temperature: float):
    """Normalized-temperature cross entropy over a batch of positive pairs.

    Each of the 2N rows is an anchor whose positive is its paired view and
    whose negatives are the remaining 2N - 2 rows; the loss is the mean over
    the 2N anchors.  Returns (loss, dz1, dz2).
    """
    n = z1.shape[0]
    if n < 2:
        raise ObjectiveError("need at least two pairs (no negatives otherwise)")
    if temperature <= 0:
        raise ObjectiveError("temperature must be positive")
    targets = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    targets[idx, idx + n] = 1.0
    targets[idx + n, idx] = 1.0
    weight = np.full(2 * n, 1.0 / (2 * n))
    return _anchor_softmax_loss(z1, z2, temperature, targets, weight)


def supcon(z1: np.ndarray, z2: np.ndarray, labels: np.ndarray, temperature: float):
    """Label-positive contrastive loss over the 2N multiview embeddings.

    Positives of an anchor are all same-label embeddings other than itself;
    anchors without positives are excluded from the mean.  With all labels
    distinct this reduces exactly to :func:`nt_xent`.
    """
    n = z1.shape[0]
    if n < 2:
        raise ObjectiveError("need at least two pairs")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ObjectiveError(f"labels must have shape ({n},)")
    lab2 = np.concatenate([labels, labels])
    same = lab2[:, None] == lab2[None, :]
    np.fill_diagonal(same, False)
    pos_counts = same.sum(axis=1)
    active = pos_counts > 0
    if not active.any():
        raise ObjectiveError("every anchor is positive-free")
    targets = np.zeros((2 * n, 2 * n))
    targets[active] = same[active] / pos_counts[active, None]
    weight = np.where(active, 1.0 / active.sum(), 0.0)
    return _anchor_softmax_loss(z1, z2, temperature, targets, weight)


def vicreg(z1: np.ndarray, z2: np.ndarray, invariance: float = 25.0, variance: float = 25.0,
           covariance: float = 1.0, gamma: float = 1.0, eps: float = 1e-4):
    """Invariance + variance-hinge + covariance composite.

    invariance: mean squared difference of paired rows.  variance: mean over
    dimensions of max(0, gamma - sqrt(var_j + eps)) per branch, branches
    averaged (var is the unbiased column variance).  covariance: sum of
    squared off-diagonal covariance entries divided by the width, branches
    averaged.  Returns (loss, dz1, dz2).
    """
    n, d = z1.shape
    if n < 2:
        raise ObjectiveError("variance term undefined for fewer than two rows")

    diff = z1 - z2
    inv_term = float((diff**2).mean())
    dz1 = invariance * 2.0 * diff / diff.size
    dz2 = -dz1.copy()

    loss = invariance * inv_term
    for z, dz in ((z1, dz1), (z2, dz2)):
        centered = z - z.mean(axis=0, keepdims=True)
        var = (centered**2).sum(axis=0) / (n - 1)
        std = np.sqrt(var + eps)
        hinge = np.maximum(0.0, gamma - std)
        loss += variance * 0.5 * float(hinge.mean())
        # d hinge / d z through std, centered columns only where hinge active
        active = (hinge > 0).astype(np.float64)
        dvar = variance * 0.5 * (-active / (2.0 * std)) / d
        dcentered = dvar[None, :] * 2.0 * centered / (n - 1)

        cov = (centered.T @ centered) / (n - 1)
        off = cov - np.diag(np.diag(cov))
        loss += covariance * 0.5 * float((off**2).sum() / d)
        dcov = covariance * 0.5 * 2.0 * off / d
        dcentered = dcentered + centered @ (dcov + dcov.T) / (n - 1)

        dz += dcentered - dcentered.mean(axis=0, keepdims=True)
    return float(loss), dz1, dz2


def byol_loss(p: np.ndarray, z_target: np.ndarray):
    """Normalized MSE between predictions and stop-gradient targets.

    Per row: ||p_hat - z_hat||^2 = 2 - 2 cos(p, z); the mean over rows is
    returned with gradients flowing into ``p`` only.
    """
    if p.shape != z_target.shape:
        raise ObjectiveError(f"shape mismatch {p.shape} vs {z_target.shape}")
    n = p.shape[0]
    p_hat, cache = normalize_rows(p)
    z_hat, _ = normalize_rows(z_target)
    cos = (p_hat * z_hat).sum(axis=1)
    loss = float((2.0 - 2.0 * cos).mean())
    dp_hat = -2.0 * z_hat / n
    dp = normalize_rows_bwd(cache, dp_hat)
    return loss, dp


def pair_loss(batch: PairBatch, cfg: ObjectiveConfig):
    """Dispatch on the configured objective.

    Returns (loss, grads) where grads maps input names ("z1", "z2" or
    "p1", "p2") to gradient arrays.
    """
    cfg.validate()
    if cfg.name == "simclr":
        loss, dz1, dz2 = nt_xent(batch.z1, batch.z2, cfg.temperature)
        return loss, {"z1": dz1, "z2": dz2}
    if cfg.name == "vicreg":
        loss, dz1, dz2 = vicreg(batch.z1, batch.z2, cfg.vicreg_invariance,
                                cfg.vicreg_variance, cfg.vicreg_covariance,
                                cfg.vicreg_gamma, cfg.vicreg_eps)
        return loss, {"z1": dz1, "z2": dz2}
    if cfg.name == "supcon":
        if batch.labels is None:
            raise ObjectiveError("supcon requires labels")
        loss, dz1, dz2 = supcon(batch.z1, batch.z2, batch.labels, cfg.temperature)
        return loss, {"z1": dz1, "z2": dz2}
    if batch.p1 is None or batch.p2 is None:
        raise ObjectiveError("byol requires predictor outputs")
    # symmetrized: each prediction regresses the other view's target
    loss1, dp1 = byol_loss(batch.p1, batch.z2)
    loss2, dp2 = byol_loss(batch.p2, batch.z1)
    return 0.5 * (loss1 + loss2), {"p1": 0.5 * dp1, "p2": 0.5 * dp2}

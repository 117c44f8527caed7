"""Frozen-encoder evaluation: kNN, linear probe, metrics, attention heatmaps.

Features are full-bag encodings with no view transformation.  The kNN path
is the direct readout of representation quality; the linear probe is a
deterministic convex solve (full-batch gradient descent with backtracking on
softmax cross-entropy plus L2) so that probe results carry no training
noise.  Heatmap export writes the CLS attention row of a chosen layer as a
sparse coordinate file plus a rasterized grayscale image.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bagstore import Dataset, SlideBag, save_bag
from .checkpoint import Checkpoint
from .encoder import encode
from .errors import ConfigError
from .trainer import SlideModel, _sub
from .transforms import full_view

__all__ = [
    "FeatureTable", "EvalReport", "ProbeConfig", "LinearProbe",
    "extract_features", "mean_pool_features", "knn_predict", "knn_vote_scores",
    "fit_linear_probe", "compute_metrics", "export_heatmap",
    "save_feature_table", "write_report",
]


@dataclass
class FeatureTable:
    """Per-slide feature rows with ids and labels."""

    slide_ids: list[str]
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)


@dataclass
class EvalReport:
    """Aggregate and per-class classification quality for one protocol."""

    protocol: str
    per_class_accuracy: dict[str, float]
    mca: float
    macro_f1: float
    auc: float
    confusion: np.ndarray
    class_ids: list[int]

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "per_class_accuracy": self.per_class_accuracy,
            "mca": self.mca,
            "macro_f1": self.macro_f1,
            "auc": self.auc,
            "confusion": self.confusion.tolist(),
            "class_ids": self.class_ids,
        }


def _model_from_checkpoint(ckpt: Checkpoint) -> tuple[SlideModel, dict]:
    model = SlideModel.from_arch(ckpt.arch)
    return model, ckpt.params


def extract_features(ds: Dataset, ckpt: Checkpoint, workers: int | None = None) -> FeatureTable:
    """One representation per bag via the identity (full-bag) view.

    Bags are independent, so extraction runs on a thread pool; results are
    placed by index and identical for any worker count.
    """
    model, params = _model_from_checkpoint(ckpt)
    if ds.d != model.d_in:
        raise ConfigError(f"dataset width {ds.d} does not match checkpoint width {model.d_in}")
    enc_params = _sub("enc.", params)
    pos_params = _sub("pos.", params)

    def one(bag: SlideBag) -> np.ndarray:
        h, _ = encode(full_view(bag), model.encoder, enc_params, model.pos_embed, pos_params)
        return h

    n_workers = workers or 1
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(one, ds.bags))
    else:
        rows = [one(bag) for bag in ds.bags]
    labels = ds.labels() if all(b.label is not None for b in ds.bags) else None
    return FeatureTable([b.slide_id for b in ds.bags], np.stack(rows), labels)


def mean_pool_features(ds: Dataset) -> FeatureTable:
    """Non-learned baseline: mean over token embeddings per bag."""
    rows = np.stack([bag.embeddings.mean(axis=0) for bag in ds.bags])
    labels = ds.labels() if all(b.label is not None for b in ds.bags) else None
    return FeatureTable([b.slide_id for b in ds.bags], rows, labels)


# ---------------------------------------------------------------------------
# kNN
# ---------------------------------------------------------------------------

def _pairwise_distance(query: np.ndarray, train: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        diff = query[:, None, :] - train[None, :, :]
        return np.sqrt((diff**2).sum(axis=-1))
    if metric == "cosine":
        qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True), 1e-12)
        tn = train / np.maximum(np.linalg.norm(train, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ tn.T
    raise ConfigError(f"eval.metric must be 'cosine' or 'euclidean', got {metric!r}")


def _knn_core(train: FeatureTable, query: FeatureTable, k: int, metric: str):
    if train.labels is None:
        raise ConfigError("kNN training table has no labels")
    if k < 1 or k > len(train.slide_ids):
        raise ConfigError(f"eval.k={k} outside [1, {len(train.slide_ids)}]")
    dist = _pairwise_distance(query.features, train.features, metric)
    # stable sort: equal distances resolve to the lowest train index
    neighbor_idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    classes = np.unique(train.labels)
    votes = np.zeros((dist.shape[0], len(classes)))
    summed = np.full((dist.shape[0], len(classes)), np.inf)
    preds = np.empty(dist.shape[0], dtype=np.int64)
    for i in range(dist.shape[0]):
        neigh_labels = train.labels[neighbor_idx[i]]
        neigh_dist = dist[i, neighbor_idx[i]]
        for j, c in enumerate(classes):
            hit = neigh_labels == c
            votes[i, j] = hit.sum()
            summed[i, j] = neigh_dist[hit].sum() if hit.any() else np.inf
        best = votes[i].max()
        tied = np.flatnonzero(votes[i] == best)
        if len(tied) > 1:
            tied = tied[summed[i, tied] == summed[i, tied].min()]
        preds[i] = classes[tied[0]]  # remaining ties: lowest class id
    scores = votes / k
    return preds, scores, classes


def knn_predict(train: FeatureTable, query: FeatureTable, k: int,
                metric: str = "cosine") -> np.ndarray:
    """Majority vote among the k nearest training rows.

    Vote ties break on the smaller summed distance among tied classes and
    then on the lower class id.
    """
    preds, _, _ = _knn_core(train, query, k, metric)
    return preds


def knn_vote_scores(train: FeatureTable, query: FeatureTable, k: int,
                    metric: str = "cosine"):
    """Predictions plus per-class vote-fraction scores (for AUC)."""
    preds, scores, classes = _knn_core(train, query, k, metric)
    return preds, scores, classes


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    l2: float = 1e-3
    max_iter: int = 2000
    tol: float = 1e-6  # gradient-norm stopping criterion


@dataclass
class LinearProbe:
    """Multinomial logistic regression over standardized features."""

    weights: np.ndarray  # (d, C)
    bias: np.ndarray  # (C,)
    mean: np.ndarray
    scale: np.ndarray
    class_ids: np.ndarray
    final_loss: float = 0.0

    def scores(self, features: np.ndarray) -> np.ndarray:
        x = (features - self.mean) / self.scale
        logits = x @ self.weights + self.bias
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.class_ids[np.argmax(self.scores(features), axis=1)]


def _probe_loss_grad(x, onehot, w, b, l2):
    n = x.shape[0]
    logits = x @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    loss = -np.mean(np.log((p * onehot).sum(axis=1) + 1e-300)) + 0.5 * l2 * (w**2).sum()
    g = (p - onehot) / n
    return loss, x.T @ g + l2 * w, g.sum(axis=0)


def fit_linear_probe(train: FeatureTable, cfg: ProbeConfig | None = None,
                     init: tuple[np.ndarray, np.ndarray] | None = None) -> LinearProbe:
    """Deterministic full-batch gradient descent with backtracking line search.

    Features are standardized with training statistics; iteration stops when
    the gradient norm falls below ``cfg.tol`` or at ``cfg.max_iter``.
    """
    cfg = cfg or ProbeConfig()
    if train.labels is None:
        raise ConfigError("probe training table has no labels")
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ConfigError("linear probe needs at least two classes")
    x = train.features
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    x = (x - mean) / scale
    onehot = (train.labels[:, None] == classes[None, :]).astype(np.float64)

    d, c = x.shape[1], len(classes)
    w = np.zeros((d, c)) if init is None else init[0].copy()
    b = np.zeros(c) if init is None else init[1].copy()
    step = 1.0
    loss, gw, gb = _probe_loss_grad(x, onehot, w, b, cfg.l2)
    for _ in range(cfg.max_iter):
        gnorm = np.sqrt((gw**2).sum() + (gb**2).sum())
        if gnorm < cfg.tol:
            break
        # backtracking (Armijo) keeps the solve deterministic and monotone
        step = min(step * 2.0, 1e6)
        while True:
            w_new = w - step * gw
            b_new = b - step * gb
            new_loss, gw_new, gb_new = _probe_loss_grad(x, onehot, w_new, b_new, cfg.l2)
            if new_loss <= loss - 0.5 * step * gnorm**2 or step < 1e-12:
                break
            step *= 0.5
        w, b, loss, gw, gb = w_new, b_new, new_loss, gw_new, gb_new
    return LinearProbe(w, b, mean, scale, classes, final_loss=float(loss))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-statistic AUC; ties count half."""
    pos = scores[positive]
    neg = scores[~positive]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    greater = (pos[:, None] > neg[None, :]).sum()
    equal = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * equal) / (len(pos) * len(neg)))


def compute_metrics(predictions: np.ndarray, scores: np.ndarray, labels: np.ndarray,
                    class_ids: np.ndarray | None = None, protocol: str = "knn") -> EvalReport:
    """Mean class accuracy, macro F1, and (macro one-vs-rest) AUC.

    MCA is the unweighted mean of per-class recall over classes present in
    the labels; absent classes are excluded with a warning.  Per-class F1 is
    0 where undefined.  ``scores`` columns follow ``class_ids`` (defaults to
    the sorted union of labels and predictions).
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels) or len(scores) != len(labels):
        raise ConfigError("predictions, scores, and labels must have equal lengths")
    if class_ids is None:
        class_ids = np.unique(np.concatenate([labels, predictions]))
    class_ids = np.asarray(class_ids)

    confusion = np.zeros((len(class_ids), len(class_ids)), dtype=np.int64)
    index = {int(c): i for i, c in enumerate(class_ids)}
    for t, p in zip(labels, predictions):
        if int(t) not in index or int(p) not in index:
            raise ConfigError(f"class {t if int(t) not in index else p} missing from class_ids")
        confusion[index[int(t)], index[int(p)]] += 1

    recalls, f1s, aucs = {}, [], []
    for i, c in enumerate(class_ids):
        support = confusion[i].sum()
        predicted = confusion[:, i].sum()
        tp = confusion[i, i]
        if support == 0:
            warnings.warn(f"class {c} absent from labels; excluded from MCA")
        else:
            recalls[int(c)] = float(tp / support)
        denom = support + predicted
        f1s.append(0.0 if denom == 0 else 2.0 * tp / denom)
        if support and support < len(labels):
            aucs.append(_binary_auc(scores[:, i], labels == c))

    if len(class_ids) == 2 and len(aucs) == 2:
        auc = aucs[1]  # binary case: score of the higher class id
    else:
        auc = float(np.mean(aucs)) if aucs else float("nan")
    mca = float(np.mean(list(recalls.values())))
    report = EvalReport(
        protocol=protocol,
        per_class_accuracy={str(c): v for c, v in recalls.items()},
        mca=mca,
        macro_f1=float(np.mean(f1s)),
        auc=auc,
        confusion=confusion,
        class_ids=[int(c) for c in class_ids],
    )
    return report


# ---------------------------------------------------------------------------
# report and feature persistence
# ---------------------------------------------------------------------------

def write_report(report: EvalReport, json_path) -> Path:
    """Write the report as JSON plus a per-class CSV next to it."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    csv_path = json_path.with_suffix(".csv")
    lines = ["class_id,accuracy"]
    for cid, acc in report.per_class_accuracy.items():
        lines.append(f"{cid},{acc:.6f}")
    lines.append(f"MCA,{report.mca:.6f}")
    lines.append(f"macro_F1,{report.macro_f1:.6f}")
    lines.append(f"AUC,{report.auc:.6f}")
    csv_path.write_text("\n".join(lines) + "\n")
    return csv_path


def save_feature_table(table: FeatureTable, path, name: str = "features") -> None:
    """Persist features in the bag binary format (row index as coordinate).

    Labels and slide ids ride in the sidecar next to the payload.
    """
    path = Path(path)
    m = table.features.shape[0]
    coords = np.stack([np.arange(m, dtype=np.int64), np.zeros(m, dtype=np.int64)], axis=1)
    bag = SlideBag(name, table.features.astype(np.float32).astype(np.float64), coords)
    save_bag(bag, path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    sidecar["slide_ids"] = table.slide_ids
    sidecar["labels"] = None if table.labels is None else table.labels.tolist()
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# attention heatmaps
# ---------------------------------------------------------------------------

def export_heatmap(bag: SlideBag, ckpt: Checkpoint, out_base, layer: int | str = "last",
                   head: int | str = "mean") -> tuple[Path, Path]:
    """Write CLS attention over a full bag as sparse JSON plus a PNG raster.

    The raster covers the coordinate bounding box (one pixel per grid cell),
    min-max normalized to [0, 1]; cells without a token are transparent.
    Returns (json_path, png_path).
    """
    model, params = _model_from_checkpoint(ckpt)
    bag.validate()
    h, record = encode(full_view(bag), model.encoder, _sub("enc.", params),
                       model.pos_embed, _sub("pos.", params))
    n_layers = record.cls_rows.shape[0]
    if layer == "last":
        layer_idx = n_layers - 1
    else:
        layer_idx = int(layer)
        if not -n_layers <= layer_idx < n_layers:
            raise ConfigError(f"layer {layer} out of range for {n_layers}-layer encoder")
    row = record.cls_row(layer=layer_idx, head=head)
    cls_self = float(row[0])
    weights = row[1:]

    out_base = Path(out_base)
    if out_base.suffix in (".png", ".json"):
        out_base = out_base.with_suffix("")
    out_base.parent.mkdir(parents=True, exist_ok=True)
    json_path = out_base.with_suffix(".json")
    png_path = out_base.with_suffix(".png")

    cells = [[int(r), int(c), float(w)] for (r, c), w in zip(bag.coords, weights)]
    json_path.write_text(json.dumps({
        "slide_id": bag.slide_id,
        "layer": layer_idx,
        "head": head if head == "mean" else int(head),
        "cls_self_weight": cls_self,
        "cells": cells,
    }, sort_keys=True) + "\n")

    r0, c0 = bag.coords.min(axis=0)
    r1, c1 = bag.coords.max(axis=0)
    grid = np.full((r1 - r0 + 1, c1 - c0 + 1), np.nan)
    grid[bag.coords[:, 0] - r0, bag.coords[:, 1] - c0] = weights
    lo, hi = np.nanmin(grid), np.nanmax(grid)
    norm = np.zeros_like(grid) if hi <= lo else (grid - lo) / (hi - lo)

    rgba = np.zeros((*grid.shape, 4))
    filled = ~np.isnan(grid)
    norm = np.where(filled, norm, 0.0)
    rgba[..., 0] = rgba[..., 1] = rgba[..., 2] = norm
    rgba[..., 3] = filled.astype(np.float64)

    import matplotlib
    matplotlib.use("Agg", force=False)
    from matplotlib import image as mpimage
    mpimage.imsave(png_path, rgba)
    return json_path, png_path

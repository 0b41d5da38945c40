"""Evaluation metrics: classification, localization, and separability.

JS divergence uses shared-range equal-width histograms and base-2 logs so the
[0,1] bound holds; silhouette is the exact O(n^2) definition with the
singleton-cluster-scores-zero convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bagio import Bag
from .errors import DataValidationError


def accuracy(preds, labels, threshold: float = 0.5) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise DataValidationError(f"need equal nonempty preds/labels, got {preds.shape} vs {labels.shape}")
    return float(np.mean((preds >= threshold).astype(int) == labels))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # 1-based, ties share the mean rank
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores contribute 1/2 via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataValidationError("AUC needs both classes present")
    ranks = _average_ranks(scores)
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def disease_localization(selected_indices, bag: Bag) -> float:
    """Fraction of the selected patches lying in ground-truth tumor regions."""
    if not bag.has_tumor_flags():
        raise DataValidationError(f"bag {bag.slide_id} lacks in_tumor flags")
    idx = np.asarray(selected_indices, dtype=int)
    if idx.size == 0:
        raise DataValidationError("empty selection")
    hits = sum(1 for i in idx if bag.patches[int(i)].in_tumor)
    return hits / idx.size


def jsd_from_histograms(p, q) -> float:
    """Jensen-Shannon divergence of two probability vectors, base-2 logs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def js_divergence(samples_a, samples_b, bins: int = 32) -> float:
    """JSD between two sample sets, histogrammed on shared equal-width bins."""
    a = np.asarray(samples_a, dtype=np.float64).ravel()
    b = np.asarray(samples_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise DataValidationError("JS divergence needs nonempty samples on both sides")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return 0.0
    p, _ = np.histogram(a, bins=bins, range=(lo, hi))
    q, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return jsd_from_histograms(p, q)


def silhouette(points, labels) -> float:
    """Mean silhouette over points, Euclidean distance, singletons score 0."""
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    if pts.ndim != 2 or pts.shape[0] != labels.shape[0]:
        raise DataValidationError(f"points {pts.shape} and labels {labels.shape} do not align")
    classes = np.unique(labels)
    if classes.size < 2:
        raise DataValidationError("silhouette needs at least 2 clusters")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    n = pts.shape[0]
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        if own.sum() == 1:
            continue  # singleton convention
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == c].mean() for c in classes if c != labels[i])
        denom = max(a, b)
        scores[i] = (b - a) / denom if denom > 0 else 0.0  # coincident points
    return float(scores.mean())


@dataclass
class EvalResult:
    accuracy: float
    auc: float
    localization_mean: float | None
    localization_slides: int
    jsd_per_concept: dict = field(default_factory=dict)
    jsd_mean: float | None = None
    silhouette_wsi: float | None = None
    silhouette_patch: float | None = None
    silhouette_wsi_2d: float | None = None
    silhouette_patch_2d: float | None = None
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0 and 0.0 <= self.auc <= 1.0):
            raise DataValidationError("accuracy and AUC must lie in [0,1]")
        if self.localization_mean is not None and not 0.0 <= self.localization_mean <= 1.0:
            raise DataValidationError("localization must lie in [0,1]")

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "localization_mean": self.localization_mean,
            "localization_slides": self.localization_slides,
            "jsd_per_concept": dict(self.jsd_per_concept),
            "jsd_mean": self.jsd_mean,
            "silhouette": {
                "wsi_concept_space": self.silhouette_wsi,
                "patch_concept_space": self.silhouette_patch,
                "wsi_projected_2d": self.silhouette_wsi_2d,
                "patch_projected_2d": self.silhouette_patch_2d,
            },
            "counts": dict(self.counts),
        }

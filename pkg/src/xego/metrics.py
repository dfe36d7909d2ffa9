"""Multi-label classification metrics and embedding-separation analysis.

All classification metrics are reported as percentages over a batch of
binary prediction/label matrices shaped (n_samples, n_labels).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from xego.errors import DomainError

__all__ = [
    "MetricsReport",
    "classify",
    "subset_accuracy",
    "hamming_distance",
    "micro_f1",
    "macro_f1",
    "per_label_f1",
    "compute_report",
    "pca_2d",
    "separation_ratio",
]


@dataclass
class MetricsReport:
    subset_acc: float
    hamming_dist: float
    macro_f1: float
    micro_f1: float
    per_label: list[float] = field(default_factory=list)
    n_samples: int = 0

    def as_dict(self) -> dict:
        return {
            "subset_acc": self.subset_acc,
            "hamming_dist": self.hamming_dist,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "n_samples": self.n_samples,
        }


def _as_binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise DomainError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise DomainError(f"{name} must contain only 0/1")
    return a.astype(np.int64)


def _paired(pred, y) -> tuple[np.ndarray, np.ndarray]:
    p = _as_binary(pred, "pred")
    t = _as_binary(y, "y")
    if p.shape != t.shape:
        raise DomainError(f"pred shape {p.shape} vs y shape {t.shape}")
    return p, t


def classify(logits) -> np.ndarray:
    """Hard decision at probability 0.5, i.e. logit > 0; exact zero goes to 0."""
    return (np.asarray(logits) > 0).astype(np.int64)


def subset_accuracy(pred, y) -> float:
    p, t = _paired(pred, y)
    return 100.0 * float((p == t).all(axis=1).mean())


def hamming_distance(pred, y) -> float:
    p, t = _paired(pred, y)
    return 100.0 * float((p != t).mean())


def _counts(p: np.ndarray, t: np.ndarray, axis=None):
    tp = ((p == 1) & (t == 1)).sum(axis=axis)
    fp = ((p == 1) & (t == 0)).sum(axis=axis)
    fn = ((p == 0) & (t == 1)).sum(axis=axis)
    return tp, fp, fn


def micro_f1(pred, y) -> float:
    p, t = _paired(pred, y)
    tp, fp, fn = _counts(p, t)
    denom = 2 * tp + fp + fn
    return 100.0 * (2.0 * tp / denom) if denom > 0 else 0.0


def per_label_f1(pred, y) -> np.ndarray:
    """F1 per label column; a label with no TP, FP or FN scores 0."""
    p, t = _paired(pred, y)
    tp, fp, fn = _counts(p, t, axis=0)
    denom = 2 * tp + fp + fn
    out = np.zeros(p.shape[1], dtype=np.float64)
    nz = denom > 0
    out[nz] = 100.0 * 2.0 * tp[nz] / denom[nz]
    return out


def macro_f1(pred, y) -> float:
    return float(per_label_f1(pred, y).mean())


def compute_report(pred, y) -> MetricsReport:
    p, t = _paired(pred, y)
    return MetricsReport(
        subset_acc=subset_accuracy(p, t),
        hamming_dist=hamming_distance(p, t),
        macro_f1=macro_f1(p, t),
        micro_f1=micro_f1(p, t),
        per_label=per_label_f1(p, t).tolist(),
        n_samples=p.shape[0],
    )


def pca_2d(embeddings) -> np.ndarray:
    """Deterministic 2-D projection: top-2 principal components.

    Component signs are fixed so the largest-magnitude loading of each
    component is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError(f"need a matrix of at least 2 points, got shape {x.shape}")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(1, x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order]
    if comps.shape[1] < 2:
        raise DomainError("embeddings must have at least 2 dimensions")
    for k in range(2):
        lead = np.argmax(np.abs(comps[:, k]))
        if comps[lead, k] < 0:
            comps[:, k] = -comps[:, k]
    return centered @ comps


def separation_ratio(points, labels) -> float:
    """Mean inter-class pairwise distance over mean intra-class distance.

    Means are taken over the full pairwise-distance matrix: same-label
    entries (the zero diagonal included) form the intra pool, different-label
    entries the inter pool. With that convention, duplicating one point set
    under two labels yields identical pools and a ratio of exactly 1.
    """
    pts = np.asarray(points, dtype=np.float64)
    lab = np.asarray(labels)
    if pts.ndim != 2 or pts.shape[0] != lab.shape[0]:
        raise DomainError(
            f"points shape {pts.shape} does not pair with {lab.shape[0]} labels"
        )
    classes, counts = np.unique(lab, return_counts=True)
    if len(classes) < 2 or (counts < 2).any():
        raise DomainError(
            f"need at least 2 classes with 2 points each, got counts {dict(zip(classes.tolist(), counts.tolist()))}"
        )
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    same = lab[:, None] == lab[None, :]
    intra = dist[same].mean()
    inter = dist[~same].mean()
    if intra == 0.0:
        raise DomainError("intra-class distances are all zero; ratio undefined")
    return float(inter / intra)

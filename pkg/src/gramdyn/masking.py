"""Binary dynamic masks from saliency: token clustering + Otsu threshold.

Tokens of all frames are clustered jointly on backbone features; each
cluster's dynamic score is its mean saliency, and Otsu's method over the
cluster scores picks the static/dynamic cut. A per-token fallback
thresholds the saliency values directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaError, ValidationError
from .saliency import SaliencyMap

OTSU_EPSILON = 1e-6


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # F x Np ids in [0, k)
    centroids: np.ndarray  # k x Cf
    k: int


@dataclass
class DynamicMask:
    """Boolean mask at patch (F x Np) or pixel (F x H x W) resolution."""

    values: np.ndarray
    alpha: float
    resolution: str  # "patch" or "pixel"

    def __post_init__(self):
        if self.resolution not in ("patch", "pixel"):
            raise ValidationError(f"unknown mask resolution {self.resolution!r}")
        want = 2 if self.resolution == "patch" else 3
        if self.values.ndim != want:
            raise SchemaError(
                f"{self.resolution} mask must have {want} dims, got {self.values.shape}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        self.values = self.values.astype(bool)


def patch_to_pixel(values: np.ndarray, H: int, W: int, P: int) -> np.ndarray:
    """Upsample an F x Np patch grid to F x H x W by block replication."""
    F = values.shape[0]
    gh, gw = H // P, W // P
    grid = values.reshape(F, gh, gw)
    return np.repeat(np.repeat(grid, P, axis=1), P, axis=2)


def pixel_to_patch(values: np.ndarray, P: int) -> np.ndarray:
    """Downsample F x H x W to F x Np by per-patch majority vote."""
    F, H, W = values.shape
    gh, gw = H // P, W // P
    blocks = values.reshape(F, gh, P, gw, P).astype(np.float64)
    frac = blocks.mean(axis=(2, 4))
    return (frac > 0.5).reshape(F, gh * gw)


def kmeans_tokens(features: np.ndarray, k: int = 8, seed: int = 0) -> ClusterAssignment:
    """Deterministic k-means over the tokens of all frames jointly.

    k-means++ seeding from a seeded generator, Lloyd iterations until the
    assignment stops changing or 100 iterations. An emptied cluster is
    re-seeded once (to the point currently farthest from its centroid)
    and afterwards allowed to stay empty.
    """
    F, Np, Cf = features.shape
    pts = features.reshape(F * Np, Cf).astype(np.float64)
    n = len(pts)
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValidationError(f"k={k} exceeds token count {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, Cf))
    centroids[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = pts[rng.integers(n)]
        else:
            centroids[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((pts - centroids[j]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    reseeded = np.zeros(k, dtype=bool)
    pts_sq = np.einsum("ij,ij->i", pts, pts)
    for _ in range(100):
        cent_sq = np.einsum("ij,ij->i", centroids, centroids)
        dist = pts_sq[:, None] + cent_sq[None, :] - 2.0 * (pts @ centroids.T)
        new_labels = dist.argmin(axis=1)
        for j in range(k):
            members = new_labels == j
            if members.any():
                centroids[j] = pts[members].mean(axis=0)
            elif not reseeded[j]:
                far = dist[np.arange(n), new_labels].argmax()
                centroids[j] = pts[far]
                reseeded[j] = True
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusterAssignment(labels=labels.reshape(F, Np), centroids=centroids, k=k)


def otsu_threshold(scores: np.ndarray, bins: int = 256) -> float:
    """Bin-edge threshold maximizing inter-class variance over [0, 1].

    Ties break toward the lower edge. If every score is equal there is
    nothing to separate: returns max(scores) + epsilon so that no value
    exceeds the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size < 2:
        raise ValidationError(f"otsu_threshold needs at least 2 scores, got {scores.size}")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("otsu_threshold requires finite scores")
    if scores.max() == scores.min():
        return float(scores.max() + OTSU_EPSILON)

    hist, edges = np.histogram(np.clip(scores, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0

    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * centers)
    total_w = w0[-1]
    total_m = m0[-1]
    w1 = total_w - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(w0 > 0, m0 / w0, 0.0)
        mu1 = np.where(w1 > 0, (total_m - m0) / w1, 0.0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    best = int(np.argmax(between))  # argmax takes the first (lowest) maximizer
    return float(edges[best + 1])


def binarize(sal: SaliencyMap, clusters: ClusterAssignment) -> DynamicMask:
    """Patch-level mask: threshold per-cluster mean saliency with Otsu."""
    dyn = sal.dyn
    if dyn.shape != clusters.labels.shape:
        raise SchemaError(
            f"saliency {dyn.shape} and cluster labels {clusters.labels.shape} disagree"
        )
    flat_dyn = dyn.ravel()
    flat_labels = clusters.labels.ravel()
    present = np.unique(flat_labels)
    scores = np.array([flat_dyn[flat_labels == cid].mean() for cid in present])
    alpha = otsu_threshold(scores)
    dynamic_ids = set(present[scores > alpha].tolist())
    values = np.isin(clusters.labels, list(dynamic_ids))
    return DynamicMask(values=values, alpha=float(min(alpha, 1.0)), resolution="patch")


def binarize_per_token(sal: SaliencyMap) -> DynamicMask:
    """Fallback: Otsu directly over every token's saliency value."""
    alpha = otsu_threshold(sal.dyn.ravel())
    return DynamicMask(
        values=sal.dyn > alpha, alpha=float(min(alpha, 1.0)), resolution="patch"
    )

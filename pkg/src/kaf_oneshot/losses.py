"""Contrastive loss, embedding distance, silhouette score, similarity reports.

The pair label convention is fixed by the loss formula: y = 0 for similar
pairs (attracted, cost 0.5*D^2) and y = 1 for dissimilar pairs (repelled,
cost 0.5*max(0, m - D)^2 up to the margin m).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MetricError, ParameterError, ShapeError, StateError
from .tensor import Tensor, as_tensor

# Distances below this are treated as the D = 0 singular point, where the
# square-root gradient is defined as zero (subgradient choice).
_DIST_EPS = 1e-12


@dataclass(frozen=True)
class EmbeddingSet:
    """N embedded points with class ids, the input to clustering metrics."""

    points: Tensor
    labels: Tensor

    def __post_init__(self):
        pts = as_tensor(self.points, "points")
        if pts.ndim != 2:
            raise ShapeError(f"EmbeddingSet: points must be (N, E), got shape {pts.shape}")
        labels = np.asarray(self.labels)
        if labels.shape != (pts.shape[0],):
            raise ShapeError(
                f"EmbeddingSet: {labels.shape[0] if labels.ndim else 0} labels for {pts.shape[0]} points"
            )
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)


def embedding_distance(e1: Tensor, e2: Tensor) -> float:
    """Euclidean distance between two embeddings."""
    e1 = as_tensor(e1, "e1")
    e2 = as_tensor(e2, "e2")
    if e1.shape != e2.shape:
        raise ShapeError(f"embedding_distance: axis 0 extents differ, {e1.shape} vs {e2.shape}")
    return float(np.linalg.norm(e1 - e2))


def contrastive_loss(
    e1: Tensor, e2: Tensor, y: int, margin: float = 2.0
) -> tuple[float, Tensor, Tensor]:
    """Single-pair contrastive loss and its analytic embedding gradients.

    loss = (1 - y) * 0.5 * D^2 + y * 0.5 * max(0, margin - D)^2 with
    D = ||e1 - e2||. At D = 0 the distance is not differentiable; the
    gradient there is taken as zero so collapsed pairs stay stable.
    """
    losses, g1, g2 = contrastive_loss_batch(
        np.atleast_1d(as_tensor(e1, "e1"))[None, :],
        np.atleast_1d(as_tensor(e2, "e2"))[None, :],
        np.array([y]),
        margin,
        reduce=False,
    )
    return float(losses[0]), g1[0], g2[0]


def contrastive_loss_batch(
    e1: Tensor, e2: Tensor, y: Tensor, margin: float = 2.0, reduce: bool = True
) -> tuple[float | Tensor, Tensor, Tensor]:
    """Vectorised contrastive loss over a batch of pairs.

    With reduce=True (the training path) the loss and the gradients are
    means over the batch, which keeps the learning rate independent of the
    batch size.
    """
    if margin <= 0:
        raise ParameterError(f"contrastive_loss: margin must be positive, got {margin}")
    e1 = as_tensor(e1, "e1")
    e2 = as_tensor(e2, "e2")
    if e1.shape != e2.shape:
        raise ShapeError(f"contrastive_loss: embedding shapes differ, {e1.shape} vs {e2.shape}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (e1.shape[0],):
        raise ShapeError(f"contrastive_loss: {y.shape} labels for {e1.shape[0]} pairs")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ParameterError("contrastive_loss: labels must be 0 (similar) or 1 (dissimilar)")

    diff = e1 - e2
    dist = np.linalg.norm(diff, axis=1)
    hinge = np.maximum(0.0, margin - dist)
    losses = (1.0 - y) * 0.5 * dist**2 + y * 0.5 * hinge**2

    # d loss / d D, divided by D to scale diff; zero at the D = 0 point
    safe = np.where(dist > _DIST_EPS, dist, 1.0)
    coef = (1.0 - y) - y * hinge / safe
    coef = np.where(dist > _DIST_EPS, coef, 0.0)
    g1 = coef[:, None] * diff
    g2 = -g1
    if not reduce:
        return losses, g1, g2
    n = e1.shape[0]
    return float(losses.mean()), g1 / n, g2 / n


def silhouette_score(es: EmbeddingSet) -> float:
    """Mean silhouette over all points, in [-1, 1].

    For each point: a = mean distance to the rest of its own cluster,
    b = smallest mean distance to any other cluster, score (b-a)/max(a,b).
    Points in singleton clusters score 0, as does the degenerate a=b=0 tie.
    """
    pts, labels = es.points, es.labels
    n = pts.shape[0]
    if n < 2:
        raise MetricError(f"silhouette_score: need at least 2 points, got {n}")
    classes, inv = np.unique(labels, return_inverse=True)
    k = classes.size
    if k < 2:
        raise MetricError("silhouette_score: need at least 2 distinct classes")

    counts = np.bincount(inv, minlength=k)
    # mean distance from every point to every cluster, built in row blocks
    mean_to_cluster = np.empty((n, k))
    block = max(1, 2_000_000 // max(1, n))
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        d = np.sqrt(((pts[lo:hi, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
        for j in range(k):
            mean_to_cluster[lo:hi, j] = d[:, inv == j].mean(axis=1)

    own = counts[inv]
    a = np.where(own > 1, mean_to_cluster[np.arange(n), inv] * own / np.maximum(own - 1, 1), 0.0)
    to_others = mean_to_cluster.copy()
    to_others[np.arange(n), inv] = np.inf
    b = to_others.min(axis=1)

    width = np.maximum(a, b)
    s = np.where(width > 0, (b - a) / np.where(width > 0, width, 1.0), 0.0)
    s = np.where(own > 1, s, 0.0)
    return float(s.mean())


def similarity_report(pairs: Sequence[tuple[Tensor, Tensor]], model) -> Tensor:
    """Pairwise dissimilarity scores D for a trained Siamese model.

    Scores come back in input order; write_similarity_csv serialises them
    with the `pair_id,dissimilarity` header.
    """
    if model is None or not hasattr(model, "embed"):
        raise StateError("similarity_report: model does not expose an embed() method")
    if len(pairs) == 0:
        return np.zeros(0)
    lhs = np.stack([_as_image(a) for a, _ in pairs])
    rhs = np.stack([_as_image(b) for _, b in pairs])
    e1 = model.embed(lhs)
    e2 = model.embed(rhs)
    return np.linalg.norm(e1 - e2, axis=1)


def _as_image(img) -> Tensor:
    img = as_tensor(img, "image")
    if img.ndim == 2:
        return img[None, :, :]
    if img.ndim == 3:
        return img
    raise ShapeError(f"image: expected (H, W) or (C, H, W), got shape {img.shape}")


def write_similarity_csv(path, scores: Tensor) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "dissimilarity"])
        for i, s in enumerate(scores):
            writer.writerow([i, repr(float(s))])

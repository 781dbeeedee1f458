"""Categorical quantization of real-valued images via mini-batch k-means,
plus level-set extraction.

Images are arrays of shape (H, W) or (H, W, m); each pixel is an
m-dimensional sample.  Fitting only sees pixels inside the mask, and is
deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import LabelImage, as_mask, as_weights

DEFAULT_BATCH_SIZE = 1000
DEFAULT_MAX_ITER = 25


@dataclass(frozen=True)
class KMeansModel:
    """Fitted centroids; ``k`` is the effective cluster count, which may be
    lower than requested when the data has fewer distinct values."""

    k: int
    centroids: np.ndarray  # (k, m) float64
    seed: int

    def __post_init__(self):
        c = np.ascontiguousarray(np.atleast_2d(np.asarray(self.centroids, dtype=np.float64)))
        if c.shape[0] != self.k:
            raise ValueError(f"expected {self.k} centroids, got {c.shape[0]}")
        if not np.isfinite(c).all():
            raise ValueError("centroids must be finite")
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)

    @property
    def channels(self) -> int:
        return self.centroids.shape[1]


def _as_samples(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, m) image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image values must be finite")
    return img


def _assign(samples: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin of ||x - c||^2 = argmin of (c.c - 2 x.c); ties go to the lowest
    # index via argmin's first-occurrence rule.
    scores = (centroids * centroids).sum(axis=1)[None, :] - 2.0 * (samples @ centroids.T)
    return np.argmin(scores, axis=1)


def _kmeans_pp_init(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = samples.shape[0]
    centroids = np.empty((k, samples.shape[1]), dtype=np.float64)
    centroids[0] = samples[rng.integers(n)]
    d2 = ((samples - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass is on already-chosen points
            centroids[i:] = centroids[0]
            break
        probs = d2 / total
        centroids[i] = samples[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((samples - centroids[i]) ** 2).sum(axis=1))
    return centroids


def fit_kmeans(
    image,
    mask,
    k: int,
    batch_size: int = DEFAULT_BATCH_SIZE,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
) -> KMeansModel:
    """Fit mini-batch k-means on the masked pixels of ``image``.

    Uses k-means++ seeding from ``seed``; per-batch centroid updates are the
    running-mean rule, so results are reproducible bit-for-bit for equal
    inputs and seed.  Centroids that receive no samples in a batch are
    reassigned to the batch samples farthest from their current centroids.

    When the masked pixels hold fewer than ``k`` distinct values the model's
    ``k`` drops to that count and the centroids are the distinct values
    themselves (the exact optimum).
    """
    img = _as_samples(image)
    m = as_mask(mask, img.shape[:2])
    samples = img[m]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if samples.shape[0] < k:
        raise ValueError(f"need at least k={k} masked pixels, got {samples.shape[0]}")

    distinct = np.unique(samples, axis=0)
    if distinct.shape[0] <= k:
        return KMeansModel(k=distinct.shape[0], centroids=distinct, seed=seed)

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(samples, k, rng)
    counts = np.zeros(k, dtype=np.int64)
    n = samples.shape[0]

    for _ in range(max_iter):
        batch = samples[rng.integers(0, n, size=batch_size)]
        assign = _assign(batch, centroids)
        batch_counts = np.bincount(assign, minlength=k)

        empty = np.flatnonzero(batch_counts == 0)
        if empty.size:
            # Deterministic revival: hand the worst-represented batch samples
            # (farthest from their assigned centroid) to the empty centroids.
            d2 = ((batch - centroids[assign]) ** 2).sum(axis=1)
            order = np.argsort(-d2, kind="stable")
            take = order[: empty.size]
            centroids[empty] = batch[take]
            counts[empty] = 1
            assign = _assign(batch, centroids)
            batch_counts = np.bincount(assign, minlength=k)

        sums = np.zeros_like(centroids)
        for dim in range(centroids.shape[1]):
            sums[:, dim] = np.bincount(assign, weights=batch[:, dim], minlength=k)
        hit = batch_counts > 0
        new_counts = counts + batch_counts
        centroids[hit] = (
            counts[hit, None] * centroids[hit] + sums[hit]
        ) / new_counts[hit, None]
        counts = new_counts

    return KMeansModel(k=k, centroids=centroids, seed=seed)


def quantize(image, model: KMeansModel, chunk: int = 1 << 16) -> LabelImage:
    """Label every pixel with its nearest centroid (Euclidean, ties to the
    lowest index)."""
    img = _as_samples(image)
    h, w, m = img.shape
    if m != model.channels:
        raise ValueError(
            f"image has {m} channels but model centroids have {model.channels}"
        )
    flat = img.reshape(-1, m)
    labels = np.empty(flat.shape[0], dtype=np.int32)
    for start in range(0, flat.shape[0], chunk):
        stop = min(start + chunk, flat.shape[0])
        labels[start:stop] = _assign(flat[start:stop], model.centroids)
    return LabelImage(labels=labels.reshape(h, w), k=model.k)


def level_set(labels: LabelImage, a: int, mask) -> np.ndarray:
    """Binary indicator of ``labels == a`` inside the mask."""
    if not 0 <= a < labels.k:
        raise ValueError(f"label {a} outside range [0, {labels.k})")
    m = as_mask(mask, labels.shape)
    return ((labels.labels == a) & m).astype(np.uint8)


def weighted_level_set(labels: LabelImage, a: int, weights) -> np.ndarray:
    """Weight-valued indicator: ``weights`` where ``labels == a``, else 0."""
    if not 0 <= a < labels.k:
        raise ValueError(f"label {a} outside range [0, {labels.k})")
    w = as_weights(weights, labels.shape)
    return np.where(labels.labels == a, w, 0.0)


def save_model(model: KMeansModel, path) -> None:
    doc = {
        "k": model.k,
        "m": model.channels,
        "seed": model.seed,
        "centroids": model.centroids.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_model(path) -> KMeansModel:
    with open(path) as fh:
        doc = json.load(fh)
    centroids = np.asarray(doc["centroids"], dtype=np.float64)
    if centroids.shape != (doc["k"], doc["m"]):
        raise ValueError("centroid array does not match declared k / m")
    return KMeansModel(k=int(doc["k"]), centroids=centroids, seed=int(doc["seed"]))

"""k-means over the pre-meal glucose profile of each segment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .variables import MEAL_INDEX

ELBOW_KS = (3, 5, 7, 9, 11, 13, 15, 17, 19)


def pre_meal_vector(segment):
    """Glucose from two hours before the meal up to the meal sample (9 values)."""
    samples = np.asarray(getattr(segment, "samples", segment), dtype=float)
    return samples[:MEAL_INDEX + 1, 0].copy()


@dataclass
class ClusterModel:
    k: int
    centers: np.ndarray
    intra_distance: float
    seed: int

    def predict(self, vectors):
        return _assign(np.asarray(vectors, dtype=float), self.centers)[0]

    def to_json(self):
        return {"k": self.k, "seed": self.seed, "intra_distance": self.intra_distance,
                "centers": self.centers.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["k"], np.array(obj["centers"], dtype=float), obj["intra_distance"], obj["seed"])


def _assign(x, centers):
    d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d.argmin(axis=1)
    return labels, d[np.arange(len(x)), labels]


def _repair_empty(x, labels, dist, k):
    """Give every empty cluster the point currently farthest from its center."""
    labels = labels.copy()
    dist = dist.copy()
    for c in range(k):
        if np.any(labels == c):
            continue
        sizes = np.bincount(labels, minlength=k)
        # only take points whose own cluster keeps at least one member
        movable = np.where(sizes[labels] > 1, dist, -1.0)
        i = int(movable.argmax())
        labels[i] = c
        dist[i] = 0.0
    return labels


def lloyd(x, centers, max_iter=300):
    """Lloyd iterations from given centers; returns ``(centers, labels, intra)``."""
    k = len(centers)
    labels, dist = _assign(x, centers)
    labels = _repair_empty(x, labels, dist, k)
    for _ in range(max_iter):
        centers = np.stack([x[labels == c].mean(axis=0) for c in range(k)])
        new, dist = _assign(x, centers)
        new = _repair_empty(x, new, dist, k)
        if np.array_equal(new, labels):
            break
        labels = new
    labels, dist = _assign(x, centers)
    return centers, labels, float(dist.sum())


def kmeans(vectors, k, restarts=100, seed=0, max_iter=300):
    """Best of ``restarts`` Lloyd runs from uniformly drawn data points.

    Returns ``(ClusterModel, labels)``.  Ties between restarts go to the
    earlier restart.
    """
    x = np.asarray(vectors, dtype=float)
    if k < 1:
        raise DomainError("k must be at least 1")
    if len(x) < k:
        raise DomainError(f"{len(x)} vectors cannot form {k} clusters")
    best = None
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        rng = np.random.default_rng(child)
        init = x[rng.choice(len(x), size=k, replace=False)]
        centers, labels, intra = lloyd(x, init, max_iter)
        if best is None or intra < best[2]:
            best = (centers, labels, intra, r)
    centers, labels, intra, _ = best
    return ClusterModel(k, centers, intra, seed), labels


def _farthest_points(x, centers, extra):
    centers = list(centers)
    for _ in range(extra):
        d = ((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(axis=2).min(axis=1)
        centers.append(x[int(d.argmax())])
    return np.stack(centers)


def elbow_scan(vectors, ks=ELBOW_KS, restarts=100, seed=0, max_iter=300):
    """Intra-cluster distance for each k, guaranteed non-increasing in k.

    Each k is solved from random restarts and also warm-started from the
    previous solution plus farthest points; the better of the two is kept.
    """
    x = np.asarray(vectors, dtype=float)
    ks = sorted(ks)
    if len(x) < ks[-1]:
        raise DomainError(f"{len(x)} vectors cannot form {ks[-1]} clusters")
    rows, prev = [], None
    for k in ks:
        model, _ = kmeans(x, k, restarts, seed, max_iter)
        if prev is not None:
            centers, _, intra = lloyd(x, _farthest_points(x, prev.centers, k - prev.k), max_iter)
            if intra < model.intra_distance:
                model = ClusterModel(k, centers, intra, seed)
        rows.append((k, model.intra_distance))
        prev = model
    return rows

"""Class centroids in latent space and the prediction record both rules emit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOVEL = -1


class RejectedDatasetError(ValueError):
    pass


@dataclass
class CentroidSet:
    centroids: np.ndarray
    class_ids: list[int]

    def __post_init__(self):
        self.centroids = np.atleast_2d(np.asarray(self.centroids, dtype=float))
        self.class_ids = [int(c) for c in self.class_ids]
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class ids must be unique")
        if self.centroids.shape[0] != len(self.class_ids):
            raise ValueError("one centroid row per class id")
        if len(self.class_ids) < 2:
            raise ValueError("need at least two centroids")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def to_dict(self) -> dict:
        return {"class_ids": self.class_ids, "centroids": self.centroids.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CentroidSet":
        return cls(np.asarray(d["centroids"], dtype=float), d["class_ids"])


def compute_centroids(embeddings: np.ndarray, labels: np.ndarray, class_ids=None) -> CentroidSet:
    """Mean embedding of every class. ``labels`` index rows of the result.

    ``labels`` must take values ``0..C-1``; ``class_ids`` renames the rows
    (defaults to ``0..C-1``).
    """
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    n_classes = len(class_ids) if class_ids is not None else int(labels.max()) + 1
    rows = []
    for c in range(n_classes):
        members = embeddings[labels == c]
        if len(members) == 0:
            raise RejectedDatasetError(f"class {c} has no samples")
        rows.append(members.mean(axis=0))
    if class_ids is None:
        class_ids = list(range(n_classes))
    return CentroidSet(np.vstack(rows), list(class_ids))


def squared_distances(embeddings: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """``[n, C]`` matrix of squared Euclidean distances."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=float))
    diff = e[:, None, :] - centroids[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


@dataclass
class OpenSetPrediction:
    """Predicted class id (or ``NOVEL``), the value compared to the threshold,
    and the nearest known class id."""

    label: int
    rule_value: float
    nearest_class: int

    @property
    def is_novel(self) -> bool:
        return self.label == NOVEL

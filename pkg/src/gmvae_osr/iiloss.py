"""ii-loss embedding network with outlier-score rejection.

The embedding network is trained to shrink intra-class spread and push
class centroids apart. At test time a sample is rejected as novel when its
squared distance to the nearest training centroid exceeds a threshold fit
as the ``1 - alpha`` percentile of training outlier scores.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import nn
from .geometry import (
    NOVEL,
    CentroidSet,
    OpenSetPrediction,
    RejectedDatasetError,
    compute_centroids,
    squared_distances,
)

log = logging.getLogger(__name__)


class RejectedBatchError(ValueError):
    """Batch with fewer than two classes; the inter-spread term is undefined."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, model: "IiLossModel | None" = None):
        super().__init__(message)
        self.model = model


@dataclass
class IiLossConfig:
    hidden: list[int] = field(default_factory=lambda: [100, 50])
    dim_z: int = 10
    dropout: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 128
    bn_momentum: float = 0.9


@dataclass
class ContaminationConfig:
    alpha: float = 0.01
    threshold: float | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.threshold is not None and self.threshold < 0:
            raise ValueError("threshold must be non-negative")


@dataclass
class IiLossModel:
    spec: nn.MlpSpec
    params: nn.MlpParams
    centroids: CentroidSet | None = None
    contamination: ContaminationConfig | None = None

    @property
    def dim_z(self) -> int:
        return self.spec.d_out


def build_spec(d_in: int, config: IiLossConfig) -> nn.MlpSpec:
    """ReLU blocks with batchnorm and dropout; the embedding layer is batch-normalized too."""
    return nn.MlpSpec.build(
        [d_in, *config.hidden, config.dim_z],
        hidden="relu",
        output="identity",
        batchnorm=True,
        dropout=config.dropout,
    )


def ii_loss(embeddings: np.ndarray, labels: np.ndarray, with_grad: bool = False):
    """Intra-spread minus the minimum squared distance between batch centroids.

    Intra-spread is the mean over all samples of the squared distance to the
    sample's own batch centroid. Returns the loss, or ``(loss, d_loss/d_embeddings)``
    when ``with_grad`` is set.
    """
    z = np.atleast_2d(np.asarray(embeddings, dtype=float))
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise RejectedBatchError("ii-loss needs at least two classes in the batch")
    n = len(z)
    mus = np.vstack([z[labels == c].mean(axis=0) for c in classes])
    pos = np.searchsorted(classes, labels)
    resid = z - mus[pos]
    intra = float(np.sum(resid**2) / n)
    d2 = squared_distances(mus, mus)
    d2[np.diag_indices_from(d2)] = np.inf
    a, b = np.unravel_index(np.argmin(d2), d2.shape)
    inter = float(d2[a, b])
    loss = intra - inter
    if not with_grad:
        return loss
    grad = 2.0 * resid / n
    gap = mus[a] - mus[b]
    in_a = pos == a
    in_b = pos == b
    grad[in_a] -= 2.0 * gap / in_a.sum()
    grad[in_b] += 2.0 * gap / in_b.sum()
    return loss, grad


def spreads(embeddings: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """``(intra, inter)`` spreads as used by :func:`ii_loss`."""
    z = np.atleast_2d(np.asarray(embeddings, dtype=float))
    loss = ii_loss(z, labels)
    classes = np.unique(labels)
    mus = np.vstack([z[labels == c].mean(axis=0) for c in classes])
    d2 = squared_distances(mus, mus)
    d2[np.diag_indices_from(d2)] = np.inf
    inter = float(d2.min())
    return loss + inter, inter


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Batches drawing from every class in proportion to its size.

    The number of batches is capped by the smallest class so that every
    batch contains every class.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    members = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    n_batches = max(1, min(math.ceil(len(labels) / batch_size), min(len(m) for m in members)))
    chunks = [np.array_split(m, n_batches) for m in members]
    for b in rng.permutation(n_batches):
        yield np.concatenate([ch[b] for ch in chunks])


def embed(model: IiLossModel, x: np.ndarray) -> np.ndarray:
    return nn.forward(model.spec, model.params, x, mode="infer")


def train_iiloss(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    config: IiLossConfig | None = None,
    max_epochs: int = 500,
    patience: int = 10,
    seed: int = 0,
    class_ids=None,
) -> tuple[IiLossModel, list[dict[str, float]]]:
    """Minimize ii-loss with Adam, early-stopping on validation ii-loss.

    Labels are ``0..C-1``. Centroids are recomputed over the whole training
    set in infer mode once training ends.
    """
    config = config or IiLossConfig()
    x_train = np.asarray(x_train, dtype=float)
    y_train = np.asarray(y_train, dtype=int)
    n_classes = int(y_train.max()) + 1
    counts = np.bincount(y_train, minlength=n_classes)
    if n_classes < 2 or np.any(counts == 0):
        raise RejectedDatasetError("training set needs every class 0..C-1 and at least two classes")
    rng = np.random.default_rng(seed)
    spec = build_spec(x_train.shape[1], config)
    params = nn.init_params(spec, rng)
    state = nn.AdamState.for_params(params.arrays, config.learning_rate)
    history: list[dict[str, float]] = []
    best = params.copy()
    stopping = nn.EarlyStopping(max_epochs, patience)
    for epoch in range(1, max_epochs + 1):
        total, seen = 0.0, 0
        for idx in stratified_batches(y_train, config.batch_size, rng):
            z, cache = nn.forward(spec, params, x_train[idx], mode="train", rng=rng, return_cache=True)
            loss, dz = ii_loss(z, y_train[idx], with_grad=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite ii-loss in epoch {epoch}", _finish(spec, best, x_train, y_train, class_ids))
            grads, _ = nn.backward(spec, params, cache, dz)
            nn.adam_step(params.arrays, grads, state)
            nn.update_running_stats(spec, params, cache, config.bn_momentum)
            total += loss * len(idx)
            seen += len(idx)
        val_loss = ii_loss(nn.forward(spec, params, x_val), y_val)
        history.append({"epoch": epoch, "train": total / seen, "validation": float(val_loss)})
        log.debug("iiloss epoch %d train %.4f val %.4f", epoch, total / seen, val_loss)
        improved, stop = stopping.update(float(val_loss))
        if improved:
            best = params.copy()
        if stop:
            break
    return _finish(spec, best, x_train, y_train, class_ids), history


def _finish(spec, params, x_train, y_train, class_ids) -> IiLossModel:
    model = IiLossModel(spec, params)
    model.centroids = compute_centroids(embed(model, x_train), y_train, class_ids)
    return model


def outlier_scores_from_embeddings(embeddings: np.ndarray, centroids: CentroidSet) -> np.ndarray:
    return squared_distances(embeddings, centroids.centroids).min(axis=1)


def outlier_score(model: IiLossModel, x: np.ndarray) -> np.ndarray:
    """Squared distance from each embedding to its nearest centroid."""
    return outlier_scores_from_embeddings(embed(model, x), model.centroids)


def posterior_from_embeddings(embeddings: np.ndarray, centroids: CentroidSet) -> np.ndarray:
    return nn.softmax(-squared_distances(embeddings, centroids.centroids), axis=1)


def softmax_posterior(model: IiLossModel, x: np.ndarray) -> np.ndarray:
    """``P(y=i | x)`` proportional to ``exp(-||mu_i - z(x)||^2)``; rows sum to 1."""
    return posterior_from_embeddings(embed(model, x), model.centroids)


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Value at 1-based rank ``ceil(q * n)`` of the ascending sort."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("no values")
    # round away float fuzz such as 0.99 * 100 = 99.00000000000001
    rank = math.ceil(round(q * v.size, 9))
    return float(v[min(max(rank, 1), v.size) - 1])


def fit_contamination_threshold(training_scores: np.ndarray, alpha: float = 0.01) -> ContaminationConfig:
    scores = np.asarray(training_scores, dtype=float)
    if scores.size == 0:
        raise nn.RejectedInputError("no training scores")
    cfg = ContaminationConfig(alpha=alpha)
    cfg.threshold = nearest_rank_percentile(scores, 1.0 - alpha)
    return cfg


def predict_os_from_embeddings(
    embeddings: np.ndarray, centroids: CentroidSet, threshold: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized open-set rule: ``(labels, scores, nearest_class_ids)``.

    ``labels`` holds class ids, or ``NOVEL`` where the outlier score exceeds
    ``threshold``. Ties go to the lowest class index.
    """
    d2 = squared_distances(embeddings, centroids.centroids)
    nearest = np.argmin(d2, axis=1)
    scores = d2[np.arange(len(d2)), nearest]
    ids = np.asarray(centroids.class_ids)[nearest]
    labels = np.where(scores <= threshold, ids, NOVEL)
    return labels, scores, ids


def predict_open_set_os(model: IiLossModel, config: ContaminationConfig, x: np.ndarray) -> list[OpenSetPrediction]:
    if config.threshold is None:
        raise ValueError("contamination threshold has not been fitted")
    labels, scores, ids = predict_os_from_embeddings(embed(model, x), model.centroids, config.threshold)
    return [OpenSetPrediction(int(l), float(s), int(c)) for l, s, c in zip(labels, scores, ids)]


# -- checkpoints -----------------------------------------------------------


def model_to_doc(model: IiLossModel) -> dict[str, Any]:
    doc = {"kind": "iiloss", "network": nn.params_to_doc(model.spec, model.params)}
    doc["centroids"] = model.centroids.to_dict() if model.centroids is not None else None
    if model.contamination is not None:
        doc["contamination"] = {"alpha": model.contamination.alpha, "threshold": model.contamination.threshold}
    return doc


def model_from_doc(doc: dict[str, Any]) -> IiLossModel:
    if doc.get("kind") != "iiloss":
        raise ValueError("not an ii-loss checkpoint")
    spec, params = nn.params_from_doc(doc["network"])
    model = IiLossModel(spec, params)
    if doc.get("centroids"):
        model.centroids = CentroidSet.from_dict(doc["centroids"])
    if doc.get("contamination"):
        model.contamination = ContaminationConfig(**doc["contamination"])
    return model


def save_model(path: str | Path, model: IiLossModel) -> None:
    Path(path).write_text(json.dumps(model_to_doc(model)))


def load_model(path: str | Path) -> IiLossModel:
    return model_from_doc(json.loads(Path(path).read_text()))

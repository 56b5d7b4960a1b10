"""Uncertainty-based rejection and F1-saturation threshold selection.

``U`` is the distance to the nearest centroid divided by the mean distance
to all the other centroids: 0 on a centroid, 1 when equidistant, and
approaching 1 far away from every centroid. A sample is known (nearest
class) when ``U <= tau`` and novel otherwise.

``tau`` is picked from the known-validation macro-F1 curve: the first grid
point whose forward-difference slope reaches ``epsilon1`` marks the rise,
and the first later point whose slope drops to ``epsilon2`` or below is the
saturation threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import NOVEL, CentroidSet, OpenSetPrediction, squared_distances
from .iiloss import nearest_rank_percentile, predict_os_from_embeddings
from .metrics import f1_report, macro_f1


class NoSaturationError(ValueError):
    """The F1 curve never rises steeply enough, or never flattens afterwards.

    ``fallback_tau`` is the grid point with the highest F1.
    """

    def __init__(self, message: str, fallback_tau: float | None = None):
        super().__init__(message)
        self.fallback_tau = fallback_tau


def default_grid(step: float = 0.01) -> list[float]:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


@dataclass
class ThresholdSelectionConfig:
    tau_grid: list[float] = field(default_factory=default_grid)
    epsilon1: float = 1.0
    epsilon2: float = 0.25

    def __post_init__(self):
        g = np.asarray(self.tau_grid, dtype=float)
        if g.size < 3 or np.any(np.diff(g) <= 0) or g.min() < 0 or g.max() > 1:
            raise ValueError("tau_grid must be >= 3 strictly increasing values in [0, 1]")
        if not self.epsilon1 > self.epsilon2 > 0:
            raise ValueError("need epsilon1 > epsilon2 > 0")


@dataclass
class ThresholdCurve:
    tau_grid: list[float]
    f1_values: list[float]
    derivative: list[float]
    tau_tilde: float | None = None
    tau_star: float | None = None
    fallback: bool = False

    def to_rows(self) -> list[list]:
        rows = [["tau", "f1", "f1_prime"]]
        for i, (t, f) in enumerate(zip(self.tau_grid, self.f1_values)):
            rows.append([t, f, self.derivative[i] if i < len(self.derivative) else ""])
        return rows

    def summary(self, config: ThresholdSelectionConfig) -> dict:
        g = self.tau_grid
        return {
            "tau_tilde": self.tau_tilde,
            "tau_star": self.tau_star,
            "fallback": self.fallback,
            "epsilon1": config.epsilon1,
            "epsilon2": config.epsilon2,
            "grid": {"start": g[0], "stop": g[-1], "points": len(g)},
        }

    def save(self, csv_path: str | Path, json_path: str | Path, config: ThresholdSelectionConfig) -> None:
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.to_rows())
        Path(json_path).write_text(json.dumps(self.summary(config), indent=2, sort_keys=True))


def uncertainty_batch(embeddings: np.ndarray, centroids: CentroidSet):
    """Vectorized ``U``: returns ``(U, nearest_index, degenerate)`` arrays.

    Degenerate rows (all other centroids at distance 0) get ``U = 1``.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=float))
    C = centroids.n_classes
    if C < 2:
        raise ValueError("uncertainty needs at least two centroids")
    d = np.sqrt(squared_distances(e, centroids.centroids))
    nearest = np.argmin(d, axis=1)
    rows = np.arange(len(e))
    num = d[rows, nearest]
    denom = (d.sum(axis=1) - num) / (C - 1)
    degenerate = denom == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(degenerate, 1.0, num / np.where(degenerate, 1.0, denom))
    return u, nearest, degenerate


def uncertainty(embedding: np.ndarray, centroids: CentroidSet) -> tuple[float, int, bool]:
    """``(U, nearest class id, degenerate flag)`` for one embedding."""
    u, nearest, deg = uncertainty_batch(np.asarray(embedding, dtype=float)[None, :], centroids)
    return float(u[0]), centroids.class_ids[int(nearest[0])], bool(deg[0])


def predict_u_from_embeddings(embeddings: np.ndarray, centroids: CentroidSet, tau: float):
    """Vectorized rule: ``(labels, U, nearest_class_ids)``; ``U == tau`` is known."""
    u, nearest, _ = uncertainty_batch(embeddings, centroids)
    ids = np.asarray(centroids.class_ids)[nearest]
    return np.where(u <= tau, ids, NOVEL), u, ids


def predict_open_set_u(embedding: np.ndarray, centroids: CentroidSet, tau: float) -> OpenSetPrediction:
    u, c, _ = uncertainty(embedding, centroids)
    return OpenSetPrediction(c if u <= tau else NOVEL, u, c)


def _forward_differences(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.diff(values) / np.diff(grid)


def f1_vs_tau_curve(
    embeddings: np.ndarray,
    labels: np.ndarray,
    centroids: CentroidSet,
    config: ThresholdSelectionConfig | None = None,
) -> ThresholdCurve:
    """Known-validation macro-F1 at every grid ``tau``.

    ``labels`` are class ids of ``centroids``; novel predictions count as
    misses for the true class and as no class's false positive.
    """
    config = config or ThresholdSelectionConfig()
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty validation set")
    u, nearest, _ = uncertainty_batch(embeddings, centroids)
    ids = np.asarray(centroids.class_ids)[nearest]
    f1s = [
        macro_f1(labels, np.where(u <= tau, ids, NOVEL), centroids.class_ids, strict=False)
        for tau in config.tau_grid
    ]
    grid = np.asarray(config.tau_grid, dtype=float)
    return ThresholdCurve(
        list(map(float, grid)),
        f1s,
        list(map(float, _forward_differences(grid, np.asarray(f1s)))),
    )


def select_threshold_saturation(
    curve: ThresholdCurve, config: ThresholdSelectionConfig | None = None, allow_fallback: bool = False
) -> float:
    """Saturation threshold; stores ``tau_tilde``/``tau_star`` on ``curve``.

    The slope at grid point ``j`` is the forward difference to ``j + 1``, so
    the last grid point is never selected. Raises :class:`NoSaturationError`
    unless ``allow_fallback`` is set, in which case the highest-F1 grid
    point is returned and ``curve.fallback`` is flagged.
    """
    config = config or ThresholdSelectionConfig()
    grid = np.asarray(curve.tau_grid, dtype=float)
    deriv = np.asarray(curve.derivative, dtype=float)
    fallback_tau = float(grid[int(np.argmax(curve.f1_values))])
    rising = np.flatnonzero(deriv >= config.epsilon1)
    problem = None
    if rising.size == 0:
        problem = f"F1 slope never reaches epsilon1={config.epsilon1}"
    else:
        j = int(rising[0])
        curve.tau_tilde = float(grid[j])
        flat = np.flatnonzero(deriv[j + 1:] <= config.epsilon2)
        if flat.size == 0:
            problem = f"F1 slope never drops to epsilon2={config.epsilon2} after tau={grid[j]}"
        else:
            curve.tau_star = float(grid[j + 1 + int(flat[0])])
            curve.fallback = False
            return curve.tau_star
    if allow_fallback:
        curve.tau_star = fallback_tau
        curve.fallback = True
        return fallback_tau
    raise NoSaturationError(problem, fallback_tau)


@dataclass
class SweepTable:
    rule: str
    center: float
    halfwidth: float
    points: list[float]
    thresholds: list[float]
    f1_min: list[float]
    f1_mean: list[float]
    f1_max: list[float]
    clipped: bool = False

    def to_rows(self) -> list[list]:
        rows = [["point", "threshold", "f1_min", "f1_mean", "f1_max"]]
        rows += [list(r) for r in zip(self.points, self.thresholds, self.f1_min, self.f1_mean, self.f1_max)]
        return rows

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sweep_points(center: float, halfwidth: float, step: float = 0.01) -> tuple[list[float], bool]:
    """Grid ``center + k*step`` over ``[center - halfwidth, center + halfwidth]``, clipped to [0, 1]."""
    m = int(round(halfwidth / step))
    pts = [round(center + k * step, 10) for k in range(-m, m + 1)]
    kept = [p for p in pts if 0.0 <= p <= 1.0]
    return kept, len(kept) != len(pts)


def sweep_thresholds(
    embeddings: np.ndarray,
    labels_with_novel: np.ndarray,
    centroids: CentroidSet,
    center: float,
    halfwidth: float = 0.05,
    rule: str = "uncertainty",
    training_scores: np.ndarray | None = None,
    test_sets: list[np.ndarray] | None = None,
    step: float = 0.01,
) -> SweepTable:
    """Open-set macro-F1 over the known classes plus ``NOVEL`` around a threshold.

    For ``rule="uncertainty"`` the swept value is ``tau`` itself. For
    ``rule="outlier_score"`` it is the contamination ratio alpha, refit at
    each point to the ``1 - alpha`` nearest-rank percentile of
    ``training_scores``. ``labels_with_novel`` uses ``NOVEL`` for every novel
    sample. With ``test_sets`` (index arrays) each point reports the
    min/mean/max over the sets.
    """
    if rule not in ("uncertainty", "outlier_score"):
        raise ValueError(f"unknown rule {rule!r}")
    if rule == "outlier_score" and training_scores is None:
        raise ValueError("outlier_score sweep needs training scores")
    labels = np.asarray(labels_with_novel)
    e = np.atleast_2d(np.asarray(embeddings, dtype=float))
    points, clipped = sweep_points(center, halfwidth, step)
    universe = list(centroids.class_ids) + [NOVEL]
    sets = test_sets if test_sets is not None else [np.arange(len(labels))]
    if rule == "uncertainty":
        u, nearest, _ = uncertainty_batch(e, centroids)
        values = u
        ids = np.asarray(centroids.class_ids)[nearest]
    else:
        _, values, ids = predict_os_from_embeddings(e, centroids, np.inf)
    thresholds, lo, mean, hi = [], [], [], []
    for p in points:
        thr = p if rule == "uncertainty" else nearest_rank_percentile(training_scores, 1.0 - p)
        pred = np.where(values <= thr, ids, NOVEL)
        scores = [f1_report(labels[s], pred[s], universe).macro for s in sets]
        thresholds.append(float(thr))
        lo.append(float(np.min(scores)))
        hi.append(float(np.max(scores)))
        mean.append(min(max(float(np.mean(scores)), lo[-1]), hi[-1]))
    return SweepTable(rule, center, halfwidth, points, thresholds, lo, mean, hi, clipped)

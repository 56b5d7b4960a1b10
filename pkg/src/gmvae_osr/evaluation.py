"""Open-set evaluation protocol: incremental novel-class curves over resampled test sets.

For ``k = 0..n_novel`` every test set is restricted to the known-test rows
plus the rows of the first ``k`` novel classes, and macro-F1 is computed over
the known classes (``k = 0``) or the known classes plus one pooled novel
class (``k >= 1``). Each point reports min/mean/max over the test sets.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import SplitBundle
from .geometry import NOVEL
from .metrics import ConfusionMatrix, confusion, f1_report


def relative_change(f1_a: float, f1_b: float) -> float | None:
    """Percent change of ``f1_a`` relative to the baseline ``f1_b``; ``None`` when ``f1_b == 0``."""
    if f1_b == 0:
        return None
    return 100.0 * (f1_a - f1_b) / f1_b


def open_set_truth(labels: np.ndarray, known: list[int]) -> np.ndarray:
    """Dataset labels with every non-known class replaced by ``NOVEL``."""
    labels = np.asarray(labels)
    return np.where(np.isin(labels, known), labels, NOVEL)


@dataclass
class CurveBand:
    k: list[int]
    mean: list[float]
    min: list[float]
    max: list[float]

    def to_dict(self) -> dict[str, list]:
        return {"k": self.k, "mean": self.mean, "min": self.min, "max": self.max}


def incremental_novel_curve(
    predictions: np.ndarray,
    labels: np.ndarray,
    bundle: SplitBundle,
) -> tuple[CurveBand, list[int]]:
    """F1 band per novel-class count for one pipeline.

    ``predictions`` holds a prediction (known class id or ``NOVEL``) for
    every dataset row. Returns the band and the sorted list of universe
    classes that were ever empty in both truth and prediction.
    """
    truth = open_set_truth(labels, bundle.known)
    preds = np.asarray(predictions)
    ks, means, lows, highs = [], [], [], []
    empty: set[int] = set()
    for k in range(len(bundle.novel) + 1):
        universe = list(bundle.known) + ([NOVEL] if k else [])
        # at k = 0 every test set is the known-test split
        n_sets = 1 if k == 0 else len(bundle.novel_test_sets)
        scores = []
        for s in range(n_sets):
            idx = bundle.test_indices(s, k)
            rep = f1_report(truth[idx], preds[idx], universe, strict=False)
            scores.append(rep.macro)
            empty.update(rep.empty_classes)
        lo, hi = float(np.min(scores)), float(np.max(scores))
        ks.append(k)
        # summation rounding can push the mean of equal values one ulp past them
        means.append(min(max(float(np.mean(scores)), lo), hi))
        lows.append(lo)
        highs.append(hi)
    return CurveBand(ks, means, lows, highs), sorted(empty)


def novel_recall(predictions: np.ndarray, labels: np.ndarray, bundle: SplitBundle) -> list[float]:
    """Fraction of novel rows predicted ``NOVEL``, per test set, with all novel classes included."""
    preds = np.asarray(predictions)
    out = []
    for s in range(len(bundle.novel_test_sets)):
        idx = np.concatenate([bundle.novel_test_sets[s][c] for c in bundle.novel])
        out.append(float(np.mean(preds[idx] == NOVEL)))
    return out


def designated_confusion(predictions: np.ndarray, labels: np.ndarray, bundle: SplitBundle, set_index: int = 0) -> ConfusionMatrix:
    """Confusion matrix of one full test set: per-class rows, pooled Novel column."""
    idx = bundle.test_indices(set_index, len(bundle.novel))
    return confusion(np.asarray(labels)[idx], np.asarray(predictions)[idx], bundle.known, bundle.novel)


@dataclass
class EvalReport:
    curves: dict[str, CurveBand]
    relative_change: list[float | None]
    mean_relative_change: float | None
    thresholds: dict[str, Any]
    confusion: dict[str, ConfusionMatrix]
    novel_recall: dict[str, dict[str, float]]
    sweeps: dict[str, dict] = field(default_factory=dict)
    empty_class_flags: dict[str, list[int]] = field(default_factory=dict)
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "class_names": self.class_names,
            "curves": {k: v.to_dict() for k, v in self.curves.items()},
            "relative_change_percent": self.relative_change,
            "mean_relative_change_percent": self.mean_relative_change,
            "thresholds": self.thresholds,
            "novel_recall": self.novel_recall,
            "confusion": {
                k: {"rows": cm.row_labels, "columns": cm.column_labels, "counts": cm.counts.tolist()}
                for k, cm in self.confusion.items()
            },
            "sweeps": self.sweeps,
            "empty_class_flags": self.empty_class_flags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, out_dir: str | Path) -> list[Path]:
        """Write the JSON report plus CSVs of the curves and confusion matrices."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "eval_report.json"]
        paths[0].write_text(self.to_json())
        curve_path = out / "f1_curves.csv"
        with open(curve_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pipeline", "n_novel", "f1_mean", "f1_min", "f1_max", "relative_change_percent"])
            for name, band in self.curves.items():
                for i, k in enumerate(band.k):
                    rc = self.relative_change[i] if name == "gmvae_u" else ""
                    w.writerow([name, k, band.mean[i], band.min[i], band.max[i], "" if rc is None else rc])
        paths.append(curve_path)
        names = dict(enumerate(self.class_names))
        for name, cm in self.confusion.items():
            p = out / f"confusion_{name}.csv"
            with open(p, "w", newline="") as fh:
                csv.writer(fh).writerows(cm.to_rows(names))
            paths.append(p)
        return paths


def compare_pipelines(
    gmvae_predictions: np.ndarray,
    iiloss_predictions: np.ndarray,
    labels: np.ndarray,
    bundle: SplitBundle,
    thresholds: dict[str, Any],
    class_names: list[str] | None = None,
) -> EvalReport:
    """Curves, relative change (GMVAE + U against ii-loss + OS) and confusion matrices."""
    if thresholds.get("tau_star") is None or thresholds.get("os_threshold") is None:
        raise ValueError("both pipelines need fitted thresholds")
    curves, flags, recall, cms = {}, {}, {}, {}
    for name, preds in (("gmvae_u", gmvae_predictions), ("iiloss_os", iiloss_predictions)):
        curves[name], flags[name] = incremental_novel_curve(preds, labels, bundle)
        r = novel_recall(preds, labels, bundle) if bundle.novel else []
        recall[name] = {"mean": float(np.mean(r)), "min": float(np.min(r)), "max": float(np.max(r))} if r else {}
        cms[name] = designated_confusion(preds, labels, bundle)
    changes = [relative_change(a, b) for a, b in zip(curves["gmvae_u"].mean, curves["iiloss_os"].mean)]
    defined = [c for c in changes if c is not None]
    return EvalReport(
        curves=curves,
        relative_change=changes,
        mean_relative_change=float(np.mean(defined)) if defined else None,
        thresholds=thresholds,
        confusion=cms,
        novel_recall=recall,
        empty_class_flags=flags,
        class_names=list(class_names or []),
    )

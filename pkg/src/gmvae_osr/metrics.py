"""Macro-F1 and confusion matrices with an aggregated novel column."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import NOVEL


@dataclass
class F1Report:
    macro: float
    per_class: dict[int, float]
    # universe classes absent from both truth and prediction (scored 0)
    empty_classes: list[int] = field(default_factory=list)


def _counts(t: np.ndarray, p: np.ndarray, c) -> tuple[int, int, int]:
    tp = int(np.sum((t == c) & (p == c)))
    fp = int(np.sum((t != c) & (p == c)))
    fn = int(np.sum((t == c) & (p != c)))
    return tp, fp, fn


def f1_report(true_labels, predicted_labels, class_universe, strict: bool = True) -> F1Report:
    """Per-class F1 over ``class_universe`` and their unweighted mean.

    With ``strict=False`` predictions outside the universe are allowed; they
    count as misses for the true class and as nobody's false positive. This
    is how rejections are scored on known-only validation data.
    """
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    universe = list(class_universe)
    if not universe:
        raise ValueError("empty class universe")
    allowed = set(universe)
    if set(np.unique(t).tolist()) - allowed:
        raise ValueError("true labels outside the class universe")
    if strict and set(np.unique(p).tolist()) - allowed:
        raise ValueError("predicted labels outside the class universe")
    per_class, empty = {}, []
    for c in universe:
        tp, fp, fn = _counts(t, p, c)
        if tp + fp + fn == 0:
            empty.append(c)
        denom = 2 * tp + fp + fn
        # 2PR/(P+R) reduces to 2TP/(2TP+FP+FN); 0/0 -> 0
        per_class[c] = 2 * tp / denom if denom else 0.0
    return F1Report(float(np.mean(list(per_class.values()))), per_class, empty)


def macro_f1(true_labels, predicted_labels, class_universe, strict: bool = True) -> float:
    return f1_report(true_labels, predicted_labels, class_universe, strict).macro


@dataclass
class ConfusionMatrix:
    row_labels: list[int]
    column_labels: list[int]
    counts: np.ndarray

    def to_rows(self, names: dict[int, str] | None = None) -> list[list]:
        """Header plus rows, suitable for CSV."""
        def name(c):
            if c == NOVEL:
                return "Novel"
            return names.get(c, str(c)) if names else str(c)

        header = ["true\\pred"] + [name(c) for c in self.column_labels]
        return [header] + [
            [name(r)] + [int(v) for v in row] for r, row in zip(self.row_labels, self.counts)
        ]


def confusion(true_labels, predicted_labels, known_ids, novel_ids=()) -> ConfusionMatrix:
    """Rows: known then per-novel-class true labels. Columns: known ids plus one Novel column.

    ``predicted_labels`` contain known ids or ``NOVEL``.
    """
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.shape != p.shape:
        raise ValueError("length mismatch")
    rows = [int(c) for c in known_ids] + [int(c) for c in novel_ids]
    cols = [int(c) for c in known_ids] + [NOVEL]
    r_index = {c: i for i, c in enumerate(rows)}
    c_index = {c: i for i, c in enumerate(cols)}
    counts = np.zeros((len(rows), len(cols)), dtype=int)
    for a, b in zip(t.tolist(), p.tolist()):
        if a not in r_index or b not in c_index:
            raise ValueError(f"label pair ({a}, {b}) outside the layout")
        counts[r_index[a], c_index[b]] += 1
    return ConfusionMatrix(rows, cols, counts)


def macro_f1_from_confusion(cm: ConfusionMatrix) -> float:
    """Open-set macro-F1 over the known columns plus Novel, with all novel rows pooled."""
    counts = cm.counts
    n_known = len(cm.column_labels) - 1
    known_rows = counts[:n_known]
    pooled = np.vstack([known_rows, counts[n_known:].sum(axis=0, keepdims=True)])
    f1s = []
    for j in range(pooled.shape[1]):
        tp = pooled[j, j]
        fp = pooled[:, j].sum() - tp
        fn = pooled[j].sum() - tp
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))

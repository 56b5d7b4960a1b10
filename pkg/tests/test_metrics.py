from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmvae_osr import metrics as M
from gmvae_osr.data import SplitBundle
from gmvae_osr.evaluation import compare_pipelines, incremental_novel_curve, relative_change
from gmvae_osr.geometry import NOVEL

# reference 7x5 confusion matrix for ii-loss + OS:
# rows are true classes 1..7 (5..7 novel), columns predicted 1..4 and Novel
TABLE6_LEFT = [
    [213, 117, 54, 64, 5],
    [114, 115, 37, 31, 15],
    [16, 14, 468, 95, 0],
    [21, 0, 92, 796, 0],
    [40, 15, 156, 118, 0],
    [45, 8, 221, 128, 0],
    [43, 41, 212, 140, 0],
]


def test_reference_confusion_macro_f1_matches_hand_computation():
    # per-class 2TP / (2TP + FP + FN), novel rows pooled into one true class:
    # class 1: TP 213, FP 114+16+21+(40+45+43)=279, FN 117+54+64+5=240
    # class 2: TP 115, FP 117+14+0+(15+8+41)=195,   FN 114+37+31+15=197
    # class 3: TP 468, FP 54+37+92+(156+221+212)=772, FN 16+14+95+0=125
    # class 4: TP 796, FP 64+31+95+(118+128+140)=576, FN 21+0+92+0=113
    # novel:   TP 0 -> F1 0
    hand = (Fraction(426, 945) + Fraction(230, 622) + Fraction(936, 1833) + Fraction(1592, 2281) + 0) / 5
    cm = M.ConfusionMatrix([1, 2, 3, 4, 5, 6, 7], [1, 2, 3, 4, NOVEL], np.array(TABLE6_LEFT))
    assert abs(M.macro_f1_from_confusion(cm) - float(hand)) < 1e-9
    # the same value through the label-level path
    true, pred = [], []
    for r, row in enumerate(TABLE6_LEFT):
        for c, n in enumerate(row):
            true += [r + 1 if r < 4 else NOVEL] * n
            pred += [c + 1 if c < 4 else NOVEL] * n
    assert abs(M.macro_f1(true, pred, [1, 2, 3, 4, NOVEL]) - float(hand)) < 1e-9


def test_perfect_and_binary_examples():
    assert M.macro_f1([0, 1, 2, 2], [0, 1, 2, 2], [0, 1, 2]) == 1.0
    rep = M.f1_report([1, 1, 2, 2], [1, 2, 1, 2], [1, 2])
    assert rep.per_class == {1: 0.5, 2: 0.5} and rep.macro == 0.5


def test_empty_class_scores_zero_and_is_flagged():
    rep = M.f1_report([0, 0, 1], [0, 0, 1], [0, 1, NOVEL])
    assert rep.per_class[NOVEL] == 0.0 and rep.empty_classes == [NOVEL]
    assert rep.macro == pytest.approx(2 / 3)


def test_rejections():
    with pytest.raises(ValueError):
        M.macro_f1([0, 1], [0], [0, 1])
    with pytest.raises(ValueError):
        M.macro_f1([0, 1], [0, 5], [0, 1])
    assert M.macro_f1([0, 1], [0, NOVEL], [0, 1], strict=False) == pytest.approx((1 + 0) / 2)


def _f1_oracle(t, p, universe):
    scores = []
    for c in universe:
        tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
        pp = sum(1 for b in p if b == c)
        ap = sum(1 for a in t if a == c)
        prec = tp / pp if pp else 0.0
        rec = tp / ap if ap else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(scores) / len(scores)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_macro_f1_matches_precision_recall_oracle(pairs):
    t = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    assert abs(M.macro_f1(t, p, [0, 1, 2, 3]) - _f1_oracle(t, p, [0, 1, 2, 3])) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40), st.randoms())
def test_macro_f1_permutation_invariant_and_relabel_equivariant(pairs, rnd):
    t = np.array([a for a, _ in pairs])
    p = np.array([b for _, b in pairs])
    base = M.macro_f1(t, p, [0, 1, 2, 3])
    order = list(range(len(t)))
    rnd.shuffle(order)
    assert M.macro_f1(t[order], p[order], [0, 1, 2, 3]) == pytest.approx(base, abs=1e-15)
    relabel = {0: 7, 1: 3, 2: 9, 3: 1}
    rt = [relabel[v] for v in t]
    rp = [relabel[v] for v in p]
    assert M.macro_f1(rt, rp, [7, 3, 9, 1]) == pytest.approx(base, abs=1e-15)


def test_confusion_examples():
    cm = M.confusion([0, 1, 2], [0, 1, 2], [0, 1, 2])
    np.testing.assert_array_equal(cm.counts[:, :3], np.eye(3, dtype=int))
    cm = M.confusion([5], [3], [1, 2, 3, 4], [5, 6])
    assert cm.counts[cm.row_labels.index(5), cm.column_labels.index(3)] == 1 and cm.counts.sum() == 1
    with pytest.raises(ValueError):
        M.confusion([9], [0], [0, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0, 1, 2, 7, 8]), st.sampled_from([0, 1, 2, NOVEL])), max_size=60))
def test_confusion_counts_match_oracle(pairs):
    t = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    cm = M.confusion(t, p, [0, 1, 2], [7, 8])
    for i, r in enumerate(cm.row_labels):
        for j, c in enumerate(cm.column_labels):
            assert cm.counts[i, j] == sum(1 for a, b in pairs if a == r and b == c)
        assert cm.counts[i].sum() == t.count(r)
    assert cm.counts.sum() == len(pairs)


def test_confusion_csv_rows():
    cm = M.confusion([0, 1, 7], [0, NOVEL, NOVEL], [0, 1], [7])
    rows = cm.to_rows({0: "a", 1: "b", 7: "z"})
    assert rows[0] == ["true\\pred", "a", "b", "Novel"]
    assert rows[3] == ["z", 0, 0, 1]


def test_relative_change():
    assert relative_change(0.5, 0.5) == 0.0
    assert relative_change(0.6, 0.5) == pytest.approx(20.0)
    assert relative_change(0.3, 0.0) is None


def _bundle(n_sets=100):
    # known classes 0, 1: rows 0..9 test rows; novel classes 2, 3 drawn per set
    labels = np.r_[np.repeat([0, 1], 5), np.repeat([2, 3], 12)]
    rng = np.random.default_rng(0)
    sets = [{2: np.sort(rng.choice(np.arange(10, 22), 2, replace=False)),
             3: np.sort(rng.choice(np.arange(22, 34), 2, replace=False))} for _ in range(n_sets)]
    b = SplitBundle([0, 1], [2, 3], np.array([], dtype=int), np.array([], dtype=int), np.arange(10), sets, 0)
    return labels, b


def test_incremental_curve_perfect_case_and_k0():
    labels, b = _bundle()
    perfect = np.where(labels < 2, labels, NOVEL)
    band, empty = incremental_novel_curve(perfect, labels, b)
    assert band.k == [0, 1, 2]
    assert band.min[0] == band.mean[0] == band.max[0]
    assert band.mean == [1.0, 1.0, 1.0] and empty == []


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_curve_band_ordering_and_k0_cross_check(seed):
    labels, b = _bundle()
    rng = np.random.default_rng(seed)
    preds = rng.choice([0, 1, NOVEL], size=len(labels))
    band, _ = incremental_novel_curve(preds, labels, b)
    for lo, m, hi in zip(band.min, band.mean, band.max):
        assert lo <= m <= hi and 0 <= lo and hi <= 1
    direct = M.macro_f1(labels[:10], preds[:10], [0, 1], strict=False)
    assert band.mean[0] == direct


def test_compare_pipelines_mean_relative_change():
    labels, b = _bundle()
    rng = np.random.default_rng(3)
    g = rng.choice([0, 1, NOVEL], size=len(labels))
    i = np.where(labels < 2, labels, 0)
    rep = compare_pipelines(g, i, labels, b, {"tau_star": 0.5, "os_threshold": 1.0})
    per_k = [100 * (a - c) / c for a, c in zip(rep.curves["gmvae_u"].mean, rep.curves["iiloss_os"].mean)]
    assert rep.relative_change == pytest.approx(per_k)
    assert rep.mean_relative_change == pytest.approx(sum(per_k) / len(per_k))
    with pytest.raises(ValueError):
        compare_pipelines(g, i, labels, b, {"tau_star": None, "os_threshold": 1.0})


def test_report_written(tmp_path):
    labels, b = _bundle(5)
    preds = np.where(labels < 2, labels, NOVEL)
    rep = compare_pipelines(preds, preds, labels, b, {"tau_star": 0.5, "os_threshold": 1.0}, ["a", "b", "c", "d"])
    paths = rep.write(tmp_path)
    assert {p.name for p in paths} == {"eval_report.json", "f1_curves.csv", "confusion_gmvae_u.csv",
                                       "confusion_iiloss_os.csv"}
    assert (tmp_path / "confusion_gmvae_u.csv").read_text().splitlines()[0] == "true\\pred,a,b,Novel"

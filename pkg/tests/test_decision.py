import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmvae_osr import decision as dec
from gmvae_osr.geometry import NOVEL, CentroidSet


def _cs(rows, ids=None):
    rows = np.asarray(rows, dtype=float)
    return CentroidSet(rows, ids or list(range(len(rows))))


def _u_oracle(e, centroids):
    d = [math.dist(e, c) for c in centroids]
    k = min(range(len(d)), key=lambda i: d[i])
    others = [d[i] for i in range(len(d)) if i != k]
    mean_other = sum(others) / len(others)
    return (d[k] / mean_other if mean_other else 1.0), k


def test_u_examples():
    two = _cs([[0, 0], [2, 0]])
    assert dec.uncertainty(np.array([0.0, 0.0]), two)[0] == 0.0
    assert dec.uncertainty(np.array([1.0, 0.0]), two)[0] == 1.0
    u, cls, flag = dec.uncertainty(np.array([3.0, 0.0]), two)
    assert u == pytest.approx(1 / 3) and cls == 1 and not flag


def test_degenerate_u_is_flagged():
    same = _cs([[1, 1], [1, 1], [1, 1]])
    u, _, flag = dec.uncertainty(np.array([1.0, 1.0]), same)
    assert u == 1.0 and flag


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_u_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 6))
    cents = rng.normal(size=(C, 3))
    e = rng.normal(size=(5, 3)) * 3
    u, nearest, _ = dec.uncertainty_batch(e, _cs(cents))
    for i in range(5):
        ou, ok = _u_oracle(e[i], cents)
        assert abs(u[i] - ou) < 1e-9 and nearest[i] == ok


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.01, 100), st.floats(-100, 100))
def test_u_scale_and_translation_invariant(seed, scale, shift):
    rng = np.random.default_rng(seed)
    cents = rng.normal(size=(4, 2))
    e = rng.normal(size=(6, 2))
    u = dec.uncertainty_batch(e, _cs(cents))[0]
    np.testing.assert_allclose(dec.uncertainty_batch(e * scale, _cs(cents * scale))[0], u, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(dec.uncertainty_batch(e + shift, _cs(cents + shift))[0], u, rtol=1e-9, atol=1e-9)


def test_u_tends_to_one_far_away():
    cents = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    diameter = max(math.dist(a, b) for a in cents for b in cents)
    for angle in np.linspace(0, 2 * np.pi, 13):
        e = 1e3 * diameter * np.array([math.cos(angle), math.sin(angle)])
        assert abs(dec.uncertainty(e, _cs(cents))[0] - 1) < 0.01


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_u_bound(seed):
    rng = np.random.default_rng(seed)
    cents = rng.normal(size=(4, 2))
    e = rng.normal(size=2) * 2
    u, cls, _ = dec.uncertainty(e, _cs(cents))
    d = np.linalg.norm(cents - e, axis=1)
    assert u >= 0
    assert u <= d[cls] / np.delete(d, cls).min() + 1e-12


def test_prediction_examples():
    two = _cs([[0, 0], [2, 0]], [5, 8])
    assert dec.predict_open_set_u(np.array([0.0, 0.0]), two, 0.0).label == 5
    assert dec.predict_open_set_u(np.array([0.5, 0.1]), two, 0.0).is_novel
    assert dec.predict_open_set_u(np.array([3.0, 0.0]), two, 0.33).label == NOVEL
    assert dec.predict_open_set_u(np.array([3.0, 0.0]), two, 0.34).label == 8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(0, 1), st.floats(0, 1))
def test_raising_tau_never_creates_novel(seed, t1, t2):
    lo, hi = sorted([t1, t2])
    rng = np.random.default_rng(seed)
    cs = _cs(rng.normal(size=(3, 2)))
    e = rng.normal(size=(20, 2)) * 2
    a, _, _ = dec.predict_u_from_embeddings(e, cs, lo)
    b, u, _ = dec.predict_u_from_embeddings(e, cs, hi)
    assert np.all((a == NOVEL) | (a == b))
    assert np.all(dec.predict_u_from_embeddings(e, cs, 1.0)[0][u <= 1] != NOVEL)


def _step_curve(step_at=0.3):
    grid = dec.default_grid()
    f1 = [0.0 if t < step_at - 1e-12 else 0.9 for t in grid]
    return dec.ThresholdCurve(grid, f1, list(np.diff(f1) / np.diff(grid)))


def test_step_curve_selection():
    # F1' at 0.29 is 0.9 / 0.01 = 90 >= 1, so tau~ = 0.29; the next slope (at 0.30) is 0 <= 0.25
    curve = _step_curve()
    tau = dec.select_threshold_saturation(curve)
    assert curve.tau_tilde == 0.29
    assert tau == 0.30
    assert tau in curve.tau_grid and tau > curve.tau_tilde


def test_flat_curve_has_no_saturation():
    grid = dec.default_grid()
    curve = dec.ThresholdCurve(grid, [0.5] * len(grid), [0.0] * (len(grid) - 1))
    with pytest.raises(dec.NoSaturationError) as info:
        dec.select_threshold_saturation(curve)
    assert info.value.fallback_tau == 0.0
    assert dec.select_threshold_saturation(curve, allow_fallback=True) == 0.0 and curve.fallback


def test_curve_endpoints_and_monotonicity():
    rng = np.random.default_rng(0)
    cents = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    labels = np.repeat([0, 1, 2], 40)
    e = cents[labels] + rng.normal(size=(120, 2))
    cs = _cs(cents)
    curve = dec.f1_vs_tau_curve(e, labels, cs)
    nearest = dec.uncertainty_batch(e, cs)[1]
    from gmvae_osr.metrics import macro_f1

    assert curve.f1_values[-1] == pytest.approx(macro_f1(labels, nearest, [0, 1, 2]))
    assert curve.f1_values[0] == 0.0
    assert all(b >= a - 1e-12 for a, b in zip(curve.f1_values, curve.f1_values[1:]))


def test_curve_save(tmp_path):
    curve = _step_curve()
    cfg = dec.ThresholdSelectionConfig()
    dec.select_threshold_saturation(curve, cfg)
    curve.save(tmp_path / "c.csv", tmp_path / "c.json", cfg)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "tau,f1,f1_prime" and len(rows) == 102


def test_bad_selection_config():
    with pytest.raises(ValueError):
        dec.ThresholdSelectionConfig(epsilon1=0.2, epsilon2=0.25)
    with pytest.raises(ValueError):
        dec.ThresholdSelectionConfig(tau_grid=[0.0, 0.5, 0.4])


def test_sweep_points_clip():
    pts, clipped = dec.sweep_points(0.01, 0.05)
    assert pts == [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06] and clipped
    pts, clipped = dec.sweep_points(0.69, 0.05)
    assert pts[0] == 0.64 and pts[-1] == 0.74 and len(pts) == 11 and not clipped


def test_sweep_halfwidth_zero_is_direct_evaluation():
    from gmvae_osr.metrics import macro_f1

    rng = np.random.default_rng(2)
    cs = _cs([[0, 0], [4, 0]])
    e = rng.normal(size=(30, 2)) * 2
    truth = np.where(rng.random(30) < 0.3, NOVEL, rng.integers(0, 2, 30))
    table = dec.sweep_thresholds(e, truth, cs, 0.5, halfwidth=0.0)
    pred = dec.predict_u_from_embeddings(e, cs, 0.5)[0]
    assert table.points == [0.5]
    assert table.f1_mean == [macro_f1(truth, pred, [0, 1, NOVEL])]


def test_sweep_constant_when_everything_sits_on_centroids():
    cs = _cs([[0, 0], [4, 0], [0, 4]])
    e = np.repeat(cs.centroids, 5, axis=0)
    truth = np.repeat([0, 1, 2], 5)
    table = dec.sweep_thresholds(e, truth, cs, 0.5, halfwidth=0.05)
    assert len(set(table.f1_mean)) == 1


def test_outlier_sweep_refits_alpha():
    from gmvae_osr.iiloss import nearest_rank_percentile

    cs = _cs([[0, 0], [4, 0]])
    train_scores = np.arange(1, 101, dtype=float) / 100
    e = np.array([[0.1, 0.0], [4.0, 0.5], [9.0, 9.0]])
    table = dec.sweep_thresholds(e, np.array([0, 1, NOVEL]), cs, 0.01, halfwidth=0.05,
                                 rule="outlier_score", training_scores=train_scores)
    assert table.clipped and table.points[0] == 0.0
    assert table.thresholds == [nearest_rank_percentile(train_scores, 1 - p) for p in table.points]
    with pytest.raises(ValueError):
        dec.sweep_thresholds(e, np.array([0, 1, NOVEL]), cs, 0.01, rule="outlier_score")

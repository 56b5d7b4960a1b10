import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmvae_osr import nn
from conftest import central_fd, max_rel_error


def _params(spec, **arrays):
    p = nn.init_params(spec, np.random.default_rng(0))
    for k, v in arrays.items():
        p.arrays[k] = np.asarray(v, dtype=float)
    return p


def test_identity_layer_passes_input_through():
    spec = nn.MlpSpec.build([2, 2], output="identity")
    p = _params(spec, W0=np.eye(2), b0=np.zeros(2))
    np.testing.assert_array_equal(nn.forward(spec, p, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_zero_sigmoid_layer_gives_half():
    spec = nn.MlpSpec.build([5, 3], output="sigmoid")
    p = _params(spec, W0=np.zeros((5, 3)), b0=np.zeros(3))
    out = nn.forward(spec, p, np.random.default_rng(1).normal(size=(4, 5)))
    np.testing.assert_array_equal(out, np.full((4, 3), 0.5))


def test_hand_matrix_multiply():
    # x W + b = [1, 2, 3] @ [[1,0],[0,1],[1,1]] + [0.5, -0.5] = [4, 5] + b
    spec = nn.MlpSpec.build([3, 2], output="identity")
    p = _params(spec, W0=[[1, 0], [0, 1], [1, 1]], b0=[0.5, -0.5])
    np.testing.assert_allclose(nn.forward(spec, p, np.array([[1.0, 2.0, 3.0]])), [[4.5, 4.5]])


def test_wrong_width_rejected():
    spec = nn.MlpSpec.build([3, 2])
    p = nn.init_params(spec, np.random.default_rng(0))
    with pytest.raises(nn.RejectedInputError):
        nn.forward(spec, p, np.ones((1, 4)))
    with pytest.raises(nn.RejectedInputError):
        nn.forward(spec, p, np.array([[1.0, np.nan, 0.0]]))


def test_linear_backward_matches_calculus(rng):
    spec = nn.MlpSpec.build([3, 2], output="identity")
    p = nn.init_params(spec, rng)
    x = rng.normal(size=(1, 3))
    g = rng.normal(size=(1, 2))
    _, cache = nn.forward(spec, p, x, return_cache=True)
    grads, dx = nn.backward(spec, p, cache, g)
    np.testing.assert_allclose(grads["W0"], x.T @ g)
    np.testing.assert_allclose(grads["b0"], g[0])
    np.testing.assert_allclose(dx, g @ p.arrays["W0"].T)


def test_zero_upstream_gives_zero_gradients(rng):
    spec = nn.MlpSpec.build([4, 6, 3], batchnorm=True)
    p = nn.init_params(spec, rng)
    _, cache = nn.forward(spec, p, rng.normal(size=(5, 4)), mode="train", return_cache=True)
    grads, _ = nn.backward(spec, p, cache, np.zeros((5, 3)))
    assert all(np.all(g == 0) for g in grads.values())


@pytest.mark.parametrize("batchnorm,dropout,mode", [
    (False, 0.0, "infer"),
    (True, 0.0, "train"),
    (True, 0.3, "train"),
])
def test_backward_matches_finite_differences(batchnorm, dropout, mode):
    rng = np.random.default_rng(7)
    spec = nn.MlpSpec.build([4, 6, 5, 3], hidden="sigmoid", batchnorm=batchnorm, dropout=dropout)
    p = nn.init_params(spec, rng)
    x = rng.normal(size=(6, 4))
    up = rng.normal(size=(6, 3))

    def loss():
        out = nn.forward(spec, p, x, mode=mode, rng=np.random.default_rng(3))
        return float(np.sum(out * up))

    _, cache = nn.forward(spec, p, x, mode=mode, rng=np.random.default_rng(3), return_cache=True)
    grads, dx = nn.backward(spec, p, cache, up)
    for k, a in p.arrays.items():
        assert max_rel_error(grads[k], central_fd(loss, a)) < 1e-4, k
    assert max_rel_error(dx, central_fd(loss, x)) < 1e-4


def test_batchnorm_train_output_has_shift_and_scale(rng):
    spec = nn.MlpSpec.build([3, 4], output="identity", batchnorm=True)
    p = nn.init_params(spec, rng)
    p.arrays["gamma0"] = np.array([0.5, 2.0, 1.0, 3.0])
    p.arrays["beta0"] = np.array([1.0, -1.0, 0.0, 4.0])
    out = nn.forward(spec, p, rng.normal(size=(200, 3)) * 5 + 2, mode="train")
    np.testing.assert_allclose(out.mean(axis=0), p.arrays["beta0"], atol=1e-5)
    # BN_EPS in the denominator shrinks the variance very slightly
    np.testing.assert_allclose(out.var(axis=0), p.arrays["gamma0"] ** 2, rtol=1e-5)


def test_infer_is_idempotent(rng):
    spec = nn.MlpSpec.build([3, 8, 2], batchnorm=True, dropout=0.5)
    p = nn.init_params(spec, rng)
    x = rng.normal(size=(4, 3))
    before = p.checksum()
    a = nn.forward(spec, p, x)
    b = nn.forward(spec, p, x)
    np.testing.assert_array_equal(a, b)
    assert p.checksum() == before


def test_running_stats_blend(rng):
    spec = nn.MlpSpec.build([2, 2], output="identity", batchnorm=True)
    p = nn.init_params(spec, rng)
    x = rng.normal(size=(10, 2))
    _, cache = nn.forward(spec, p, x, mode="train", return_cache=True)
    nn.update_running_stats(spec, p, cache, momentum=0.9)
    pre = x @ p.arrays["W0"] + p.arrays["b0"]
    np.testing.assert_allclose(p.buffers["rmean0"], 0.1 * pre.mean(axis=0))
    np.testing.assert_allclose(p.buffers["rvar0"], 0.9 + 0.1 * pre.var(axis=0, ddof=1))


def test_adam_zero_gradient_keeps_params():
    arrays = {"w": np.array([1.0, -2.0])}
    state = nn.AdamState.for_params(arrays)
    nn.adam_step(arrays, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(arrays["w"], [1.0, -2.0])


def test_adam_first_step_hand_value():
    # m1 = 0.1, v1 = 0.001; bias-corrected both give 1, so the step is lr * 1 / (1 + 1e-8)
    arrays = {"w": np.array([0.0])}
    state = nn.AdamState.for_params(arrays, learning_rate=0.001)
    nn.adam_step(arrays, {"w": np.array([1.0])}, state)
    assert arrays["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert arrays["w"][0] == pytest.approx(-0.001, abs=1e-10)


def test_adam_non_finite_gradient_aborts_whole_update():
    arrays = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = nn.AdamState.for_params(arrays)
    with pytest.raises(nn.NonFiniteGradientError):
        nn.adam_step(arrays, {"a": np.array([1.0]), "b": np.array([np.inf])}, state)
    assert arrays["a"][0] == 1.0 and arrays["b"][0] == 2.0
    assert state.step == 0


def test_training_trajectories_are_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(42)
        spec = nn.MlpSpec.build([3, 5, 2], batchnorm=True, dropout=0.2, hidden="relu")
        p = nn.init_params(spec, rng)
        state = nn.AdamState.for_params(p.arrays)
        x = rng.normal(size=(8, 3))
        for _ in range(5):
            out, cache = nn.forward(spec, p, x, mode="train", rng=rng, return_cache=True)
            grads, _ = nn.backward(spec, p, cache, out)
            nn.adam_step(p.arrays, grads, state)
            nn.update_running_stats(spec, p, cache)
        return p.checksum()

    assert run() == run()


def test_sample_gaussian_fixed_noise():
    g = nn.GaussianParams(np.array([2.0, 2.0]), np.array([0.0, 0.0]))
    s, _ = nn.sample_gaussian(g, eps=np.array([1.0, -1.0]))
    np.testing.assert_array_equal(s, [3.0, 1.0])


@given(st.floats(-3, 3))
def test_vanishing_variance_sample_sits_on_mean(e):
    g = nn.GaussianParams(np.array([0.7]), np.array([-np.inf]))
    s, _ = nn.sample_gaussian(g, eps=np.array([e]))
    assert abs(s[0] - 0.7) < 1e-3


def test_standard_normal_moments():
    g = nn.GaussianParams(np.zeros(100_000), np.zeros(100_000))
    s, _ = nn.sample_gaussian(g, rng=np.random.default_rng(5))
    assert abs(s.mean()) < 0.02
    assert abs(s.var() - 1) < 0.05


def test_logvar_head_is_clamped():
    g, mask = nn.split_gaussian_head(np.array([[0.0, 1.0, 50.0, -50.0]]))
    np.testing.assert_array_equal(g.log_variance, [[10.0, -10.0]])
    np.testing.assert_array_equal(mask, [[0.0, 0.0]])


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_kl_standard_normal_non_negative_and_matches_closed_form(mean, logvar):
    n = min(len(mean), len(logvar))
    m, lv = np.array(mean[:n]), np.array(logvar[:n])
    kl = nn.kl_standard_normal(nn.GaussianParams(m, lv))
    oracle = sum(0.5 * (mi**2 + np.exp(li) - 1 - li) for mi, li in zip(m, lv))
    assert kl >= -1e-12
    assert kl == pytest.approx(oracle, rel=1e-12, abs=1e-12)


def test_serialization_round_trip_is_exact(tmp_path, rng):
    spec = nn.MlpSpec.build([3, 4, 2], batchnorm=True, dropout=0.1)
    p = nn.init_params(spec, rng)
    p.buffers["rmean0"] = rng.normal(size=4)
    nn.save_params(tmp_path / "m.json", spec, p)
    spec2, p2 = nn.load_params(tmp_path / "m.json")
    assert spec2 == spec
    assert p2.checksum() == p.checksum()
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["spec"]["layer_sizes"] == [3, 4, 2]

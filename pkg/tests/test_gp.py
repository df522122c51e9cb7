import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, lml_direct
from xalm.core import REFERENCE_SPACE, FeatureSpec, LabeledDataset, ScenarioSpace, latin_hypercube
from xalm.gp import (
    FitConfig,
    GPPosterior,
    IllConditionedError,
    KernelHyperparameters,
    TrainedGP,
    ard_rbf,
    condition,
    fit_gp,
    intervals,
    jittered_cholesky,
    kernel_matrix,
    load_gp,
    log_marginal_likelihood,
    predict,
    predict_latent,
    save_gp,
)
from xalm.oracle import SyntheticOracle


def random_instance(rng, n, d):
    x = rng.uniform(size=(n, d))
    y = rng.normal(size=n)
    hp = KernelHyperparameters.create(
        rng.uniform(0.2, 2.0, size=d), rng.uniform(0.5, 2.0), rng.uniform(0.01, 0.5)
    )
    return x, y, hp


def test_ard_rbf_zero_distance():
    hp = KernelHyperparameters.create([0.3, 2.0], output_variance=1.7)
    assert ard_rbf([0.1, 0.2], [0.1, 0.2], hp) == pytest.approx(1.7)


def test_ard_rbf_hand_value():
    hp = KernelHyperparameters.create([1.0, 1.0], output_variance=1.0)
    assert ard_rbf([0.0, 0.0], [2.0, 0.0], hp) == pytest.approx(math.exp(-2.0), abs=1e-12)


def test_ard_rbf_long_lengthscale_limit():
    hp = KernelHyperparameters.create([1e8, 1e8], output_variance=2.5)
    assert ard_rbf([0.0, 0.0], [3.0, -1.0], hp) == pytest.approx(2.5, rel=1e-12)


def test_ard_rbf_dimension_mismatch():
    hp = KernelHyperparameters.create([1.0, 1.0])
    with pytest.raises(ValueError):
        ard_rbf([0.0, 0.0, 0.0], [0.0, 0.0], hp)


def test_kernel_matrix_symmetric_and_factorizable():
    rng = np.random.default_rng(0)
    x, _, hp = random_instance(rng, 30, 4)
    k = kernel_matrix(x, x, hp)
    assert np.max(np.abs(k - k.T)) < 1e-12
    jittered_cholesky(k)


def test_lml_single_point():
    hp = KernelHyperparameters.create([1.0], output_variance=0.75, noise_variance=0.25)
    value, _ = log_marginal_likelihood((np.zeros((1, 1)), np.zeros(1)), hp, jitter=0.0)
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_lml_matches_textbook_formula():
    rng = np.random.default_rng(1)
    x, y, hp = random_instance(rng, 15, 3)
    value, _ = log_marginal_likelihood((x, y), hp, jitter=0.0)
    ref = lml_direct(x, y, hp.lengthscales, hp.output_variance, hp.noise_variance)
    assert value == pytest.approx(ref, rel=1e-10)


def test_lml_gradient_n20_d3():
    rng = np.random.default_rng(2)
    x, y, hp = random_instance(rng, 20, 3)
    _, grad = log_marginal_likelihood((x, y), hp, jitter=0.0)

    def f(theta):
        return log_marginal_likelihood((x, y), KernelHyperparameters.from_vector(theta), jitter=0.0)[0]

    fd = central_difference(f, hp.to_vector())
    assert np.all(np.abs(grad - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-6) + 1e-8)


def test_duplicate_point_without_noise_or_jitter_fails():
    hp = KernelHyperparameters.create([1.0], noise_variance=1e-300)
    x = np.array([[0.3], [0.3]])
    with pytest.raises(IllConditionedError, match="ill-conditioned"):
        log_marginal_likelihood((x, np.array([1.0, 2.0])), hp, jitter=0.0)


def test_jitter_escalates_then_gives_up():
    k = np.array([[1.0, 1.0], [1.0, 1.0]]) - np.eye(2) * 1e-6
    _, used = jittered_cholesky(k, 1e-8, 1e-4)
    assert used > 1e-6
    with pytest.raises(IllConditionedError):
        jittered_cholesky(-np.eye(2), 1e-8, 1e-4)


def smooth_1d(n):
    space = ScenarioSpace([FeatureSpec("x", 0.0, 1.0, 0.5)])
    x = np.linspace(0, 1, n)[:, None]
    return space, LabeledDataset(x, np.sin(6 * x[:, 0]))


def test_fit_noiseless_shrinks_noise():
    space = REFERENCE_SPACE
    x = latin_hypercube(50, space, 4)
    y = SyntheticOracle("mercury6", noise=False)(x)[:, 2]
    gp = fit_gp(LabeledDataset(x, y), space)
    assert gp.hyperparameters.noise_variance < 0.05


def test_fit_is_deterministic():
    space, data = smooth_1d(25)
    a, b = fit_gp(data, space), fit_gp(data, space)
    assert a.to_json() == b.to_json()


def test_fit_two_points_interpolates():
    space = ScenarioSpace([FeatureSpec("x", 0.0, 1.0, 0.5)])
    data = LabeledDataset(np.array([[0.2], [0.7]]), np.array([1.0, 3.0]))
    gp = fit_gp(data, space)
    post = predict(gp, data.inputs)
    tol = 2 * math.sqrt(gp.hyperparameters.noise_variance) * gp.output_transform.std
    assert np.all(np.abs(post.mean - data.outputs) <= tol)


def test_fit_errors():
    space, data = smooth_1d(5)
    with pytest.raises(ValueError):
        fit_gp(data.subset([0]), space)
    with pytest.raises(ValueError, match="degenerate"):
        fit_gp(LabeledDataset(data.inputs, np.ones(5)), space)


def test_fit_returns_best_iterate():
    space, data = smooth_1d(20)
    short = fit_gp(data, space, FitConfig(max_steps=40))
    long = fit_gp(data, space)
    assert long.log_marginal_likelihood() >= short.log_marginal_likelihood() - 1e-9


def test_prior_reversion_far_away():
    hp = KernelHyperparameters.create([0.05, 0.05], output_variance=1.3, noise_variance=0.01)
    gp = condition(np.array([[0.1, 0.1], [0.2, 0.3]]), np.array([0.5, -0.4]), hp)
    mean, var = predict_latent(gp, np.array([[1.0, 1.0]]))
    assert abs(mean[0]) < 1e-12 and var[0] == pytest.approx(1.3)


def test_one_point_closed_form():
    hp = KernelHyperparameters.create([0.4], output_variance=1.5, noise_variance=0.2)
    gp = condition(np.array([[0.3]]), np.array([0.8]), hp, jitter=0.0)
    q = np.array([[0.55]])
    k = 1.5 * math.exp(-0.5 * (0.25 / 0.4) ** 2)
    mean, var = predict_latent(gp, q)
    assert mean[0] == pytest.approx(k * 0.8 / 1.7, rel=1e-12)
    assert var[0] == pytest.approx(1.5 - k * k / 1.7, rel=1e-12)


def test_interpolation_with_tiny_noise():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(8, 2))
    y = rng.normal(size=8)
    hp = KernelHyperparameters.create([0.3, 0.3], noise_variance=1e-8)
    gp = condition(x, y, hp)
    mean, var = predict_latent(gp, x)
    assert np.max(np.abs(mean - y)) < 1e-4 and np.max(var) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_variance_bounded_and_monotone_in_data(seed):
    rng = np.random.default_rng(seed)
    x, y, hp = random_instance(rng, 12, 3)
    q = rng.uniform(size=(20, 3))
    small = condition(x[:-1], y[:-1], hp)
    full = condition(x, y, hp)
    _, v_small = predict_latent(small, q)
    _, v_full = predict_latent(full, q)
    assert np.all(v_full <= hp.output_variance + 1e-9)
    assert np.all(v_full <= v_small + 1e-9)


def test_predict_empty_batch():
    space, data = smooth_1d(6)
    gp = fit_gp(data, space, FitConfig(max_steps=5))
    post = predict(gp, np.zeros((0, 1)))
    assert post.mean.shape == (0,) and post.epistemic_variance.shape == (0,)


def test_predict_rejects_nonfinite():
    space, data = smooth_1d(6)
    gp = fit_gp(data, space, FitConfig(max_steps=5))
    with pytest.raises(ValueError):
        predict(gp, np.array([[np.nan]]))


def test_posterior_units_and_ordering():
    space, data = smooth_1d(10)
    gp = fit_gp(data, space)
    post = predict(gp, np.linspace(0, 1, 7)[:, None])
    assert np.all(post.predictive_variance >= post.epistemic_variance)
    assert np.all(post.epistemic_variance >= 0)


def test_intervals_hand_case():
    post = GPPosterior(np.zeros(1), np.ones(1), np.full(1, 4.0))
    ci_lo, ci_hi, pi_lo, pi_hi = intervals(post, 0.95)
    assert ci_hi[0] == pytest.approx(1.959964, abs=1e-6)
    assert pi_hi[0] == pytest.approx(3.919928, abs=1e-6)
    assert ci_lo[0] == -ci_hi[0] and pi_lo[0] == -pi_hi[0]


def test_intervals_zero_variance_and_nesting():
    post = GPPosterior(np.array([2.0, 1.0]), np.array([0.0, 0.3]), np.array([0.1, 0.5]))
    ci_lo, ci_hi, pi_lo, pi_hi = intervals(post, 0.9)
    assert ci_lo[0] == ci_hi[0] == 2.0
    assert np.all(pi_lo <= ci_lo) and np.all(ci_hi <= pi_hi)
    with pytest.raises(ValueError):
        intervals(post, 1.0)


def test_trained_gp_invariants():
    space, data = smooth_1d(15)
    gp = fit_gp(data, space)
    hp = gp.hyperparameters
    k = kernel_matrix(gp.train_inputs, gp.train_inputs, hp) + (hp.noise_variance + gp.jitter) * np.eye(15)
    assert np.max(np.abs(gp.chol_factor @ gp.chol_factor.T - k)) <= 1e-8 * np.max(np.abs(k))
    assert np.max(np.abs(k @ gp.alpha - gp.train_outputs)) < 1e-8


def test_serialization_roundtrip(tmp_path):
    space, data = smooth_1d(12)
    gp = fit_gp(data, space)
    path = tmp_path / "gp.json"
    save_gp(gp, path)
    back = load_gp(path)
    q = np.linspace(0, 1, 9)[:, None]
    assert np.array_equal(predict(back, q).mean, predict(gp, q).mean)
    assert back.to_json() == gp.to_json()


def test_from_dict_rejects_other_models():
    with pytest.raises(ValueError):
        TrainedGP.from_dict({"model": "gbm", "format_version": 1})


def test_training_cap():
    space = REFERENCE_SPACE
    x = latin_hypercube(2001, space, 0)
    with pytest.raises(ValueError, match="2000"):
        fit_gp(LabeledDataset(x, x[:, 0]), space)

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import permutation_shapley, rmse_loop
from xalm.core import REFERENCE_SPACE, LabeledDataset, latin_hypercube
from xalm.gp import FitConfig, fit_gp
from xalm.oracle import SyntheticOracle
from xalm.shapley import (
    ExplanationSet,
    ShapError,
    ShapExplanation,
    all_coalitions,
    default_background,
    explain_exact,
    explain_sampled,
    explain_set,
    load_explanations,
    sample_coalitions,
    save_explanations,
    shap_rmse,
    shapley_kernel_weight,
    summary_export,
)


def nonlinear(x):
    x = np.atleast_2d(x)
    return np.sin(x[:, 0]) * x[:, 1] + x[:, 2] ** 2 - 0.5 * x[:, 0] * x[:, 3] + np.exp(0.3 * x[:, -1])


@pytest.mark.parametrize("d, s, w", [(3, 1, 1 / 3), (3, 2, 1 / 3), (4, 2, 0.125)])
def test_kernel_weight_values(d, s, w):
    assert shapley_kernel_weight(d, s) == pytest.approx(w, rel=1e-15)


@pytest.mark.parametrize("s", [0, 3])
def test_kernel_weight_rejects_endpoints(s):
    with pytest.raises(ShapError):
        shapley_kernel_weight(3, s)


def test_all_coalitions_count():
    assert all_coalitions(5).shape == (30, 5)


def test_linear_model_closed_form():
    e = explain_exact(lambda x: 2 * x[:, 0] + 3 * x[:, 1], np.array([1.0, 1.0]), np.zeros((1, 2)))
    assert np.allclose(e.attributions, [2.0, 3.0], atol=1e-12)
    assert abs(e.base_value) < 1e-12


def test_linear_model_general_background():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    bg = rng.normal(size=(30, 5))
    x = rng.normal(size=5)
    e = explain_exact(lambda z: z @ w + 1.0, x, bg)
    assert np.max(np.abs(e.attributions - w * (x - bg.mean(axis=0)))) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_exact_matches_permutations(d, seed):
    rng = np.random.default_rng(seed)
    bg = rng.normal(size=(7, d))
    x = rng.normal(size=d)
    model = lambda z: nonlinear(np.column_stack([z, np.zeros((len(z), max(0, 4 - d)))]))  # noqa: E731
    e = explain_exact(model, x, bg)
    base, phi = permutation_shapley(model, x, bg)
    assert np.max(np.abs(e.attributions - phi)) < 1e-8
    assert abs(e.base_value - base) < 1e-8
    assert abs(e.additivity_gap()) < 1e-8


def test_base_value_is_background_mean():
    rng = np.random.default_rng(1)
    bg = rng.normal(size=(12, 4))
    e = explain_exact(nonlinear, rng.normal(size=4), bg)
    assert abs(e.base_value - np.mean(nonlinear(bg))) < 1e-8


def test_symmetry_axiom():
    model = lambda z: z[:, 0] * z[:, 1] + np.sin(z[:, 0] + z[:, 1]) + z[:, 2]  # noqa: E731
    bg = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 2.0]])
    e = explain_exact(model, np.array([0.7, 0.7, 0.1]), bg)
    assert abs(e.attributions[0] - e.attributions[1]) < 1e-8


def test_dummy_feature_gets_zero():
    rng = np.random.default_rng(2)
    model = lambda z: z[:, 0] ** 2 + z[:, 1] * z[:, 2]  # noqa: E731
    e = explain_exact(model, rng.normal(size=4), rng.normal(size=(10, 4)))
    assert abs(e.attributions[3]) < 1e-8


def test_linearity_axiom():
    rng = np.random.default_rng(3)
    f1 = nonlinear
    f2 = lambda z: np.cos(z[:, 1]) * z[:, 0]  # noqa: E731
    bg, x = rng.normal(size=(9, 4)), rng.normal(size=4)
    combo = explain_exact(lambda z: 2.0 * f1(z) - 0.5 * f2(z), x, bg)
    a, b = explain_exact(f1, x, bg), explain_exact(f2, x, bg)
    assert np.max(np.abs(combo.attributions - (2.0 * a.attributions - 0.5 * b.attributions))) < 1e-8


def test_exact_dimension_cap():
    with pytest.raises(ShapError, match="explain_sampled"):
        explain_exact(lambda z: z.sum(axis=1), np.zeros(17), np.zeros((1, 17)))


def test_sampled_full_budget_is_exact():
    rng = np.random.default_rng(4)
    bg, x = rng.normal(size=(8, 6)), rng.normal(size=6)
    model = lambda z: nonlinear(z) + z[:, 4] * z[:, 5]  # noqa: E731
    exact = explain_exact(model, x, bg)
    sampled = explain_sampled(model, x, bg, n_coalitions=64, seed=0)
    assert np.max(np.abs(sampled.attributions - exact.attributions)) < 1e-8


def test_sampled_deterministic_and_additive():
    rng = np.random.default_rng(5)
    bg, x = rng.normal(size=(8, 10)), rng.normal(size=10)
    model = lambda z: nonlinear(z) + z[:, 7] * z[:, 8] * z[:, 9]  # noqa: E731
    a = explain_sampled(model, x, bg, n_coalitions=100, seed=9)
    b = explain_sampled(model, x, bg, n_coalitions=100, seed=9)
    assert np.array_equal(a.attributions, b.attributions)
    assert abs(a.additivity_gap()) < 1e-6


def test_sampled_converges_in_higher_dimension():
    rng = np.random.default_rng(6)
    d = 10
    bg, x = rng.normal(size=(6, d)), rng.normal(size=d)
    model = lambda z: nonlinear(z) + z[:, 5] * z[:, 6] - np.tanh(z[:, 7] * z[:, 8] + z[:, 9])  # noqa: E731
    exact = explain_exact(model, x, bg).attributions
    errors = []
    for budget in (60, 300, 900):
        per_seed = [rmse_loop(explain_sampled(model, x, bg, budget, seed=s).attributions, exact) for s in range(5)]
        errors.append(np.mean(per_seed))
    assert errors[2] < errors[0]
    assert errors[2] < 0.05 * np.max(np.abs(exact))


def test_sample_coalitions_budget_floor():
    with pytest.raises(ShapError):
        sample_coalitions(6, 13, 0)
    masks, weights = sample_coalitions(8, 40, 0)
    assert masks.shape[1] == 8 and np.all(weights > 0)
    assert np.all(masks.any(axis=1)) and np.all(~masks.all(axis=1))


def test_shap_rmse_cases():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(4, 3))

    def make(phi):
        return ExplanationSet(tuple(ShapExplanation(0.0, p, x, p.sum()) for p, x in zip(phi, pts)))

    a_phi, b_phi = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    a, b = make(a_phi), make(b_phi)
    assert shap_rmse(a, a) == 0.0
    assert shap_rmse(a, make(a_phi + 0.25)) == pytest.approx(0.25, abs=1e-12)
    assert shap_rmse(a, b) == pytest.approx(rmse_loop(a_phi, b_phi), abs=1e-12)
    with pytest.raises(ShapError):
        shap_rmse(a, make(b_phi[:3]))


def test_summary_export_shape_and_ranking(tmp_path):
    w = np.array([0.1, 5.0, -0.3])
    pts = np.random.default_rng(8).normal(size=(2, 3))
    expl = explain_set(lambda z: z @ w, pts, np.zeros((1, 3)), feature_names=["a", "b", "c"])
    path, ranking = summary_export(expl, tmp_path / "s.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "row_id,feature,feature_value,shap_value"
    assert len(lines) == 7
    with open(ranking) as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["feature"] == "b"
    first = path.read_bytes()
    summary_export(expl, tmp_path / "s.csv")
    assert path.read_bytes() == first


def test_summary_export_rejects_empty(tmp_path):
    with pytest.raises(ShapError):
        summary_export(ExplanationSet(()), tmp_path / "x.csv")


def test_explanations_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    expl = explain_set(nonlinear, rng.normal(size=(5, 4)), rng.normal(size=(3, 4)))
    save_explanations(expl, tmp_path / "e.csv")
    back = load_explanations(tmp_path / "e.csv")
    assert np.array_equal(back.attributions, expl.attributions)
    assert back.names == expl.names


def test_default_background_caps():
    x = np.arange(1000.0).reshape(500, 2)
    bg = default_background(x)
    assert bg.shape == (100, 2)
    assert np.array_equal(bg[0], x[0]) and np.array_equal(bg[-1], x[-1])
    assert np.array_equal(default_background(x[:7]), x[:7])


def test_gp_additivity():
    x = latin_hypercube(30, REFERENCE_SPACE, 1)
    y = SyntheticOracle("mercury6")(x)[:, 2]
    gp = fit_gp(LabeledDataset(x, y), REFERENCE_SPACE, FitConfig(max_steps=50))
    expl = explain_set(gp, latin_hypercube(20, REFERENCE_SPACE, 2), default_background(x, 10))
    for e in expl.explanations:
        assert abs(e.additivity_gap()) < 1e-6

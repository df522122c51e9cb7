"""Acceptance suite: one test per criterion, at the stated tolerances.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting. The experiment-scale criteria run at full size and take minutes.
"""

import csv
import time

import numpy as np
import pytest

from oracles import all_split_gains, best_split_bruteforce, central_difference, permutation_shapley
from xalm.active import StoppingCriterion, run_loop
from xalm.cli import main
from xalm.core import REFERENCE_SPACE, LabeledDataset, UnlabeledPool, latin_hypercube, make_design
from xalm.experiments import (
    TEST_STREAM,
    ExperimentConfig,
    ShapReferenceConfig,
    compute_metrics,
    mean_predictor,
    run_experiment,
    run_reuse_experiment,
    run_stopping_experiment,
    uncertainty_rmse_correlation,
)
from xalm.gbm import fit_gbm, fit_tree, split_gain
from xalm.gp import KernelHyperparameters, condition, fit_gp, log_marginal_likelihood, predict_latent, predict_mean
from xalm.oracle import SyntheticOracle
from xalm.shapley import default_background, explain_exact, explain_sampled, explain_set

pytestmark = pytest.mark.slow


def test_criterion_01_lml_gradient(criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        d, n = int(rng.integers(1, 6)), int(rng.integers(2, 31))
        x, y = rng.uniform(size=(n, d)), rng.normal(size=n)
        hp = KernelHyperparameters.create(rng.uniform(0.2, 2.0, d), rng.uniform(0.5, 2.0), rng.uniform(0.01, 0.5))
        _, grad = log_marginal_likelihood((x, y), hp, jitter=0.0)

        def f(theta):
            return log_marginal_likelihood((x, y), KernelHyperparameters.from_vector(theta), jitter=0.0)[0]

        fd = central_difference(f, hp.to_vector(), h=1e-5)
        # relative error, with an absolute floor for components that are ~0
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-3)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    assert criterion(1, ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_posterior_contract(criterion):
    rng = np.random.default_rng(102)
    worst_mean = worst_var = worst_far_mean = worst_far_var = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 5))
        # training points on a jittered grid, at least two lengthscales apart
        grid = np.stack(np.meshgrid(*[np.arange(0.05, 0.36, 0.15)] * d), -1).reshape(-1, d)
        x = grid + rng.uniform(-0.02, 0.02, size=grid.shape)
        x = x[rng.permutation(len(x))[: int(rng.integers(2, 25))]]
        y = rng.normal(size=len(x))
        out_var = float(rng.uniform(0.5, 2.0))
        hp = KernelHyperparameters.create(np.full(d, 0.05), output_variance=out_var, noise_variance=1e-8)
        gp = condition(x, y, hp)
        mean, var = predict_latent(gp, x)
        worst_mean = max(worst_mean, float(np.max(np.abs(mean - y))))
        worst_var = max(worst_var, float(np.max(var)))
        far = rng.uniform(0.9, 1.0, size=(10, d))  # >= 10 lengthscales away
        fm, fv = predict_latent(gp, far)
        worst_far_mean = max(worst_far_mean, float(np.max(np.abs(fm))))
        worst_far_var = max(worst_far_var, float(np.max(np.abs(fv - out_var))))
    ok = worst_mean < 1e-4 and worst_var < 1e-4 and worst_far_mean < 1e-3 and worst_far_var < 1e-3
    assert criterion(2, ok, f"train |dmean| {worst_mean:.1e}, var {worst_var:.1e}; "
                            f"far |mean| {worst_far_mean:.1e}, |var-s2| {worst_far_var:.1e}")


def _mercury_gp(n=60, kpi="pax_delay", seed=0):
    x = latin_hypercube(n, REFERENCE_SPACE, seed)
    oracle = SyntheticOracle("mercury6")
    y = oracle(x)[:, oracle.kpis.index(kpi)]
    return fit_gp(LabeledDataset(x, y), REFERENCE_SPACE), x


def test_criterion_03_shap_exactness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)

    def model(z):
        return np.sin(z[:, 0]) * z[:, 1] + z[:, 2] ** 2 - 0.5 * z[:, 0] * z[:, -1] + np.exp(0.3 * z[:, -1])

    perm_err = 0.0
    for d in (3, 4, 5, 6):
        for _ in range(3):
            bg, x = rng.normal(size=(6, d)), rng.normal(size=d)
            _, phi = permutation_shapley(model, x, bg)
            perm_err = max(perm_err, float(np.max(np.abs(explain_exact(model, x, bg).attributions - phi))))

    gaps = []
    for kpi in ("pax_delay", "holding"):
        gp, x = _mercury_gp(40, kpi)
        pts = make_design(250, REFERENCE_SPACE, 7, "uniform")
        gaps += [abs(e.additivity_gap()) for e in explain_set(gp, pts, default_background(x, 20)).explanations]
        oracle = SyntheticOracle("mercury6")
        xt = latin_hypercube(300, REFERENCE_SPACE, 3)
        gbm = fit_gbm(LabeledDataset(xt, oracle(xt)[:, oracle.kpis.index(kpi)]), None, 4, 0.1, 0.2, max_stages=60)
        gaps += [abs(e.additivity_gap()) for e in explain_set(gbm, pts, default_background(xt, 20)).explanations]

    w = rng.normal(size=6)
    bg, pts = rng.normal(size=(30, 6)), rng.normal(size=(20, 6))
    lin = explain_set(lambda z: z @ w + 2.0, pts, bg)
    lin_err = float(np.max(np.abs(lin.attributions - w * (pts - bg.mean(axis=0)))))
    elapsed = time.perf_counter() - t0
    ok = perm_err < 1e-8 and len(gaps) == 1000 and max(gaps) < 1e-6 and lin_err < 1e-6 and elapsed < 120
    assert criterion(3, ok, f"perm {perm_err:.1e}, additivity max {max(gaps):.1e} over {len(gaps)}, "
                            f"linear {lin_err:.1e}, {elapsed:.1f}s")


def test_criterion_04_sampled_convergence(criterion):
    gp, x = _mercury_gp(60)
    bg = default_background(x)
    pts = make_design(10, REFERENCE_SPACE, 8, "uniform")
    worst = 0.0
    for p in pts:
        exact = explain_exact(gp, p, bg).attributions
        bound = 0.05 * np.max(np.abs(exact))
        for seed in range(10):
            est = explain_sampled(gp, p, bg, n_coalitions=1024, seed=seed).attributions
            worst = max(worst, float(np.sqrt(np.mean((est - exact) ** 2)) / bound))
    assert criterion(4, worst < 1.0, f"worst RMSE / (5% max|phi|) = {worst:.2e}")


def test_criterion_05_active_beats_passive(criterion):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(kpi="pax_delay", init_size=10, budget=30, repeats=30,
                           shap_reference=ShapReferenceConfig(every=10**6))
    result = run_experiment(cfg)
    elapsed = time.perf_counter() - t0
    rmse = {s: np.array([r.final[s].rmse for r in result.repeats]) for s in cfg.strategies}
    shap = {s: np.array([r.histories[s].rmse_shap[-1] for r in result.repeats]) for s in cfg.strategies}
    margin_rmse = float(np.mean(rmse["random"] - rmse["uncertainty"]))
    margin_shap = float(np.mean(shap["random"] - shap["uncertainty"]))
    ok = margin_rmse >= 0 and margin_shap >= 0 and elapsed < 1200
    assert criterion(5, ok, f"test RMSE {rmse['uncertainty'].mean():.2f} vs {rmse['random'].mean():.2f}, "
                            f"SHAP RMSE {shap['uncertainty'].mean():.2f} vs {shap['random'].mean():.2f}, "
                            f"{elapsed:.0f}s")


def test_criterion_06_baseline_ordering(criterion):
    oracle = SyntheticOracle("mercury6")
    x = latin_hypercube(100, REFERENCE_SPACE, 0)
    y = oracle(x)
    tx = make_design(2000, REFERENCE_SPACE, [0, 1], "uniform")
    ty = oracle(tx, row_ids=np.arange(2000), stream=TEST_STREAM)
    ok, parts = True, []
    for k, kpi in enumerate(oracle.kpis):
        gp = fit_gp(LabeledDataset(x, y[:, k]), REFERENCE_SPACE)
        gp_m = compute_metrics(predict_mean(gp, tx), ty[:, k])
        mp_m = compute_metrics(mean_predictor(y[:, k])(tx), ty[:, k])
        ok &= gp_m.rmse < mp_m.rmse and 0.95 <= mp_m.rrse <= 1.05
        parts.append(f"{kpi} {gp_m.rmse:.3g}<{mp_m.rmse:.3g} rrse {mp_m.rrse:.3f}")
    assert criterion(6, ok, "; ".join(parts))


def test_criterion_07_stopping(criterion):
    base = ExperimentConfig(oracle={"kind": "synthetic", "id": "linear6"}, kpi="y", strategies=("uncertainty",),
                            init_size=10, budget=100, repeats=30)
    stopped = run_stopping_experiment(ExperimentConfig(**{**base.__dict__, "stopping": {"threshold": 0.001,
                                                                                      "patience": 3}}))
    full = run_experiment(base)
    n_mean = float(np.mean([o.n_simulations for o in stopped]))
    rmse_stop = float(np.mean([o.rmse_test for o in stopped]))
    rmse_full = float(np.mean([r.final["uncertainty"].rmse for r in full.repeats]))
    ok = n_mean < 50 and rmse_stop < 2 * rmse_full
    assert criterion(7, ok, f"mean sims {n_mean:.1f}, RMSE {rmse_stop:.3f} vs full {rmse_full:.3f}")


def test_criterion_08_uncertainty_rmse_correlation(criterion):
    cfg = ExperimentConfig(kpi="arr_delay", strategies=("uncertainty",), init_size=10, budget=100, repeats=30)
    result = run_experiment(cfg)
    r = [uncertainty_rmse_correlation(rep.histories["uncertainty"]) for rep in result.repeats]
    r = np.array([np.nan if v is None else v for v in r])
    mean = float(np.nanmean(r))
    assert criterion(8, mean > 0.5, f"mean Pearson {mean:.3f} (min {np.nanmin(r):.2f}, max {np.nanmax(r):.2f})")


def test_criterion_09_gbm(criterion):
    rng = np.random.default_rng(109)
    split_ok, checked = True, 0
    for _ in range(200):
        n, d, l2 = int(rng.integers(2, 51)), int(rng.integers(1, 5)), float(rng.uniform(0, 2))
        x, r = rng.normal(size=(n, d)), rng.normal(size=n)
        t = fit_tree(x, r, 1, l2)
        ref = best_split_bruteforce(x, r, l2)
        if ref is None:
            split_ok &= t.n_leaves == 1
            continue
        gain, j, thr = ref
        left = x[:, t.feature[0]] < t.threshold[0]
        got = split_gain(r[left].sum(), left.sum(), r[~left].sum(), (~left).sum(), l2)
        split_ok &= abs(got - gain) <= 1e-9 * abs(gain)
        near = [c for c in all_split_gains(x, r, l2) if c[0] >= gain - 1e-9 * abs(gain)]
        if len(near) == 1:
            split_ok &= (int(t.feature[0]), float(t.threshold[0])) == (j, thr)
            checked += 1

    xs = rng.uniform(size=(200, 4))
    ys = np.sin(4 * xs[:, 0]) + xs[:, 1] * xs[:, 2] + 0.1 * rng.normal(size=200)
    steps = np.diff(fit_gbm(LabeledDataset(xs, ys), None, 4, 0.2, 0.3, max_stages=150).train_rmse)
    mono_ok = bool(np.all(steps <= 1e-10))

    clean = SyntheticOracle("mercury6", noise=False)
    k = clean.kpis.index("pax_delay")
    xt = latin_hypercube(1000, REFERENCE_SPACE, 9)
    model = fit_gbm(LabeledDataset(xt, clean(xt)[:, k]), None, 4, 0.0, 0.1, max_stages=300)
    xe = make_design(2000, REFERENCE_SPACE, [9, 1], "uniform")
    rrse = compute_metrics(model(xe), clean(xe)[:, k]).rrse
    ok = split_ok and mono_ok and rrse < 0.2
    assert criterion(9, ok, f"splits ok={split_ok} ({checked} unique), monotone={mono_ok}, RRSE {rrse:.3f}")


def test_criterion_10_reuse(criterion):
    cfg = ExperimentConfig(strategies=("uncertainty",), init_size=10, budget=100, repeats=3)
    result = run_reuse_experiment(cfg, "holding")
    calls_ok = result.oracle_calls == [100] * cfg.repeats
    rows_ok = all(np.isfinite(r.rmse_mean) and r.rmse_mean < r.mean_predictor_rmse for r in result.rows)
    detail = ", ".join(f"{r.kpi} {r.rmse_mean:.3g}/{r.mean_predictor_rmse:.3g}" for r in result.rows)
    assert criterion(10, calls_ok and rows_ok, f"calls {result.oracle_calls}; GP/mean RMSE {detail}")


def _csvs(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*.csv"))}


def test_criterion_11_cli_determinism(criterion, tmp_path):
    small = ["--budget", "14", "--init-size", "10", "--repeats", "2", "--pool-size", "500",
             "--test-size", "200", "--quiet"]
    commands = {
        "run": ["run", "--shap-reference", "--shap-train-size", "300", "--shap-eval-size", "10",
                "--shap-background", "10"] + small,
        "stop-run": ["stop-run", "--oracle", "linear6"] + small,
        "reuse": ["reuse", "--anchor", "holding", "--strategies", "uncertainty"] + small,
    }
    ok, n_files = True, 0
    for name, argv in commands.items():
        a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        ok &= main(argv + ["--out", str(a)]) == 0 and main(argv + ["--out", str(b)]) == 0
        ca, cb = _csvs(a), _csvs(b)
        ok &= bool(ca) and ca == cb
        n_files += len(ca)
    data = tmp_path / "rows.csv"
    with open(data, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REFERENCE_SPACE.names)
        w.writerows(latin_hypercube(5, REFERENCE_SPACE, 1).tolist())
    model = tmp_path / "run_a" / "models" / "gp_uncertainty.json"
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"explain_{tag}"
        ok &= main(["explain", "--model", str(model), "--data", str(data), "--samples", "40", "--seed", "3",
                    "--out", str(out), "--quiet"]) == 0
        outs.append(_csvs(out))
    ok &= outs[0] == outs[1]
    n_files += len(outs[0])
    assert criterion(11, ok, f"{n_files} CSV files compared across run, stop-run, reuse, explain")

"""Metrics and the repeated-experiment harness.

Each repeat ``r`` uses seed ``base_seed + r`` for its pool, test set and
initial design. All strategies in a repeat share those, so the comparison
between them is paired.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .active import (
    HISTORY_COLUMNS,
    LoopHistory,
    StoppingCriterion,
    fit_on_reused,
    run_loop,
)
from .core import REFERENCE_SPACE, LabeledDataset, ScenarioSpace, UnlabeledPool, format_float, make_design
from .gbm import GBMModel, fit_gbm
from .gp import FitConfig, TrainedGP, predict_mean
from .oracle import make_oracle
from .shapley import ExplanationSet, explain_set, save_explanations, shap_rmse, summary_export

log = logging.getLogger(__name__)

TEST_STREAM = 1
REFERENCE_STREAM = 2


# -- metrics -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    rrse: float
    pearson: float | None


def pearson(a, b) -> float | None:
    """Sample Pearson correlation; None when either vector is constant."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("vectors differ in length")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0 or np.all(a == a[0]) or np.all(b == b[0]):
        return None
    return float(np.clip((da @ db) / np.sqrt(saa * sbb), -1.0, 1.0))


def compute_metrics(predictions, truth) -> MetricReport:
    p = np.asarray(predictions, dtype=float).reshape(-1)
    t = np.asarray(truth, dtype=float).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions vs {t.shape[0]} targets")
    if p.size == 0:
        raise ValueError("cannot score empty vectors")
    sse = float(np.sum((p - t) ** 2))
    sst = float(np.sum((t - t.mean()) ** 2))
    rmse = float(np.sqrt(sse / p.size))
    if sst == 0.0:
        rrse = 0.0 if sse == 0.0 else float("inf")
    else:
        rrse = float(np.sqrt(sse / sst))
    return MetricReport(rmse, rrse, pearson(p, t))


def mean_predictor(train_outputs) -> Callable[[np.ndarray], np.ndarray]:
    y = np.asarray(train_outputs, dtype=float).reshape(-1)
    if y.size == 0:
        raise ValueError("mean predictor needs at least one output")
    mean = float(np.mean(y))

    def predict(points):
        return np.full(np.atleast_2d(points).shape[0], mean)

    predict.mean = mean
    return predict


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class ShapReferenceConfig:
    """Ground-truth SHAP values from a GBM fit on a large design."""

    train_size: int = 10_000
    eval_size: int = 1_000
    background_size: int = 100
    depth: int = 4
    l2: float = 0.1
    rate: float = 0.1
    valid_fraction: float = 0.2
    max_stages: int = 1000
    every: int = 1  # compute SHAP RMSE every k iterations (always at the last one)


@dataclass(frozen=True)
class ExperimentConfig:
    oracle: dict = field(default_factory=lambda: {"kind": "synthetic", "id": "mercury6"})
    kpi: str = "pax_delay"
    strategies: tuple[str, ...] = ("uncertainty", "random")
    init_size: int = 10
    budget: int = 100
    pool_size: int = 50_000
    test_size: int = 2_000
    repeats: int = 30
    base_seed: int = 0
    stopping: dict | None = None  # {"threshold": .., "patience": ..}
    shap_reference: ShapReferenceConfig | None = None
    pool_design: str = "lhs"
    test_design: str = "uniform"
    fit: FitConfig = FitConfig()
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        if self.budget < self.init_size:
            raise ValueError("budget must be >= init_size")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.init_size < 2:
            raise ValueError("init_size must be >= 2 to fit a GP")

    def criterion(self) -> StoppingCriterion:
        if self.stopping is None:
            return StoppingCriterion(threshold=0.0, patience=3, max_budget=self.budget)
        return StoppingCriterion(
            float(self.stopping.get("threshold", 0.001)),
            int(self.stopping.get("patience", 3)),
            self.budget,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategies"] = list(self.strategies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.get("shap_reference") is not None:
            d["shap_reference"] = ShapReferenceConfig(**d["shap_reference"])
        if "fit" in d:
            d["fit"] = FitConfig(**d["fit"])
        if "strategies" in d:
            d["strategies"] = tuple(d["strategies"])
        return cls(**d)


# -- SHAP reference ----------------------------------------------------------------


@dataclass
class ShapReference:
    model: GBMModel
    eval_points: np.ndarray
    background: np.ndarray
    explanations: ExplanationSet
    config: ShapReferenceConfig

    def compare(self, model) -> float:
        expl = explain_set(model, self.eval_points, self.background)
        return shap_rmse(expl, self.explanations)


def build_shap_reference(oracle, space: ScenarioSpace, kpi: str, cfg: ShapReferenceConfig, seed: int) -> ShapReference:
    """Fit the reference GBM and explain a fixed evaluation set exactly."""
    k = list(oracle.kpis).index(kpi)
    x = make_design(cfg.train_size, space, [seed, 10], "lhs")
    y = np.asarray(oracle(x, row_ids=np.arange(len(x)), stream=REFERENCE_STREAM))[:, k]
    n_valid = int(round(cfg.valid_fraction * len(y)))
    perm = np.random.default_rng([seed, 11]).permutation(len(y))
    valid_idx, train_idx = perm[:n_valid], perm[n_valid:]
    data = LabeledDataset(x, y)
    model = fit_gbm(
        data.subset(train_idx),
        data.subset(valid_idx) if n_valid else None,
        cfg.depth, cfg.l2, cfg.rate, cfg.max_stages,
    )
    eval_points = make_design(cfg.eval_size, space, [seed, 12], "lhs")
    background = make_design(cfg.background_size, space, [seed, 13], "lhs")
    expl = explain_set(model, eval_points, background, feature_names=space.names)
    return ShapReference(model, eval_points, background, expl, cfg)


# -- experiment runs ------------------------------------------------------------------


@dataclass
class RepeatResult:
    repeat: int
    seed: int
    histories: dict[str, LoopHistory]
    final: dict[str, MetricReport]
    mean_predictor: MetricReport
    wall_time: dict[str, float]


@dataclass
class LearningCurves:
    """Per strategy: arrays indexed by iteration (mean and std over repeats)."""

    n_labeled: dict[str, np.ndarray]
    rmse_mean: dict[str, np.ndarray]
    rmse_std: dict[str, np.ndarray]
    shap_mean: dict[str, np.ndarray]
    shap_std: dict[str, np.ndarray]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    repeats: list[RepeatResult]
    curves: LearningCurves
    reference: ShapReference | None = None


def _space_for(oracle) -> ScenarioSpace:
    return getattr(oracle, "space", REFERENCE_SPACE)


def _test_set(oracle, space, config: ExperimentConfig, seed: int):
    x = make_design(config.test_size, space, [seed, 1], config.test_design)
    y = np.asarray(oracle(x, row_ids=np.arange(len(x)), stream=TEST_STREAM))
    if not np.all(np.isfinite(y)):
        raise RuntimeError("oracle returned non-finite test labels")
    return x, y


def _hooks(test_x, test_y, reference: ShapReference | None, budget: int, init: int):
    def rmse_test(gp: TrainedGP) -> float:
        return float(np.sqrt(np.mean((predict_mean(gp, test_x) - test_y) ** 2)))

    hooks = {"rmse_test": rmse_test}
    if reference is not None:
        every = max(1, reference.config.every)

        def rmse_shap(gp: TrainedGP):
            it = gp.n_train - init
            if it % every and gp.n_train != budget:
                return None
            return reference.compare(gp)

        hooks["rmse_shap"] = rmse_shap
    return hooks


def run_repeat(config: ExperimentConfig, r: int, reference: ShapReference | None = None,
               strategies=None) -> RepeatResult:
    oracle = make_oracle(config.oracle)
    space = _space_for(oracle)
    seed = config.base_seed + r
    k = list(oracle.kpis).index(config.kpi)
    pool = UnlabeledPool(make_design(config.pool_size, space, seed, config.pool_design))
    test_x, test_all = _test_set(oracle, space, config, seed)
    test_y = test_all[:, k]
    hooks = _hooks(test_x, test_y, reference, config.budget, config.init_size)
    histories, final, wall = {}, {}, {}
    for strategy in strategies or config.strategies:
        t0 = time.perf_counter()
        h = run_loop(oracle, space, config.kpi, strategy, config.init_size, config.criterion(),
                     seed, hooks, pool=pool, fit_config=config.fit)
        wall[strategy] = time.perf_counter() - t0
        if h.failed:
            raise RuntimeError(f"repeat {r} ({strategy}) failed: {h.error}")
        histories[strategy] = h
        final[strategy] = compute_metrics(predict_mean(h.gp, test_x), test_y)
    first = histories[next(iter(histories))]
    mp = mean_predictor(first.dataset.outputs)
    return RepeatResult(r, seed, histories, final, compute_metrics(mp(test_x), test_y), wall)


def _std(values, axis=0):
    return np.std(values, axis=axis)


def aggregate_curves(repeats: list[RepeatResult], strategies) -> LearningCurves:
    n_lab, rm, rs, sm, ss = {}, {}, {}, {}, {}
    for s in strategies:
        lengths = {len(rep.histories[s].records) for rep in repeats}
        length = min(lengths)
        rmse = np.array([rep.histories[s].rmse_test[:length] for rep in repeats])
        shap = np.array([rep.histories[s].rmse_shap[:length] for rep in repeats])
        n_lab[s] = np.array([rec.n_labeled for rec in repeats[0].histories[s].records[:length]])
        rm[s], rs[s] = rmse.mean(axis=0), _std(rmse)
        sm[s], ss[s] = shap.mean(axis=0), _std(shap)
    return LearningCurves(n_lab, rm, rs, sm, ss)


def _map_repeats(fn, config: ExperimentConfig, *args):
    if config.jobs > 1 and config.repeats > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = [pool.submit(fn, config, r, *args) for r in range(config.repeats)]
            return [f.result() for f in futures]
    return [fn(config, r, *args) for r in range(config.repeats)]


def _reference_for(config: ExperimentConfig, kpi: str | None = None) -> ShapReference | None:
    if config.shap_reference is None:
        return None
    oracle = make_oracle(config.oracle)
    return build_shap_reference(oracle, _space_for(oracle), kpi or config.kpi,
                                config.shap_reference, config.base_seed)


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Active vs passive learning curves over ``config.repeats`` paired repeats."""
    reference = _reference_for(config)
    repeats = _map_repeats(run_repeat, config, reference)
    result = ExperimentResult(config, repeats, aggregate_curves(repeats, config.strategies), reference)
    if out_dir is not None:
        write_experiment(result, out_dir)
    return result


def uncertainty_rmse_correlation(history: LoopHistory) -> float | None:
    """Pearson correlation across iterations of stopping metric and test RMSE."""
    if len(history.records) < 3:
        raise ValueError("need at least three iterations to correlate")
    rmse = history.rmse_test
    if np.any(np.isnan(rmse)):
        raise ValueError("history lacks test RMSE values")
    return pearson(history.metrics, rmse)


@dataclass(frozen=True)
class StoppingOutcome:
    repeat: int
    n_simulations: int
    rmse_test: float
    rmse_shap: float | None
    wall_time: float


def run_stopping_experiment(config: ExperimentConfig, out_dir=None) -> list[StoppingOutcome]:
    """Run the first configured strategy until the stopping criterion fires."""
    if config.stopping is None:
        raise ValueError("stopping experiment needs a stopping criterion")
    reference = _reference_for(config)
    repeats = _map_repeats(run_repeat, config, reference, config.strategies[:1])
    s = config.strategies[0]
    outcomes = []
    for rep in repeats:
        h = rep.histories[s]
        shap = reference.compare(h.gp) if reference is not None else None
        outcomes.append(StoppingOutcome(rep.repeat, len(h.dataset), rep.final[s].rmse, shap, rep.wall_time[s]))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "stopping.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", "n_simulations", "rmse_test", "rmse_shap"])
            for o in outcomes:
                w.writerow([o.repeat, o.n_simulations, format_float(o.rmse_test),
                            "" if o.rmse_shap is None else format_float(o.rmse_shap)])
        _write_histories(repeats, out)
    return outcomes


@dataclass(frozen=True)
class ReuseRow:
    kpi: str
    rmse_mean: float
    rmse_std: float
    rrse_mean: float
    pearson_mean: float | None
    mean_predictor_rmse: float
    shap_rmse_mean: float | None
    reused: bool


@dataclass
class ReuseResult:
    anchor: str
    rows: list[ReuseRow]
    oracle_calls: list[int]  # per repeat
    per_repeat: list[dict[str, MetricReport]]


def _reuse_repeat(config: ExperimentConfig, r: int, anchor: str, references):
    oracle = make_oracle(config.oracle)
    space = _space_for(oracle)
    seed = config.base_seed + r
    pool = UnlabeledPool(make_design(config.pool_size, space, seed, config.pool_design))
    test_x, test_all = _test_set(oracle, space, config, seed)
    h = run_loop(oracle, space, anchor, config.strategies[0], config.init_size, config.criterion(),
                 seed, None, pool=pool, fit_config=config.fit)
    if h.failed:
        raise RuntimeError(f"repeat {r} failed: {h.error}")
    reports, mean_rmse, shap = {}, {}, {}
    for k, kpi in enumerate(oracle.kpis):
        gp = h.gp if kpi == anchor else fit_on_reused(h, h.outputs_for(kpi), space, kpi, config.fit)
        reports[kpi] = compute_metrics(predict_mean(gp, test_x), test_all[:, k])
        mp = mean_predictor(h.outputs_for(kpi))
        mean_rmse[kpi] = compute_metrics(mp(test_x), test_all[:, k]).rmse
        if references:
            shap[kpi] = references[kpi].compare(gp)
    return reports, mean_rmse, shap, h.n_oracle_calls


def run_reuse_experiment(config: ExperimentConfig, anchor_kpi: str, out_dir=None) -> ReuseResult:
    """Active learning on ``anchor_kpi``; every other KPI refit on the same simulations."""
    oracle = make_oracle(config.oracle)
    kpis = list(oracle.kpis)
    if len(kpis) < 2:
        raise ValueError("reuse needs an oracle with more than one KPI")
    if anchor_kpi not in kpis:
        raise ValueError(f"unknown anchor KPI {anchor_kpi!r} (have {kpis})")
    references = None
    if config.shap_reference is not None:
        references = {kpi: _reference_for(config, kpi) for kpi in kpis}
    results = _map_repeats(_reuse_repeat, config, anchor_kpi, references)
    rows = []
    for kpi in kpis:
        reps = [res[0][kpi] for res in results]
        rmse = np.array([m.rmse for m in reps])
        pears = [m.pearson for m in reps if m.pearson is not None]
        shap = [res[2][kpi] for res in results] if references else None
        rows.append(ReuseRow(
            kpi, float(rmse.mean()), float(_std(rmse)),
            float(np.mean([m.rrse for m in reps])),
            float(np.mean(pears)) if pears else None,
            float(np.mean([res[1][kpi] for res in results])),
            float(np.mean(shap)) if shap else None,
            kpi != anchor_kpi,
        ))
    result = ReuseResult(anchor_kpi, rows, [res[3] for res in results], [res[0] for res in results])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "reuse.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kpi", "reused", "rmse_mean", "rmse_std", "rrse", "pearson",
                        "mean_predictor_rmse", "shap_rmse"])
            for row in rows:
                w.writerow([row.kpi, int(row.reused), format_float(row.rmse_mean), format_float(row.rmse_std),
                            format_float(row.rrse_mean), _opt(row.pearson_mean),
                            format_float(row.mean_predictor_rmse), _opt(row.shap_rmse_mean)])
    return result


# -- output ----------------------------------------------------------------------


def _opt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else format_float(v)


CURVE_COLUMNS = ["strategy", "iteration", "n_labeled", "rmse_mean", "rmse_std", "shap_rmse_mean", "shap_rmse_std"]
SUMMARY_COLUMNS = ["kpi", "model", "n_sim", "rmse_mean", "rmse_std", "rrse", "pearson"]


def _write_histories(repeats: list[RepeatResult], out: Path) -> list[Path]:
    paths = []
    for rep in repeats:
        d = out / "repeats" / str(rep.repeat)
        d.mkdir(parents=True, exist_ok=True)
        path = d / "history.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy"] + HISTORY_COLUMNS)
            for s, h in rep.histories.items():
                for row in h.rows():
                    w.writerow([s] + row)
        paths.append(path)
    return paths


def summary_rows(result: ExperimentResult) -> list[list[str]]:
    cfg = result.config
    rows = []
    for s in cfg.strategies:
        reps = [rep.final[s] for rep in result.repeats]
        n_sim = int(np.mean([len(rep.histories[s].dataset) for rep in result.repeats]))
        rows.append(_summary_row(cfg.kpi, f"gp_{s}", n_sim, reps))
    reps = [rep.mean_predictor for rep in result.repeats]
    rows.append(_summary_row(cfg.kpi, "mean_predictor", cfg.budget, reps))
    return rows


def _summary_row(kpi, model, n_sim, reports: list[MetricReport]) -> list[str]:
    rmse = np.array([m.rmse for m in reports])
    pears = [m.pearson for m in reports if m.pearson is not None]
    return [kpi, model, str(n_sim), format_float(rmse.mean()), format_float(_std(rmse)),
            format_float(np.mean([m.rrse for m in reports])),
            format_float(np.mean(pears)) if pears else ""]


def write_experiment(result: ExperimentResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    curves = result.curves
    for s in result.config.strategies:
        path = out / f"curves_{s}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_COLUMNS)
            for i, n in enumerate(curves.n_labeled[s]):
                w.writerow([s, i, int(n), format_float(curves.rmse_mean[s][i]), format_float(curves.rmse_std[s][i]),
                            _opt(curves.shap_mean[s][i]), _opt(curves.shap_std[s][i])])
        written.append(path)
    written += _write_histories(result.repeats, out)
    path = out / "summary.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(summary_rows(result))
    written.append(path)
    if result.reference is not None:
        shap_dir = out / "shap"
        shap_dir.mkdir(exist_ok=True)
        save_explanations(result.reference.explanations, shap_dir / "reference.csv")
        written.append(shap_dir / "reference.csv")
        # final-iteration explanations of repeat 0, one file per strategy
        rep0 = result.repeats[0]
        for s, h in rep0.histories.items():
            expl = explain_set(h.gp, result.reference.eval_points, result.reference.background,
                               feature_names=result.reference.explanations.feature_names)
            it = h.records[-1].iteration
            p, rk = summary_export(expl, shap_dir / f"{it}_{s}.csv")
            written += [p, rk]
    return written

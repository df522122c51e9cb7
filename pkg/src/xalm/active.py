"""Pool-based active learning of a GP metamodel, one acquisition per iteration."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .core import LabeledDataset, ScenarioSpace, UnlabeledPool, format_float, make_design
from .gp import FitConfig, TrainedGP, fit_gp, predict_latent
from .oracle import CountingOracle

log = logging.getLogger(__name__)

STRATEGIES = ("uncertainty", "random")


@dataclass(frozen=True)
class AcquisitionStrategy:
    kind: str = "uncertainty"

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; valid: {', '.join(STRATEGIES)}")


@dataclass(frozen=True)
class StoppingCriterion:
    """Stop once ``patience`` successive metric changes are all below ``threshold``,
    or when ``max_budget`` labels have been collected.

    A threshold of 0 disables the convergence test.
    """

    threshold: float = 0.001
    patience: int = 3
    max_budget: int = 100

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_budget < 1:
            raise ValueError("max_budget must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    pool_index: int  # row acquired to reach this labelled size; -1 for the initial fit
    n_labeled: int
    stopping_metric: float
    rmse_test: float | None = None
    rmse_shap: float | None = None


HISTORY_COLUMNS = ["iteration", "pool_index", "n_labeled", "stopping_metric", "rmse_test", "rmse_shap"]


def _fmt_optional(v):
    return "" if v is None else format_float(v)


@dataclass
class LoopHistory:
    records: list[IterationRecord]
    dataset: LabeledDataset
    kpis: list[str]
    all_outputs: np.ndarray  # every KPI returned by the oracle, row-aligned with dataset
    pool_indices: list[int]
    gp: TrainedGP | None = None
    n_oracle_calls: int = 0
    failed: bool = False
    error: str | None = None

    @property
    def metrics(self) -> np.ndarray:
        return np.array([r.stopping_metric for r in self.records])

    @property
    def rmse_test(self) -> np.ndarray:
        return np.array([np.nan if r.rmse_test is None else r.rmse_test for r in self.records])

    @property
    def rmse_shap(self) -> np.ndarray:
        return np.array([np.nan if r.rmse_shap is None else r.rmse_shap for r in self.records])

    def outputs_for(self, kpi: str) -> np.ndarray:
        return self.all_outputs[:, self.kpis.index(kpi)]

    def rows(self) -> list[list[str]]:
        return [
            [str(r.iteration), str(r.pool_index), str(r.n_labeled), format_float(r.stopping_metric),
             _fmt_optional(r.rmse_test), _fmt_optional(r.rmse_shap)]
            for r in self.records
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            w.writerows(self.rows())


def _pool_variance(gp: TrainedGP, pool: UnlabeledPool) -> tuple[np.ndarray, np.ndarray]:
    """Available pool indices and their noise-free variance (standardized units)."""
    avail = pool.available
    if avail.size == 0:
        raise ValueError("pool exhausted: no unacquired rows left")
    _, var = predict_latent(gp, pool.inputs[avail])
    return avail, var


def _pick(avail, var, gp, strategy: AcquisitionStrategy, seed) -> int:
    if strategy.kind == "uncertainty":
        predictive = var + gp.hyperparameters.noise_variance
        # argmax returns the first maximum, i.e. the lowest pool index
        return int(avail[int(np.argmax(predictive))])
    rng = np.random.default_rng(seed)
    return int(avail[int(rng.integers(avail.size))])


def acquire_next(gp: TrainedGP, pool: UnlabeledPool, strategy: AcquisitionStrategy, seed=0) -> int:
    """Pool index to label next. Does not mark the row as acquired."""
    if strategy.kind == "random":
        avail = pool.available
        if avail.size == 0:
            raise ValueError("pool exhausted: no unacquired rows left")
        return _pick(avail, None, gp, strategy, seed)
    avail, var = _pool_variance(gp, pool)
    return _pick(avail, var, gp, strategy, seed)


def stopping_metric(gp: TrainedGP, pool: UnlabeledPool) -> float:
    """Mean noise-free posterior std over unacquired pool rows, standardized units."""
    _, var = _pool_variance(gp, pool)
    return float(np.mean(np.sqrt(var)))


def _should_stop(metrics, n_labeled: int, criterion: StoppingCriterion) -> bool:
    if n_labeled >= criterion.max_budget:
        return True
    diffs = np.abs(np.diff(np.asarray(metrics, dtype=float)))
    if diffs.size < criterion.patience:
        return False
    return bool(np.all(diffs[-criterion.patience :] < criterion.threshold))


def check_stop(history: LoopHistory, criterion: StoppingCriterion) -> bool:
    if not history.records:
        raise ValueError("empty history")
    return _should_stop(history.metrics, history.records[-1].n_labeled, criterion)


def initial_indices(pool_size: int, init_size: int, seed: int) -> np.ndarray:
    if not 1 <= init_size <= pool_size:
        raise ValueError(f"init_size must lie in [1, {pool_size}]")
    rng = np.random.default_rng([seed, 0])
    return np.sort(rng.choice(pool_size, size=init_size, replace=False))


EvalHooks = Mapping[str, Callable[[TrainedGP], float]]


def run_loop(
    oracle,
    space: ScenarioSpace,
    kpi: str,
    strategy: AcquisitionStrategy | str,
    init_size: int,
    criterion: StoppingCriterion,
    seed: int,
    eval_hooks: EvalHooks | None = None,
    pool: UnlabeledPool | None = None,
    pool_size: int = 50_000,
    pool_design: str = "lhs",
    fit_config: FitConfig = FitConfig(),
) -> LoopHistory:
    """Fit, score the pool, acquire, query the oracle; repeat until stopping.

    ``eval_hooks`` maps ``"rmse_test"`` / ``"rmse_shap"`` to callables on the
    current GP. Oracle failures end the loop early with ``failed`` set.
    """
    if isinstance(strategy, str):
        strategy = AcquisitionStrategy(strategy)
    if criterion.max_budget < init_size:
        raise ValueError("max_budget must be at least init_size")
    kpis = list(oracle.kpis)
    if kpi not in kpis:
        raise ValueError(f"oracle has no KPI {kpi!r} (have {kpis})")
    k = kpis.index(kpi)
    if pool is None:
        pool = UnlabeledPool(make_design(pool_size, space, seed, pool_design))
    else:
        pool = pool.copy()
    counter = CountingOracle(oracle)
    hooks = dict(eval_hooks or {})

    init = initial_indices(len(pool), init_size, seed)
    history = LoopHistory([], LabeledDataset(np.zeros((0, space.dim)), np.zeros(0), tuple(space.names), kpi),
                          kpis, np.zeros((0, len(kpis))), [])

    def query(idx) -> np.ndarray | None:
        idx = np.atleast_1d(idx)
        try:
            out = np.atleast_2d(counter(pool.inputs[idx], row_ids=idx))
        except Exception as exc:  # any oracle failure aborts the loop
            history.failed, history.error = True, f"oracle failure: {exc}"
            return None
        if out.shape != (idx.size, len(kpis)) or not np.all(np.isfinite(out)):
            history.failed, history.error = True, "oracle returned non-finite or misshaped output"
            return None
        return out

    out = query(init)
    if out is None:
        history.n_oracle_calls = counter.n_rows
        return history
    for i in init:
        pool.mark(int(i))
    history.pool_indices = [int(i) for i in init]
    history.all_outputs = out
    history.dataset = LabeledDataset(pool.inputs[init], out[:, k], tuple(space.names), kpi)

    last_index = -1
    iteration = 0
    while True:
        gp = fit_gp(history.dataset, space, fit_config)
        history.gp = gp
        avail, var = _pool_variance(gp, pool)
        record = IterationRecord(iteration, last_index, len(history.dataset), float(np.mean(np.sqrt(var))))
        if "rmse_test" in hooks:
            record.rmse_test = float(hooks["rmse_test"](gp))
        if "rmse_shap" in hooks:
            value = hooks["rmse_shap"](gp)
            record.rmse_shap = None if value is None else float(value)
        history.records.append(record)
        log.debug("iter %d n=%d metric=%.5g", iteration, record.n_labeled, record.stopping_metric)
        if check_stop(history, criterion):
            break
        iteration += 1
        idx = _pick(avail, var, gp, strategy, [seed, iteration])
        out = query(idx)
        if out is None:
            break
        pool.mark(idx)
        history.pool_indices.append(idx)
        history.all_outputs = np.vstack([history.all_outputs, out])
        history.dataset = history.dataset.append(pool.inputs[idx], out[0, k])
        last_index = idx
    history.n_oracle_calls = counter.n_rows
    return history


def fit_on_reused(
    history: LoopHistory,
    outputs,
    space: ScenarioSpace,
    kpi: str,
    fit_config: FitConfig = FitConfig(),
) -> TrainedGP:
    """Fit a GP for another KPI on the inputs the loop already labelled."""
    outputs = np.asarray(outputs, dtype=float).reshape(-1)
    if outputs.shape[0] != len(history.dataset):
        raise ValueError(
            f"{outputs.shape[0]} outputs for {len(history.dataset)} acquired inputs"
        )
    data = LabeledDataset(history.dataset.inputs, outputs, tuple(space.names), kpi)
    return fit_gp(data, space, fit_config)

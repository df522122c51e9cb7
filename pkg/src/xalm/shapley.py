"""Kernel SHAP for arbitrary predictors.

Missing features are imputed from every row of a background set and the
predictions averaged (interventional value function). Shapley values are the
solution of a weighted least-squares problem over coalitions with the two
equality constraints ``phi_0 = v(empty)`` and ``phi_0 + sum(phi) = v(full)``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import format_float

Predictor = Callable[[np.ndarray], np.ndarray]

MAX_EXACT_DIM = 16
_EVAL_CHUNK = 200_000  # hybrid points per model call


class ShapError(ValueError):
    pass


@dataclass(frozen=True)
class ShapExplanation:
    base_value: float
    attributions: np.ndarray
    explained_point: np.ndarray
    model_output: float

    @property
    def dim(self) -> int:
        return self.attributions.shape[0]

    def additivity_gap(self) -> float:
        return abs(self.base_value + float(np.sum(self.attributions)) - self.model_output)


@dataclass(frozen=True)
class ExplanationSet:
    explanations: tuple[ShapExplanation, ...]
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "explanations", tuple(self.explanations))
        dims = {e.dim for e in self.explanations}
        if len(dims) > 1:
            raise ShapError(f"explanations disagree on dimension: {sorted(dims)}")
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return len(self.explanations)

    def __getitem__(self, i) -> ShapExplanation:
        return self.explanations[i]

    @property
    def dim(self) -> int:
        return self.explanations[0].dim if self.explanations else 0

    @property
    def names(self) -> list[str]:
        if self.feature_names is not None:
            return list(self.feature_names)
        return [f"x{i + 1}" for i in range(self.dim)]

    @property
    def attributions(self) -> np.ndarray:
        return np.array([e.attributions for e in self.explanations]).reshape(len(self), self.dim)

    @property
    def points(self) -> np.ndarray:
        return np.array([e.explained_point for e in self.explanations]).reshape(len(self), self.dim)

    @property
    def base_values(self) -> np.ndarray:
        return np.array([e.base_value for e in self.explanations])

    @property
    def model_outputs(self) -> np.ndarray:
        return np.array([e.model_output for e in self.explanations])

    def mean_abs(self) -> np.ndarray:
        return np.mean(np.abs(self.attributions), axis=0)

    def ranking(self) -> list[tuple[str, float]]:
        """Features by mean |phi|, largest first; ties keep feature order."""
        scores = self.mean_abs()
        order = sorted(range(self.dim), key=lambda j: -scores[j])
        return [(self.names[j], float(scores[j])) for j in order]


def shapley_kernel_weight(d: int, s: int) -> float:
    """(d - 1) / (C(d, s) * s * (d - s)) for a coalition of size ``s``."""
    if not 0 < s < d:
        raise ShapError(f"coalition size must satisfy 0 < s < d, got s={s}, d={d}")
    return (d - 1) / (math.comb(d, s) * s * (d - s))


def as_background(background, dim: int | None = None) -> np.ndarray:
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    if bg.shape[0] < 1:
        raise ShapError("background set needs at least one row")
    if dim is not None and bg.shape[1] != dim:
        raise ShapError(f"background has {bg.shape[1]} columns, expected {dim}")
    return bg


def default_background(inputs, cap: int = 100) -> np.ndarray:
    """At most ``cap`` evenly spaced rows of ``inputs`` (deterministic)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[0] <= cap:
        return inputs.copy()
    idx = np.linspace(0, inputs.shape[0] - 1, cap).round().astype(int)
    return inputs[idx]


def all_coalitions(d: int) -> np.ndarray:
    """Every non-empty proper coalition as a boolean matrix, ordered by size."""
    rows = []
    for s in range(1, d):
        for combo in itertools.combinations(range(d), s):
            z = np.zeros(d, dtype=bool)
            z[list(combo)] = True
            rows.append(z)
    return np.array(rows, dtype=bool).reshape(-1, d)


def _shapley_weights(masks: np.ndarray) -> np.ndarray:
    d = masks.shape[1]
    sizes = masks.sum(axis=1)
    return np.array([shapley_kernel_weight(d, int(s)) for s in sizes])


def coalition_values(model: Predictor, points, masks, background) -> np.ndarray:
    """v(z) for each row of ``points`` and each coalition mask.

    Returns an array of shape ``(n_points, n_masks)``.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    bg = as_background(background, x.shape[1])
    n, d = x.shape
    m, b = masks.shape[0], bg.shape[0]
    out = np.empty((n, m))
    rows_per_chunk = max(1, _EVAL_CHUNK // max(1, m * b))
    for start in range(0, n, rows_per_chunk):
        xs = x[start : start + rows_per_chunk]
        hybrid = np.where(
            masks[None, :, None, :], xs[:, None, None, :], bg[None, None, :, :]
        )  # (r, m, b, d)
        flat = hybrid.reshape(-1, d)
        preds = np.concatenate(
            [np.asarray(model(flat[i : i + _EVAL_CHUNK]), dtype=float).reshape(-1)
             for i in range(0, flat.shape[0], _EVAL_CHUNK)]
        )
        out[start : start + len(xs)] = preds.reshape(len(xs), m, b).mean(axis=2)
    return out


def _solve(masks, weights, values, v_empty, v_full) -> np.ndarray:
    """Constrained weighted least squares; columns of ``values`` are separate rows.

    The efficiency constraint is used to eliminate the last attribution.
    """
    masks = masks.astype(float)
    values = np.atleast_2d(values.T).T  # (m, r)
    d = masks.shape[1]
    delta = v_full - v_empty  # (r,)
    if d == 1:
        return delta[None, :]
    target = values - v_empty[None, :] - masks[:, -1:] * delta[None, :]
    design = masks[:, :-1] - masks[:, -1:]
    sw = np.sqrt(weights)[:, None]
    head, *_ = np.linalg.lstsq(design * sw, target * sw, rcond=None)
    last = delta - head.sum(axis=0)
    return np.vstack([head, last[None, :]])


def _explain_with(model, x, bg, masks, weights) -> list[ShapExplanation]:
    x = np.atleast_2d(x)
    d = x.shape[1]
    ends = np.array([np.zeros(d, bool), np.ones(d, bool)])
    values = coalition_values(model, x, np.vstack([ends, masks]), bg)
    v_empty, v_full = values[:, 0], values[:, 1]
    phi = _solve(masks, weights, values[:, 2:].T, v_empty, v_full)
    # model(x) equals v(full) up to averaging rounding; evaluate it directly
    fx = np.asarray(model(x), dtype=float).reshape(-1)
    return [
        ShapExplanation(float(v_empty[i]), phi[:, i].copy(), x[i].copy(), float(fx[i]))
        for i in range(x.shape[0])
    ]


def explain_exact(model: Predictor, x, background) -> ShapExplanation:
    """Exact Shapley values by enumerating all 2^d coalitions (d <= 16)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    d = x.shape[0]
    if d > MAX_EXACT_DIM:
        raise ShapError(f"d={d} exceeds {MAX_EXACT_DIM}; use explain_sampled instead")
    bg = as_background(background, d)
    masks = all_coalitions(d)
    return _explain_with(model, x, bg, masks, _shapley_weights(masks))[0]


def sample_coalitions(d: int, n_coalitions: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Coalition masks and regression weights for a budget of ``n_coalitions``.

    Coalition sizes are enumerated completely, smallest (and their complements)
    first, while the budget covers them; the remaining weight mass is spread
    over paired random samples. A budget of ``2^d - 2`` or more enumerates
    everything and gives exact Shapley values.
    """
    if n_coalitions < 2 * d + 2:
        raise ShapError(f"n_coalitions must be >= 2d + 2 = {2 * d + 2}, got {n_coalitions}")
    if d < 2 or n_coalitions >= 2**d - 2:
        masks = all_coalitions(d)
        return masks, _shapley_weights(masks)

    n_sizes = math.ceil((d - 1) / 2)
    size_weight = np.array([(d - 1) / (s * (d - s)) for s in range(1, n_sizes + 1)])
    paired = np.array([s != d - s for s in range(1, n_sizes + 1)])
    size_weight[paired] *= 2
    size_weight /= size_weight.sum()

    masks, weights = [], []
    left = n_coalitions
    remaining = size_weight.copy()
    n_full = 0
    for i, s in enumerate(range(1, n_sizes + 1)):
        n_subsets = math.comb(d, s) * (2 if paired[i] else 1)
        if left * remaining[i] / n_subsets < 1.0 - 1e-8:
            break
        n_full += 1
        left -= n_subsets
        if remaining[i] < 1.0:
            remaining /= 1.0 - remaining[i]
        for combo in itertools.combinations(range(d), s):
            z = np.zeros(d, dtype=bool)
            z[list(combo)] = True
            w = size_weight[i] / n_subsets
            masks.append(z)
            weights.append(w)
            if paired[i]:
                masks.append(~z)
                weights.append(w)

    if n_full < n_sizes and left > 0:
        rng = np.random.default_rng(seed)
        probs = size_weight[n_full:] / size_weight[n_full:].sum()
        counts: dict[bytes, list] = {}
        drawn, attempts = 0, 0
        while drawn < left and attempts < 4 * n_coalitions:
            attempts += 1
            s = n_full + 1 + int(rng.choice(len(probs), p=probs))
            z = np.zeros(d, dtype=bool)
            z[rng.permutation(d)[:s]] = True
            for mask in (z, ~z):
                key = mask.tobytes()
                if key in counts:
                    counts[key][1] += 1.0
                else:
                    counts[key] = [mask, 1.0]
                drawn += 1
        sampled = list(counts.values())
        total = sum(c for _, c in sampled)
        mass = size_weight[n_full:].sum()
        for mask, c in sampled:
            masks.append(mask)
            weights.append(c / total * mass)
    return np.array(masks, dtype=bool), np.array(weights)


def explain_sampled(model: Predictor, x, background, n_coalitions: int, seed: int = 0) -> ShapExplanation:
    """Kernel SHAP estimate from a budget of ``n_coalitions`` coalitions."""
    x = np.asarray(x, dtype=float).reshape(-1)
    bg = as_background(background, x.shape[0])
    masks, weights = sample_coalitions(x.shape[0], n_coalitions, seed)
    return _explain_with(model, x, bg, masks, weights)[0]


def explain_set(
    model: Predictor,
    points,
    background,
    n_coalitions: int | None = None,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
) -> ExplanationSet:
    """Explain every row of ``points``; exact unless ``n_coalitions`` is given.

    Sampled explanations of row ``i`` use seed ``seed + i``.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    d = x.shape[1]
    bg = as_background(background, d)
    if n_coalitions is None:
        if d > MAX_EXACT_DIM:
            raise ShapError(f"d={d} exceeds {MAX_EXACT_DIM}; give n_coalitions")
        masks = all_coalitions(d)
        expl = _explain_with(model, x, bg, masks, _shapley_weights(masks))
    else:
        expl = []
        for i, row in enumerate(x):
            masks, weights = sample_coalitions(d, n_coalitions, seed + i)
            expl.extend(_explain_with(model, row, bg, masks, weights))
    return ExplanationSet(tuple(expl), feature_names)


def shap_rmse(a: ExplanationSet, b: ExplanationSet) -> float:
    """Root mean square attribution difference over all (row, feature) pairs."""
    pa, pb = a.attributions, b.attributions
    if pa.shape != pb.shape:
        raise ShapError(f"explanation sets differ in shape: {pa.shape} vs {pb.shape}")
    if pa.size == 0:
        raise ShapError("cannot compare empty explanation sets")
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def ranking_path_for(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_ranking" + path.suffix)


def summary_export(expl: ExplanationSet, path, ranking_path=None) -> tuple[Path, Path]:
    """Long-format SHAP table plus a companion feature ranking by mean |phi|."""
    if len(expl) == 0:
        raise ShapError("nothing to export: empty explanation set")
    path = Path(path)
    ranking_path = Path(ranking_path) if ranking_path else ranking_path_for(path)
    names = expl.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "feature", "feature_value", "shap_value"])
        for i, e in enumerate(expl.explanations):
            for j, name in enumerate(names):
                w.writerow([i, name, format_float(e.explained_point[j]), format_float(e.attributions[j])])
    with open(ranking_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "mean_abs_shap"])
        for rank, (name, score) in enumerate(expl.ranking(), start=1):
            w.writerow([rank, name, format_float(score)])
    return path, ranking_path


def save_explanations(expl: ExplanationSet, path) -> None:
    names = expl.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "base_value", "model_output"] + names + [f"shap_{n}" for n in names])
        for i, e in enumerate(expl.explanations):
            w.writerow(
                [i, format_float(e.base_value), format_float(e.model_output)]
                + [format_float(v) for v in e.explained_point]
                + [format_float(v) for v in e.attributions]
            )


def load_explanations(path) -> ExplanationSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ShapError(f"{path}: empty file")
    header = rows[0]
    d = (len(header) - 3) // 2
    if len(header) != 3 + 2 * d or header[:3] != ["row_id", "base_value", "model_output"]:
        raise ShapError(f"{path}: unexpected header {header}")
    expl = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ShapError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
        vals = [float(v) for v in row[1:]]
        expl.append(
            ShapExplanation(vals[0], np.array(vals[2 + d :]), np.array(vals[2 : 2 + d]), vals[1])
        )
    return ExplanationSet(tuple(expl), tuple(header[3 : 3 + d]))

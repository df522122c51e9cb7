"""Scenario spaces, datasets, input/output transforms and sampling designs."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset file or inconsistent dataset contents."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    practical_min: float
    practical_max: float
    default: float
    unit: str = ""

    def __post_init__(self):
        if not self.practical_min < self.practical_max:
            raise ValueError(
                f"feature {self.name!r}: practical_min must be < practical_max"
            )
        if not self.practical_min <= self.default <= self.practical_max:
            raise ValueError(f"feature {self.name!r}: default outside practical range")


@dataclass(frozen=True)
class ScenarioSpace:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if len(self.features) < 1:
            raise ValueError("scenario space needs at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate feature names in {names}")

    @property
    def dim(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def lower(self) -> np.ndarray:
        return np.array([f.practical_min for f in self.features], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([f.practical_max for f in self.features], dtype=float)

    @property
    def defaults(self) -> np.ndarray:
        return np.array([f.default for f in self.features], dtype=float)

    def contains(self, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
        """Row mask of points inside the practical box."""
        points = np.atleast_2d(points)
        return np.all(
            (points >= self.lower - atol) & (points <= self.upper + atol), axis=1
        )

    def to_dict(self) -> dict:
        return {
            "features": [
                {
                    "name": f.name,
                    "practical_min": f.practical_min,
                    "practical_max": f.practical_max,
                    "default": f.default,
                    "unit": f.unit,
                }
                for f in self.features
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpace":
        return cls(tuple(FeatureSpec(**f) for f in data["features"]))

    @classmethod
    def unit_cube(cls, dim: int) -> "ScenarioSpace":
        return cls(tuple(FeatureSpec(f"x{i + 1}", 0.0, 1.0, 0.5) for i in range(dim)))


# Practical ranges and defaults of the reference scenario inputs.
REFERENCE_SPACE = ScenarioSpace(
    (
        FeatureSpec("fuel_price", 0.0, 5.0, 1.0, "2014 EUR per kg"),
        FeatureSpec("planning_horizon", 100.0, 1000.0, 300.0, "NM"),
        FeatureSpec("cruise_uncertainty_scale", 0.0, 10.0, 1.0),
        FeatureSpec("turnaround_time_scale", 0.0, 10.0, 1.0),
        FeatureSpec("min_connecting_time_scale", 0.0, 10.0, 1.0),
        FeatureSpec("claim_rate", 0.0, 1.0, 0.14),
    )
)


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class LabeledDataset:
    """The labelled set: input rows and one output per row."""

    inputs: np.ndarray
    outputs: np.ndarray
    feature_names: tuple[str, ...] | None = None
    kpi: str | None = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        outputs = np.asarray(self.outputs, dtype=float).reshape(-1)
        if inputs.ndim == 1:
            inputs = inputs.reshape(-1, 1)
        if inputs.ndim != 2 or inputs.shape[0] != outputs.shape[0]:
            raise DatasetError(
                f"inputs have {inputs.shape[0]} rows but outputs have {outputs.shape[0]}"
            )
        _check_finite("inputs", inputs)
        _check_finite("outputs", outputs)
        inputs.setflags(write=False)
        outputs.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return self.outputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def append(self, x: np.ndarray, y: float) -> "LabeledDataset":
        return LabeledDataset(
            np.vstack([self.inputs, np.atleast_2d(x)]),
            np.append(self.outputs, y),
            self.feature_names,
            self.kpi,
        )

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(
            self.inputs[idx], self.outputs[idx], self.feature_names, self.kpi
        )


@dataclass
class UnlabeledPool:
    """Candidate rows for acquisition; acquired rows are masked, not removed."""

    inputs: np.ndarray
    acquired_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.acquired_mask is None:
            self.acquired_mask = np.zeros(self.inputs.shape[0], dtype=bool)
        else:
            self.acquired_mask = np.asarray(self.acquired_mask, dtype=bool).copy()
        if self.acquired_mask.shape != (self.inputs.shape[0],):
            raise ValueError("acquired_mask length must equal the number of pool rows")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def available(self) -> np.ndarray:
        return np.flatnonzero(~self.acquired_mask)

    def mark(self, index: int):
        if self.acquired_mask[index]:
            raise ValueError(f"pool row {index} already acquired")
        self.acquired_mask[index] = True

    def copy(self) -> "UnlabeledPool":
        return UnlabeledPool(self.inputs, self.acquired_mask.copy())


# -- transforms -------------------------------------------------------------


@dataclass(frozen=True)
class InputTransform:
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def from_space(cls, space: ScenarioSpace) -> "InputTransform":
        return cls(space.lower, space.upper)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def forward(self, points: np.ndarray) -> np.ndarray:
        points = _as_matrix(points, self.dim)
        unit = (points - self.lower) / (self.upper - self.lower)
        if np.any((unit < 0.0) | (unit > 1.0)):
            warnings.warn("inputs outside the practical range were clamped to [0, 1]")
            unit = np.clip(unit, 0.0, 1.0)
        return unit

    def inverse(self, unit: np.ndarray) -> np.ndarray:
        unit = _as_matrix(unit, self.dim)
        return self.lower + unit * (self.upper - self.lower)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "InputTransform":
        return cls(np.array(data["lower"], dtype=float), np.array(data["upper"], dtype=float))


@dataclass(frozen=True)
class OutputTransform:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("output transform std must be positive")

    def forward(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, data: dict) -> "OutputTransform":
        return cls(float(data["mean"]), float(data["std"]))


def _as_matrix(points, dim: int) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points.reshape(1, -1)
    if points.ndim != 2 or points.shape[1] != dim:
        raise ValueError(f"expected points with {dim} columns, got shape {points.shape}")
    return points


def rescale_inputs(points, space: ScenarioSpace, direction: str = "forward") -> np.ndarray:
    """Affine map between the practical box and the unit cube.

    ``direction`` is ``"forward"`` (practical -> unit) or ``"inverse"``.
    Out-of-range forward inputs are clamped with a warning.
    """
    transform = InputTransform.from_space(space)
    if direction == "forward":
        return transform.forward(points)
    if direction == "inverse":
        return transform.inverse(points)
    raise ValueError(f"unknown direction {direction!r}")


def fit_output_transform(outputs) -> OutputTransform:
    """Standardization with the population (divisor N) convention."""
    y = np.asarray(outputs, dtype=float).reshape(-1)
    if y.size < 2:
        raise ValueError("need at least two outputs to standardize")
    if not np.all(np.isfinite(y)):
        raise ValueError("outputs contain non-finite values")
    std = float(np.std(y))
    if std == 0.0 or np.all(y == y[0]):
        raise ValueError("degenerate output; cannot standardize")
    return OutputTransform(float(np.mean(y)), std)


# -- designs ----------------------------------------------------------------


def latin_hypercube(n: int, space: ScenarioSpace, seed: int) -> np.ndarray:
    """Latin hypercube sample over the practical box.

    Each column gets one point per equal-width stratum, placed uniformly
    within it; strata are permuted independently per column.
    """
    if n < 1:
        raise ValueError("latin_hypercube needs n >= 1")
    rng = np.random.default_rng(seed)
    d = space.dim
    u = rng.random((n, d))
    strata = np.column_stack([rng.permutation(n) for _ in range(d)])
    unit = (strata + u) / n
    # (k + u)/n can round up to the next stratum edge for u close to 1
    unit = np.minimum(unit, np.nextafter((strata + 1) / n, 0.0))
    return space.lower + unit * (space.upper - space.lower)


def uniform_design(n: int, space: ScenarioSpace, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("uniform_design needs n >= 1")
    rng = np.random.default_rng(seed)
    return space.lower + rng.random((n, space.dim)) * (space.upper - space.lower)


def make_design(n: int, space: ScenarioSpace, seed: int, kind: str = "lhs") -> np.ndarray:
    if kind == "lhs":
        return latin_hypercube(n, space, seed)
    if kind == "uniform":
        return uniform_design(n, space, seed)
    raise ValueError(f"unknown design kind {kind!r}")


# -- CSV persistence --------------------------------------------------------


def format_float(value: float) -> str:
    # repr is the shortest string that round-trips exactly
    return repr(float(value))


def read_csv_matrix(path) -> tuple[list[str], np.ndarray]:
    """Read a numeric CSV with a header row.

    Errors carry 1-based line numbers and the column name.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise DatasetError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    try:
        [float(h) for h in header]
    except ValueError:
        pass
    else:
        raise DatasetError(f"{path}: line 1 looks numeric; a header row is required")
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetError(
                f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}"
            )
        parsed = []
        for col, cell in zip(header, row):
            try:
                v = float(cell)
            except ValueError:
                raise DatasetError(
                    f"{path}: line {lineno}, column {col!r}: non-numeric value {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise DatasetError(
                    f"{path}: line {lineno}, column {col!r}: non-finite value {cell!r}"
                )
            parsed.append(v)
        values.append(parsed)
    matrix = np.array(values, dtype=float).reshape(len(values), len(header))
    return header, matrix


def write_csv_matrix(path, header: Sequence[str], matrix) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in matrix:
            writer.writerow([format_float(v) for v in row])


def load_dataset(
    path,
    space: ScenarioSpace | None = None,
    n_features: int | None = None,
    kpi: str | None = None,
) -> LabeledDataset:
    """Load a labelled dataset: feature columns first, then KPI columns.

    With ``space`` the leading header names must match its feature names.
    Without it the feature count defaults to all columns but the last.
    ``kpi`` picks the output column (default: first one after the features).
    """
    header, matrix = read_csv_matrix(path)
    if space is not None:
        d = space.dim
        if header[:d] != space.names:
            raise DatasetError(
                f"{path}: feature columns {header[:d]} do not match {space.names}"
            )
    else:
        d = n_features if n_features is not None else len(header) - 1
    if not 1 <= d < len(header):
        raise DatasetError(f"{path}: need at least one feature and one output column")
    kpis = header[d:]
    if kpi is None:
        kpi = kpis[0]
    if kpi not in kpis:
        raise DatasetError(f"{path}: no output column {kpi!r} (have {kpis})")
    col = header.index(kpi)
    return LabeledDataset(matrix[:, :d], matrix[:, col], tuple(header[:d]), kpi)


def save_dataset(dataset: LabeledDataset, path, feature_names=None) -> None:
    names = feature_names or dataset.feature_names or [f"x{i + 1}" for i in range(dataset.dim)]
    kpi = dataset.kpi or "y"
    write_csv_matrix(
        path, list(names) + [kpi], np.column_stack([dataset.inputs, dataset.outputs])
    )

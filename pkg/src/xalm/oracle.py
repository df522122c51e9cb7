"""Label providers: synthetic stand-in simulators and an external-process protocol.

All oracles take a batch of input rows in original units and return one
column per KPI. Synthetic noise is keyed on ``(noise_seed, stream, kpi, row)``
through a counter-based hash, so a row's noise realisation does not depend on
which batch it was evaluated in.
"""

from __future__ import annotations

import csv
import io
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import REFERENCE_SPACE, ScenarioSpace, format_float


class OracleError(RuntimeError):
    """The oracle could not produce valid labels for a batch."""


# -- counter-based normal noise ---------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + _GOLDEN).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _to_unit(bits: np.ndarray) -> np.ndarray:
    # 53 high bits, shifted half a step off zero so log() stays finite
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53


def counter_normal(seed: int, stream: int, kpi: int, rows) -> np.ndarray:
    """Standard-normal draws indexed by integer row id (Box-Muller on hashed counters)."""
    rows = np.asarray(rows, dtype=np.uint64)
    key = _splitmix64(np.array([seed % 2**64], dtype=np.uint64))
    key = _splitmix64(key ^ np.uint64(stream % 2**64))
    key = _splitmix64(key ^ np.uint64(kpi % 2**64))
    with np.errstate(over="ignore"):
        u1 = _to_unit(_splitmix64(key ^ (rows * np.uint64(2))))
        u2 = _to_unit(_splitmix64(key ^ (rows * np.uint64(2) + np.uint64(1))))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


# -- synthetic simulators ----------------------------------------------------


def _fuel_cost(x):
    return 26401.0 + 16000.0 * (x[:, 0] - 2.5)


def _pad(x):
    return 0.6 * np.minimum(x[:, 1], 350.0) / 350.0


def _pax_delay(x):
    tt, mct = x[:, 3], x[:, 4]
    return 200.0 + 800.0 * (1.0 - np.exp(-(0.25 * tt + 0.20 * mct + 0.05 * tt * mct)))


def _holding(x):
    fp, tt = x[:, 0], x[:, 3]
    return 0.5 + 0.04 * fp * (1.0 - tt / 20.0) - 0.02 * tt


def _arr_delay(x):
    return 30.0 + 35.0 * x[:, 3]


def _dep_delay(x):
    return 28.0 + 35.0 * x[:, 3]


_LINEAR6_W = np.array([1.0, 0.01, 0.0, 5.0, 3.0, 0.0])


def _linear6(x):
    return x @ _LINEAR6_W + 10.0


def _interaction6(x):
    return 10.0 * x[:, 3] * x[:, 4]


# oracle id -> ordered (kpi, mean function, noise std)
SYNTHETIC_KPIS: dict[str, list[tuple[str, Callable, float]]] = {
    "mercury6": [
        ("fuel_cost", _fuel_cost, 300.0),
        ("pad", _pad, 0.10),
        ("pax_delay", _pax_delay, 45.0),
        ("holding", _holding, 0.15),
        ("arr_delay", _arr_delay, 4.0),
        ("dep_delay", _dep_delay, 4.0),
    ],
    "linear6": [("y", _linear6, 1.0)],
    "interaction6": [("y", _interaction6, 0.5)],
}

SYNTHETIC_IDS = tuple(SYNTHETIC_KPIS)


@dataclass(frozen=True)
class SyntheticOracle:
    """Analytic stand-in simulator on the six-feature reference space.

    ``noise=False`` evaluates the exact mean function.
    """

    id: str
    noise_seed: int = 0
    noise: bool = True
    space: ScenarioSpace = field(default=REFERENCE_SPACE, repr=False)

    def __post_init__(self):
        if self.id not in SYNTHETIC_KPIS:
            raise ValueError(
                f"unknown synthetic oracle {self.id!r}; valid ids: {', '.join(SYNTHETIC_IDS)}"
            )

    @property
    def kpis(self) -> list[str]:
        return [name for name, _, _ in SYNTHETIC_KPIS[self.id]]

    @property
    def noise_std(self) -> dict[str, float]:
        return {name: sd for name, _, sd in SYNTHETIC_KPIS[self.id]}

    def __call__(self, points, row_ids=None, stream: int = 0) -> np.ndarray:
        return eval_synthetic(self, points, row_ids, stream)

    def mean_function(self, kpi: str) -> Callable[[np.ndarray], np.ndarray]:
        for name, fn, _ in SYNTHETIC_KPIS[self.id]:
            if name == kpi:
                return fn
        raise KeyError(f"{self.id} has no KPI {kpi!r}")

    def to_dict(self) -> dict:
        return {"kind": "synthetic", "id": self.id, "noise_seed": self.noise_seed, "noise": self.noise}


def eval_synthetic(oracle: SyntheticOracle, points, row_ids=None, stream: int = 0) -> np.ndarray:
    """Evaluate every KPI of ``oracle`` at ``points``.

    ``row_ids`` identify rows for noise keying (default ``0..n-1``); ``stream``
    separates designs that share row numbering, such as pool vs test set.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    space = oracle.space
    if x.shape[1] != space.dim:
        raise ValueError(f"expected {space.dim} input columns, got {x.shape[1]}")
    if x.shape[0] == 0:
        return np.zeros((0, len(oracle.kpis)))
    bad = ~space.contains(x)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise ValueError(f"row {row} lies outside the practical input ranges")
    if row_ids is None:
        row_ids = np.arange(x.shape[0])
    row_ids = np.asarray(row_ids)
    if row_ids.shape != (x.shape[0],):
        raise ValueError("row_ids must have one entry per point")
    out = np.empty((x.shape[0], len(oracle.kpis)))
    for k, (_, fn, sd) in enumerate(SYNTHETIC_KPIS[oracle.id]):
        out[:, k] = fn(x)
        if oracle.noise:
            out[:, k] += sd * counter_normal(oracle.noise_seed, stream, k, row_ids)
    return out


# -- external simulator over a CSV pipe --------------------------------------


@dataclass(frozen=True)
class ExternalOracle:
    """A child process speaking CSV: feature rows on stdin, KPI rows on stdout."""

    command: str
    kpis: tuple[str, ...]
    timeout: float = 600.0
    feature_names: tuple[str, ...] = tuple(REFERENCE_SPACE.names)

    def __post_init__(self):
        object.__setattr__(self, "kpis", tuple(self.kpis))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if not self.kpis:
            raise ValueError("an external oracle must declare at least one KPI")

    def __call__(self, points, row_ids=None, stream: int = 0) -> np.ndarray:
        return eval_external(self, points)

    def to_dict(self) -> dict:
        return {
            "kind": "external",
            "command": self.command,
            "kpis": list(self.kpis),
            "timeout": self.timeout,
            "feature_names": list(self.feature_names),
        }


def eval_external(oracle: ExternalOracle, points) -> np.ndarray:
    """Run the oracle command once for the whole batch."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if x.shape[1] != len(oracle.feature_names):
        raise ValueError(
            f"expected {len(oracle.feature_names)} input columns, got {x.shape[1]}"
        )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(oracle.feature_names)
    for row in x:
        writer.writerow([format_float(v) for v in row])
    try:
        proc = subprocess.run(
            shlex.split(oracle.command),
            input=buf.getvalue(),
            capture_output=True,
            text=True,
            timeout=oracle.timeout,
        )
    except subprocess.TimeoutExpired as exc:
        stderr = exc.stderr.decode() if isinstance(exc.stderr, bytes) else (exc.stderr or "")
        raise OracleError(
            f"oracle timed out after {oracle.timeout}s; stderr: {stderr.strip()}"
        ) from None
    except OSError as exc:
        raise OracleError(f"could not start oracle command {oracle.command!r}: {exc}") from None
    if proc.returncode != 0:
        raise OracleError(
            f"oracle exited with status {proc.returncode}; stderr: {proc.stderr.strip()}"
        )
    rows = [r for r in csv.reader(io.StringIO(proc.stdout)) if r]
    if not rows:
        raise OracleError(f"oracle produced no output; stderr: {proc.stderr.strip()}")
    header = [h.strip() for h in rows[0]]
    if tuple(header) != oracle.kpis:
        raise OracleError(
            f"oracle header {header} does not match declared KPIs {list(oracle.kpis)}; "
            f"stderr: {proc.stderr.strip()}"
        )
    body = rows[1:]
    if len(body) != x.shape[0]:
        raise OracleError(
            f"row-count mismatch: sent {x.shape[0]} rows, received {len(body)}; "
            f"stderr: {proc.stderr.strip()}"
        )
    out = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise OracleError(f"output line {i + 2} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise OracleError(
                    f"non-numeric output at line {i + 2}, column {header[j]!r}: {cell!r}; "
                    f"stderr: {proc.stderr.strip()}"
                ) from None
    return out


def make_oracle(spec: dict):
    """Build an oracle from its ``to_dict`` form."""
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        return SyntheticOracle(spec["id"], int(spec.get("noise_seed", 0)), bool(spec.get("noise", True)))
    if kind == "external":
        return ExternalOracle(
            spec["command"],
            tuple(spec["kpis"]),
            float(spec.get("timeout", 600.0)),
            tuple(spec.get("feature_names", REFERENCE_SPACE.names)),
        )
    raise ValueError(f"unknown oracle kind {kind!r}")


class CountingOracle:
    """Wrap an oracle and count how many rows it labelled."""

    def __init__(self, oracle):
        self.oracle = oracle
        self.kpis = list(oracle.kpis)
        self.n_rows = 0
        self.n_batches = 0

    def __call__(self, points, row_ids=None, stream: int = 0) -> np.ndarray:
        out = self.oracle(points, row_ids, stream)
        self.n_rows += np.atleast_2d(points).shape[0]
        self.n_batches += 1
        return out

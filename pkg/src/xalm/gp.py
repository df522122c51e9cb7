"""Exact Gaussian-process regression with a zero mean and an ARD-RBF kernel.

Hyperparameters are kept in log space. Fitting rescales inputs to the unit
cube, standardizes outputs, and maximizes the log marginal likelihood with
Adam plus best-iterate early stopping.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy import linalg

from .core import (
    InputTransform,
    LabeledDataset,
    OutputTransform,
    ScenarioSpace,
    fit_output_transform,
)
from .optim import Adam, EarlyStopping

FORMAT_VERSION = 1
MAX_TRAIN_POINTS = 2000
_PREDICT_CHUNK = 8192


class IllConditionedError(np.linalg.LinAlgError):
    """Kernel matrix could not be factorized even with maximum jitter."""


@dataclass(frozen=True)
class KernelHyperparameters:
    log_lengthscales: np.ndarray
    log_output_variance: float
    log_noise_variance: float

    def __post_init__(self):
        ls = np.array(self.log_lengthscales, dtype=float).reshape(-1)
        ls.setflags(write=False)
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_output_variance", float(self.log_output_variance))
        object.__setattr__(self, "log_noise_variance", float(self.log_noise_variance))
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("hyperparameters must be finite")

    @classmethod
    def create(cls, lengthscales, output_variance=1.0, noise_variance=0.01):
        """Build from positive (not log) values."""
        return cls(
            np.log(np.asarray(lengthscales, dtype=float)),
            math.log(output_variance),
            math.log(noise_variance),
        )

    @classmethod
    def initial(cls, dim: int, lengthscale=1.0, output_variance=1.0, noise_variance=1.0):
        return cls.create(np.full(dim, lengthscale), output_variance, noise_variance)

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "KernelHyperparameters":
        return cls(theta[:-2], theta[-2], theta[-1])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.log_lengthscales, [self.log_output_variance, self.log_noise_variance]]
        )

    @property
    def dim(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def output_variance(self) -> float:
        return math.exp(self.log_output_variance)

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)

    def to_dict(self) -> dict:
        return {
            "log_lengthscales": self.log_lengthscales.tolist(),
            "log_output_variance": self.log_output_variance,
            "log_noise_variance": self.log_noise_variance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KernelHyperparameters":
        return cls(
            np.array(data["log_lengthscales"], dtype=float),
            data["log_output_variance"],
            data["log_noise_variance"],
        )


def ard_rbf(x, x2, hp: KernelHyperparameters) -> float:
    """k(x, x2) = sigma * exp(-sum_j (x_j - x2_j)^2 / (2 l_j^2))."""
    x = np.asarray(x, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    if x.shape != x2.shape or x.shape[0] != hp.dim:
        raise ValueError(
            f"dimension mismatch: {x.shape[0]}, {x2.shape[0]} vs {hp.dim} lengthscales"
        )
    r2 = np.sum(((x - x2) / hp.lengthscales) ** 2)
    return hp.output_variance * math.exp(-0.5 * r2)


def _sq_dists(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    a = a / lengthscales
    b = b / lengthscales
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    return np.maximum(d2, 0.0)


def kernel_matrix(a, b, hp: KernelHyperparameters) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != hp.dim or b.shape[1] != hp.dim:
        raise ValueError("dimension mismatch between points and lengthscales")
    return hp.output_variance * np.exp(-0.5 * _sq_dists(a, b, hp.lengthscales))


def _pair_sq_diffs(x: np.ndarray) -> np.ndarray:
    """(N, N, d) squared per-dimension differences between training rows."""
    return (x[:, None, :] - x[None, :, :]) ** 2


def _train_kernel(x: np.ndarray, hp: KernelHyperparameters, diffs=None) -> np.ndarray:
    if diffs is None:
        diffs = _pair_sq_diffs(x)
    return hp.output_variance * np.exp(-0.5 * (diffs @ (1.0 / hp.lengthscales**2)))


def jittered_cholesky(k: np.ndarray, jitter: float = 1e-8, max_jitter: float = 1e-4):
    """Lower Cholesky factor of ``k + jitter*I``, escalating jitter 10x on failure.

    Returns ``(L, jitter_used)``. With ``jitter == 0`` a single plain attempt is
    made.
    """
    n = k.shape[0]
    eye = np.eye(n)
    level = jitter
    while True:
        try:
            chol = linalg.cholesky(k + level * eye, lower=True, check_finite=True)
            return chol, level
        except (linalg.LinAlgError, ValueError):
            if level == 0 or level * 10 > max_jitter * (1 + 1e-12):
                raise IllConditionedError("ill-conditioned kernel matrix") from None
            level *= 10


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, LabeledDataset):
        return data.inputs, data.outputs
    x, y = data
    return np.atleast_2d(np.asarray(x, dtype=float)), np.asarray(y, dtype=float).reshape(-1)


def log_marginal_likelihood(
    data, hp: KernelHyperparameters, jitter: float = 1e-8, max_jitter: float = 1e-4
) -> tuple[float, np.ndarray]:
    """Gaussian log marginal likelihood and its gradient over the log-parameters.

    ``data`` is a :class:`LabeledDataset` or an ``(X, y)`` pair, used as given
    (no rescaling). The gradient is ordered like
    :meth:`KernelHyperparameters.to_vector`.
    """
    x, y = _as_xy(data)
    if y.shape[0] < 1:
        raise ValueError("need at least one training point")
    if x.shape[1] != hp.dim:
        raise ValueError("dimension mismatch between data and lengthscales")
    return _lml(_pair_sq_diffs(x), y, hp, jitter, max_jitter)


def _lml(diffs, y, hp: KernelHyperparameters, jitter, max_jitter):
    n = y.shape[0]
    inv_ls2 = 1.0 / hp.lengthscales**2
    kf = hp.output_variance * np.exp(-0.5 * (diffs @ inv_ls2))
    noise = hp.noise_variance
    chol, _ = jittered_cholesky(kf + noise * np.eye(n), jitter, max_jitter)
    alpha = linalg.cho_solve((chol, True), y, check_finite=False)
    value = (
        -0.5 * y @ alpha
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * n * math.log(2 * math.pi)
    )
    k_inv, info = linalg.lapack.dpotri(chol, lower=1)
    if info != 0:
        raise IllConditionedError("ill-conditioned kernel matrix")
    k_inv = np.tril(k_inv) + np.tril(k_inv, -1).T
    w = np.outer(alpha, alpha) - k_inv
    wk = w * kf
    grad = np.empty(hp.dim + 2)
    grad[: hp.dim] = 0.5 * (wk.reshape(-1) @ diffs.reshape(n * n, -1)) * inv_ls2
    grad[hp.dim] = 0.5 * wk.sum()
    grad[hp.dim + 1] = 0.5 * noise * np.trace(w)
    return float(value), grad


@dataclass(frozen=True)
class GPPosterior:
    """Marginal posterior at query points, in original output units."""

    mean: np.ndarray
    epistemic_variance: np.ndarray
    predictive_variance: np.ndarray


@dataclass(frozen=True)
class TrainedGP:
    hyperparameters: KernelHyperparameters
    train_inputs: np.ndarray  # unit-cube coordinates
    train_outputs: np.ndarray  # standardized
    input_transform: InputTransform
    output_transform: OutputTransform
    chol_factor: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def n_train(self) -> int:
        return self.train_outputs.shape[0]

    @property
    def dim(self) -> int:
        return self.hyperparameters.dim

    def log_marginal_likelihood(self) -> float:
        return log_marginal_likelihood(
            (self.train_inputs, self.train_outputs), self.hyperparameters
        )[0]

    def predict(self, points) -> GPPosterior:
        return predict(self, points)

    def __call__(self, points) -> np.ndarray:
        """Posterior mean in original units, so a TrainedGP is a plain predictor."""
        return predict_mean(self, points)

    def to_dict(self) -> dict:
        return {
            "model": "gp",
            "format_version": FORMAT_VERSION,
            "hyperparameters": self.hyperparameters.to_dict(),
            "input_transform": self.input_transform.to_dict(),
            "output_transform": self.output_transform.to_dict(),
            "train_inputs": self.train_inputs.tolist(),
            "train_outputs": self.train_outputs.tolist(),
            "jitter": self.jitter,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainedGP":
        if data.get("model") != "gp":
            raise ValueError(f"not a GP model document (model={data.get('model')!r})")
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {data.get('format_version')!r}")
        return condition(
            np.array(data["train_inputs"], dtype=float),
            np.array(data["train_outputs"], dtype=float),
            KernelHyperparameters.from_dict(data["hyperparameters"]),
            InputTransform.from_dict(data["input_transform"]),
            OutputTransform.from_dict(data["output_transform"]),
            jitter=float(data.get("jitter", 1e-8)),
        )

    @classmethod
    def from_json(cls, text: str) -> "TrainedGP":
        return cls.from_dict(json.loads(text))


def save_gp(gp: TrainedGP, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(gp.to_json())


def load_gp(path) -> TrainedGP:
    with open(path, encoding="utf-8") as fh:
        return TrainedGP.from_json(fh.read())


def condition(
    train_inputs,
    train_outputs,
    hp: KernelHyperparameters,
    input_transform: InputTransform | None = None,
    output_transform: OutputTransform | None = None,
    jitter: float = 1e-8,
    max_jitter: float = 1e-4,
) -> TrainedGP:
    """Condition a GP on data already in unit-cube / standardized coordinates.

    Identity transforms are used when none are given.
    """
    x = np.atleast_2d(np.asarray(train_inputs, dtype=float))
    y = np.asarray(train_outputs, dtype=float).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise ValueError("train inputs and outputs differ in length")
    if x.shape[1] != hp.dim:
        raise ValueError("dimension mismatch between data and lengthscales")
    if input_transform is None:
        input_transform = InputTransform(np.zeros(hp.dim), np.ones(hp.dim))
    if output_transform is None:
        output_transform = OutputTransform(0.0, 1.0)
    k = _train_kernel(x, hp) + hp.noise_variance * np.eye(len(y))
    chol, used = jittered_cholesky(k, jitter, max_jitter)
    alpha = linalg.cho_solve((chol, True), y)
    for arr in (x, y, chol, alpha):
        arr.setflags(write=False)
    return TrainedGP(hp, x, y, input_transform, output_transform, chol, alpha, used)


@dataclass(frozen=True)
class FitConfig:
    max_steps: int = 300
    learning_rate: float = 0.1
    patience: int = 15
    init_lengthscale: float = 1.0
    init_output_variance: float = 1.0
    init_noise_variance: float = 1.0
    jitter: float = 1e-8
    max_jitter: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def fit_gp(
    data: LabeledDataset,
    space: ScenarioSpace,
    config: FitConfig = FitConfig(),
    init: KernelHyperparameters | None = None,
) -> TrainedGP:
    """Fit a GP to ``data`` (original units) by type-II maximum likelihood.

    Inputs are rescaled with ``space``'s practical box and outputs standardized
    before optimisation. Returns the hyperparameters of the best-LML step.
    """
    n = len(data)
    if n < 2:
        raise ValueError("fit_gp needs at least two training points")
    if n > MAX_TRAIN_POINTS:
        raise ValueError(f"exact GP limited to {MAX_TRAIN_POINTS} points, got {n}")
    if data.dim != space.dim:
        raise ValueError(f"data has {data.dim} features, space has {space.dim}")
    in_tf = InputTransform.from_space(space)
    out_tf = fit_output_transform(data.outputs)
    x = in_tf.forward(data.inputs)
    y = out_tf.forward(data.outputs)

    if init is None:
        init = KernelHyperparameters.initial(
            space.dim,
            config.init_lengthscale,
            config.init_output_variance,
            config.init_noise_variance,
        )
    theta = init.to_vector()
    diffs = _pair_sq_diffs(x)
    adam = Adam(config.learning_rate, config.beta1, config.beta2, config.eps, maximize=True)
    stopper = EarlyStopping(config.patience, mode="max")
    best_theta = theta.copy()
    for step in range(config.max_steps):
        try:
            hp = KernelHyperparameters.from_vector(theta)
            value, grad = _lml(diffs, y, hp, config.jitter, config.max_jitter)
        except (IllConditionedError, ValueError, FloatingPointError):
            value, grad = float("nan"), None
        if not (math.isfinite(value) and grad is not None and np.all(np.isfinite(grad))):
            if step == 0:
                raise IllConditionedError("LML not finite at the initial hyperparameters")
            warnings.warn(
                f"non-finite LML at step {step}; keeping the best finite hyperparameters"
            )
            break
        stop = stopper.update(step, value)
        if stopper.best_step == step:
            best_theta = theta.copy()
        if stop:
            break
        theta = adam.step(theta, grad)
    return condition(
        x,
        y,
        KernelHyperparameters.from_vector(best_theta),
        in_tf,
        out_tf,
        config.jitter,
        config.max_jitter,
    )


def predict_latent(gp: TrainedGP, points) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and noise-free variance in standardized output units."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[0] == 0:
        return np.zeros(0), np.zeros(0)
    if x.ndim != 2 or x.shape[1] != gp.dim:
        raise ValueError(f"expected query points with {gp.dim} columns, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("query points contain non-finite values")
    u = gp.input_transform.forward(x)
    hp = gp.hyperparameters
    means, variances = [], []
    for start in range(0, u.shape[0], _PREDICT_CHUNK):
        chunk = u[start : start + _PREDICT_CHUNK]
        k_star = kernel_matrix(chunk, gp.train_inputs, hp)
        means.append(k_star @ gp.alpha)
        v = linalg.solve_triangular(gp.chol_factor, k_star.T, lower=True)
        var = hp.output_variance - np.sum(v * v, axis=0)
        variances.append(np.maximum(var, 0.0))
    return np.concatenate(means), np.concatenate(variances)


def predict(gp: TrainedGP, points) -> GPPosterior:
    mean_z, var_z = predict_latent(gp, points)
    scale = gp.output_transform.std**2
    epistemic = var_z * scale
    return GPPosterior(
        mean=gp.output_transform.inverse(mean_z),
        epistemic_variance=epistemic,
        predictive_variance=epistemic + gp.hyperparameters.noise_variance * scale,
    )


def predict_mean(gp: TrainedGP, points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[0] == 0:
        return np.zeros(0)
    u = gp.input_transform.forward(x)
    out = np.empty(u.shape[0])
    for start in range(0, u.shape[0], _PREDICT_CHUNK):
        chunk = u[start : start + _PREDICT_CHUNK]
        out[start : start + len(chunk)] = kernel_matrix(
            chunk, gp.train_inputs, gp.hyperparameters
        ) @ gp.alpha
    return gp.output_transform.inverse(out)


def intervals(post: GPPosterior, level: float = 0.95):
    """Symmetric confidence (latent) and prediction (noisy) intervals.

    Returns ``(ci_low, ci_high, pi_low, pi_high)``.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    z = NormalDist().inv_cdf((1.0 + level) / 2.0)
    ci = z * np.sqrt(post.epistemic_variance)
    pi = z * np.sqrt(post.predictive_variance)
    return post.mean - ci, post.mean + ci, post.mean - pi, post.mean + pi

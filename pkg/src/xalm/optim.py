"""Small optimisation helpers shared by the GP and boosting fitters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EarlyStopping:
    """Track the best score and signal a stop after ``patience`` non-improving steps.

    ``mode="max"`` for likelihoods, ``"min"`` for errors. Improvement is strict.
    """

    def __init__(self, patience: int, mode: str = "min"):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        if mode not in ("min", "max"):
            raise ValueError(f"unknown mode {mode!r}")
        self.patience = patience
        self.mode = mode
        self.best_score: float | None = None
        self.best_step: int | None = None
        self.bad_steps = 0

    def update(self, step: int, score: float) -> bool:
        """Record ``score`` for ``step``; return True once the run should stop."""
        better = self.best_score is None or (
            score > self.best_score if self.mode == "max" else score < self.best_score
        )
        if better:
            self.best_score = score
            self.best_step = step
            self.bad_steps = 0
        else:
            self.bad_steps += 1
        return self.bad_steps >= self.patience


@dataclass
class Adam:
    """Adaptive-moment update for ascent (``maximize=True``) or descent."""

    learning_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    maximize: bool = True

    def __post_init__(self):
        self._m = None
        self._v = None
        self._t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad * grad
        m_hat = self._m / (1 - self.beta1**self._t)
        v_hat = self._v / (1 - self.beta2**self._t)
        update = self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return params + update if self.maximize else params - update

"""Length-only reference classifier for the length-bias probe."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Sample


def _feature(samples: Sequence[Sample]) -> np.ndarray:
    return np.log1p(np.array([s.word_count for s in samples], dtype=float))


@dataclass
class LengthBaseline:
    """Logistic regression on log word count (machine = 1)."""

    weight: float = 0.0
    bias: float = 0.0
    center: float = 0.0
    scale: float = 1.0

    @classmethod
    def fit(cls, samples: Sequence[Sample], l2: float = 1e-4, iters: int = 50) -> LengthBaseline:
        x = _feature(samples)
        y = np.array([s.label for s in samples], dtype=float)
        center = float(x.mean())
        scale = float(x.std()) or 1.0
        z = (x - center) / scale
        X = np.stack([z, np.ones_like(z)], axis=1)
        theta = np.zeros(2)
        reg = np.diag([l2, 0.0])
        for _ in range(iters):  # Newton / IRLS
            p = 1.0 / (1.0 + np.exp(-(X @ theta)))
            grad = X.T @ (p - y) / len(y) + reg @ theta
            hess = (X.T * (p * (1 - p))) @ X / len(y) + reg + 1e-12 * np.eye(2)
            step = np.linalg.solve(hess, grad)
            theta -= step
            if np.max(np.abs(step)) < 1e-12:
                break
        return cls(float(theta[0]), float(theta[1]), center, scale)

    def decision(self, samples: Sequence[Sample]) -> np.ndarray:
        return self.weight * (_feature(samples) - self.center) / self.scale + self.bias

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        return (self.decision(samples) > 0).astype(np.int64)

    def threshold_words(self) -> float:
        """Word count at which the prediction flips."""
        if self.weight == 0:
            return float("nan")
        return float(np.expm1(self.center - self.bias * self.scale / self.weight))

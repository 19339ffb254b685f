"""Analytic terminal rewards for the 2-D toy tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .velocity import mixture_centers

REWARD_KINDS = ("target_logdensity", "neg_mode_distance", "flatness_probe")


@dataclass(frozen=True)
class RewardFn:
    kind: str = "target_logdensity"
    means: tuple = tuple(map(tuple, mixture_centers(8, 2.0)))
    std: float = 0.15
    weights: tuple | None = None
    mode_index: int = 0
    plateau_radius: float = 1.0
    plateau_value: float = 1.0

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if not self.std > 0:
            raise ValueError("std must be positive")
        object.__setattr__(self, "means", tuple(tuple(float(v) for v in m) for m in self.means))
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            if len(w) != len(self.means) or any(v <= 0 for v in w):
                raise ValueError("need one positive weight per component")
            object.__setattr__(self, "weights", w)

    def __call__(self, x0, c=None) -> np.ndarray:
        """Batched rewards, one per row of ``x0``."""
        x = np.atleast_2d(np.asarray(x0, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite sample")
        if self.kind == "target_logdensity":
            return self._logdensity(x)
        if self.kind == "neg_mode_distance":
            mu = np.asarray(self.means[self._mode(c)])
            return -np.linalg.norm(x - mu, axis=1)
        r = np.linalg.norm(x, axis=1)
        return np.where(r < self.plateau_radius, self.plateau_value,
                        self.plateau_value - (r - self.plateau_radius))

    def _mode(self, c) -> int:
        if c is None or np.size(c) == 0:
            return self.mode_index
        return int(np.argmax(c))

    def _logdensity(self, x):
        mus = np.asarray(self.means)
        n_comp, d = mus.shape
        w = np.full(n_comp, 1.0 / n_comp) if self.weights is None else np.asarray(self.weights) / sum(self.weights)
        sq = np.sum((x[:, None, :] - mus[None, :, :]) ** 2, axis=2)
        logc = np.log(w) - 0.5 * d * math.log(2 * math.pi * self.std**2) - 0.5 * sq / self.std**2
        m = logc.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(logc - m).sum(axis=1, keepdims=True)))[:, 0]


def reward_eval(fn: RewardFn, x0, c=None) -> float:
    """Scalar reward of a single sample."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise ValueError("reward_eval takes one sample; call the RewardFn for batches")
    return float(fn(x0[None, :], c)[0])

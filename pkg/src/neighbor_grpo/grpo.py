"""Group advantages and the clipped policy-ratio objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mathcore import lp_norm, mean_std

DEGENERATE_STD = 1e-8


@dataclass
class AdvantageVector:
    values: np.ndarray
    mode: str = "standard"
    p: float = 2.0

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class GrpoObjectiveConfig:
    clip_eps: float = 1e-4
    beta_kl: float = 0.0

    def __post_init__(self):
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be nonnegative")


def _rewards(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("a reward group needs at least two members")
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite reward")
    return r


def advantages_standard(rewards, ddof: int = 0) -> AdvantageVector:
    """``(r - mean) / std``; a group with std below 1e-8 gets all zeros."""
    r = _rewards(rewards)
    m, s = mean_std(r, ddof=ddof)
    if s < DEGENERATE_STD:
        return AdvantageVector(np.zeros_like(r), "standard", 2.0)
    return AdvantageVector((r - m) / s, "standard", 2.0)


def advantages_quasinorm(rewards, p: float) -> AdvantageVector:
    """Mean-centred rewards divided by their L_p (quasi-)norm.

    For ``p = 2`` this is the standard advantage scaled by ``1/sqrt(G)``;
    smaller ``p`` shrinks flat groups harder (magnitude ``G**(-1/p)``).
    """
    if not 0 < p <= 2:
        raise ValueError(f"p must lie in (0, 2], got {p}")
    r = _rewards(rewards)
    centered = r - r.mean()
    _, s = mean_std(r)
    if s < DEGENERATE_STD:
        return AdvantageVector(np.zeros_like(r), "quasi_norm", p)
    return AdvantageVector(centered / lp_norm(centered, p), "quasi_norm", p)


def compute_advantages(rewards, mode: str = "quasi_norm", p: float = 0.8, ddof: int = 0) -> AdvantageVector:
    if mode == "standard":
        return advantages_standard(rewards, ddof)
    if mode == "quasi_norm":
        return advantages_quasinorm(rewards, p)
    raise ValueError(f"unknown advantage mode {mode!r}")


def clipped_terms(adv, ratios, clip_eps: float):
    """Per-term ``min(A rho, A clip(rho))`` and the mask of terms whose
    gradient survives (the unclipped branch is the minimum)."""
    A = np.asarray(getattr(adv, "values", adv), dtype=float)
    rho = np.asarray(ratios, dtype=float)
    if rho.shape != A.shape:
        raise ValueError("need one ratio per advantage")
    if np.any(~np.isfinite(rho)) or np.any(rho <= 0):
        raise ValueError("ratios must be positive and finite")
    if math.isinf(clip_eps):
        return A * rho, np.ones(A.shape, dtype=bool)
    clipped = np.clip(rho, 1 - clip_eps, 1 + clip_eps)
    unclipped_val = A * rho
    clipped_val = A * clipped
    active = unclipped_val <= clipped_val
    return np.where(active, unclipped_val, clipped_val), active


def clipped_objective(adv, ratios, cfg: GrpoObjectiveConfig, kl: float = 0.0):
    """``sum_i min(A_i rho_i, A_i clip(rho_i, 1 - eps, 1 + eps))``.

    ``kl`` is a caller-supplied divergence estimate, subtracted with weight
    ``beta_kl`` (ignored when the weight is 0). Returns ``(value, per_term)``.
    """
    terms, _ = clipped_terms(adv, ratios, cfg.clip_eps)
    value = float(terms.sum())
    if cfg.beta_kl > 0:
        value -= cfg.beta_kl * kl
    return value, terms


def kl_surrogate(logp_new, logp_old) -> float:
    """Squared log-policy difference, ``0.5 * mean((log pi - log pi_old)^2)``."""
    diff = np.asarray(logp_new, dtype=float) - np.asarray(logp_old, dtype=float)
    return float(0.5 * np.mean(diff**2))

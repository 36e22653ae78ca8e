"""Hierarchical GRPO bookkeeping: group advantages and the clipped surrogate.

A rollout group holds ``G1`` grounding samples, each followed by ``G2``
answer samples conditioned on its crop, so ``G1 * G2`` trajectories share one
set of normalization statistics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DomainError, NonFinite

STD_EPS = 1e-12
RATIO_CAP = 1e6
_LOG_RATIO_CAP = math.log(RATIO_CAP)


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    kl_coef: float = 0.0
    # "answer_only" normalizes r_answer alone; "sum" uses alpha * r_ground + r_answer.
    combine_ground_reward: str = "sum"
    alpha: float = 1.0
    G1: int = 4
    G2: int = 2

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be nonnegative")
        if self.combine_ground_reward not in ("answer_only", "sum"):
            raise ValueError(f"unknown combine rule {self.combine_ground_reward!r}")
        if self.G1 < 1 or self.G2 < 1:
            raise ValueError("G1 and G2 must be >= 1")


@dataclass
class GroundingRollout:
    trace_prefix: Any
    logp_old: float
    r_ground: float
    action: int | None = None


@dataclass
class AnswerRollout:
    trace: Any
    logp_old: float
    r_answer: float
    action: int | None = None
    context: int | None = None
    extras: dict = field(default_factory=dict)


@dataclass
class RolloutGroup:
    G1: int
    G2: int
    grounding: list[GroundingRollout]
    answers: list[list[AnswerRollout]]
    task: Any = None

    def __post_init__(self):
        if len(self.grounding) != self.G1 or len(self.answers) != self.G1:
            raise ValueError("grounding/answers must have G1 rows")
        if any(len(row) != self.G2 for row in self.answers):
            raise ValueError("every answer row must have G2 entries")
        for row in self.answers:
            for a in row:
                if not math.isfinite(a.logp_old):
                    raise ValueError("logp_old must be finite")

    def reward_matrix(self, cfg: GrpoConfig) -> np.ndarray:
        return np.array([[trajectory_reward(g.r_ground, a.r_answer, cfg) for a in row]
                         for g, row in zip(self.grounding, self.answers)], dtype=float)

    def logp_old_matrix(self) -> np.ndarray:
        return np.array([[a.logp_old for a in row] for row in self.answers], dtype=float)


@dataclass(frozen=True)
class AdvantageMatrix:
    a: np.ndarray
    mean_r: float
    std_r: float


def _fmean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def compute_advantages(rewards, cfg: GrpoConfig | None = None) -> AdvantageMatrix:
    """Normalize rewards by the mean and population std of the whole group."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 2:
        raise ValueError("rewards must be a G1 x G2 matrix")
    if cfg is not None and r.shape != (cfg.G1, cfg.G2):
        raise ValueError(f"rewards shape {r.shape} != ({cfg.G1}, {cfg.G2})")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    flat = r.ravel().tolist()
    mean = _fmean(flat)
    std = math.sqrt(_fmean((x - mean) ** 2 for x in flat))
    if std < STD_EPS:
        return AdvantageMatrix(np.zeros_like(r), mean, std)
    return AdvantageMatrix((r - mean) / std, mean, std)


def clip(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def clipped_term(ratio: float, A: float, epsilon: float) -> float:
    return min(ratio * A, clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * A)


def importance_ratios(logp_new, logp_old) -> np.ndarray:
    log_ratio = np.asarray(logp_new, dtype=float) - np.asarray(logp_old, dtype=float)
    if not np.all(np.isfinite(log_ratio)) or np.any(log_ratio > _LOG_RATIO_CAP):
        raise NonFinite("importance ratio exceeds cap")
    return np.exp(log_ratio)


def grpo_objective(logp_new, logp_old, A: AdvantageMatrix, cfg: GrpoConfig, kl: float = 0.0) -> float:
    """Mean clipped surrogate over the group, minus ``kl_coef * kl``."""
    ratios = importance_ratios(logp_new, logp_old)
    adv = A.a if isinstance(A, AdvantageMatrix) else np.asarray(A, dtype=float)
    if ratios.shape != adv.shape:
        raise ValueError("logp and advantage shapes differ")
    terms = [clipped_term(r, a, cfg.epsilon) for r, a in zip(ratios.ravel().tolist(), adv.ravel().tolist())]
    value = _fmean(terms)
    if cfg.kl_coef > 0:
        value -= cfg.kl_coef * kl
    return value


def kl_categorical(p, q, atol: float = 1e-9) -> float:
    """Exact KL(p || q) with the convention 0 * log 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DomainError("p and q must share a support")
    if np.any(p < 0) or np.any(q < 0):
        raise DomainError("probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > atol or abs(q.sum() - 1.0) > atol:
        raise DomainError("distributions must sum to 1")
    mask = p > 0
    if np.any(q[mask] == 0):
        raise DomainError("q has zero mass where p is positive")
    return max(math.fsum((p[mask] * (np.log(p[mask]) - np.log(q[mask]))).tolist()), 0.0)


def trajectory_reward(r_ground: float, r_answer: float, cfg: GrpoConfig) -> float:
    if cfg.combine_ground_reward == "answer_only":
        return r_answer
    return cfg.alpha * r_ground + r_answer

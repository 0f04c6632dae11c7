"""Closed-form training arithmetic: next-token loss, Bradley-Terry loss,
digit-expectation reward extraction, the 0.8/0.2 reward blend, and the
group-normalized clipped-surrogate objective.

Everything here is a pure scalar evaluation over supplied numbers — no
gradients, no policies, no sampling. Ratios and KL estimates are inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

REWARD_MODEL_WEIGHT = 0.8
IMAGE_REWARD_WEIGHT = 0.2


class DomainError(ValueError):
    """Input outside the mathematical domain of a formula."""


@dataclass
class TokenDistribution:
    """Per-position probability vectors plus the true class index at each position."""

    probs: list[list[float]]
    labels: list[int]

    def validate(self) -> None:
        if len(self.probs) != len(self.labels):
            raise DomainError("probs and labels must have equal length")
        if not self.probs:
            raise DomainError("empty distribution")
        for n, (vec, label) in enumerate(zip(self.probs, self.labels)):
            if not 0 <= label < len(vec):
                raise DomainError(f"label {label} out of range at position {n}")
            total = math.fsum(vec)
            if abs(total - 1.0) > 1e-6:
                raise DomainError(f"probabilities at position {n} sum to {total}, not 1")
            if any(p < 0 for p in vec):
                raise DomainError(f"negative probability at position {n}")


@dataclass
class GrpoBatch:
    rewards: list[float]
    ratios: list[float]
    kl: float = 0.0
    eps_clip: float = 0.2
    beta: float = 0.0
    eps_std: float = 1e-4

    def validate(self) -> None:
        if len(self.rewards) < 2:
            raise DomainError("group size must be >= 2")
        if len(self.ratios) != len(self.rewards):
            raise DomainError("ratios and rewards must have equal length")
        if any(r <= 0 for r in self.ratios):
            raise DomainError("ratios must be positive")
        if not 0 < self.eps_clip < 1:
            raise DomainError("eps_clip must lie in (0,1)")
        if self.kl < 0 or self.beta < 0 or self.eps_std < 0:
            raise DomainError("kl, beta, and eps_std must be non-negative")


def next_token_loss(d: TokenDistribution) -> float:
    """Mean negative log-probability of the true class over the sequence."""
    d.validate()
    total = 0.0
    for n, (vec, label) in enumerate(zip(d.probs, d.labels)):
        p = vec[label]
        if p <= 0.0:
            raise DomainError(f"selected probability is zero at position {n}")
        total += math.log(p)
    return -total / len(d.probs)


def bt_loss(f_w: float, f_l: float) -> float:
    """Pairwise preference loss -log(sigmoid(f_w - f_l)), softplus-stable."""
    if not (math.isfinite(f_w) and math.isfinite(f_l)):
        raise DomainError("inputs must be finite")
    return _softplus(-(f_w - f_l))


def _softplus(x: float) -> float:
    # log(1 + e^x) without overflow for large |x|.
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def digit_expectation_score(digit_probs: Sequence[float]) -> float:
    """Probability-weighted digit expectation, renormalized over the digit mass.

    Maps ten digit-token probabilities to a scalar in [0, 9].
    """
    if len(digit_probs) != 10:
        raise DomainError("expected exactly 10 digit probabilities")
    if any(p < 0 for p in digit_probs):
        raise DomainError("digit probabilities must be non-negative")
    mass = math.fsum(digit_probs)
    if mass <= 0.0:
        raise DomainError("zero total digit mass")
    return math.fsum(i * p for i, p in enumerate(digit_probs)) / mass


def combined_reward(f: float, image_reward: float) -> float:
    """Blend the learned quality score with the external image reward (0.8/0.2)."""
    if not (math.isfinite(f) and math.isfinite(image_reward)):
        raise DomainError("inputs must be finite")
    return REWARD_MODEL_WEIGHT * f + IMAGE_REWARD_WEIGHT * image_reward


def grpo_advantages(rewards: Sequence[float], eps_std: float = 1e-4) -> list[float]:
    """Group-normalized advantages: (r_i - mean) / (population std + eps_std).

    Deviations are computed as the mean of pairwise differences so that a
    constant offset on all rewards cancels before any rounding, keeping
    shift invariance exact for exactly-representable inputs.
    """
    group = len(rewards)
    if group < 2:
        raise DomainError("group size must be >= 2")
    if eps_std < 0:
        raise DomainError("eps_std must be non-negative")
    deviations = [math.fsum(r_i - r_j for r_j in rewards) / group for r_i in rewards]
    variance = math.fsum(d * d for d in deviations) / group
    denom = math.sqrt(variance) + eps_std
    if denom == 0.0:
        # eps_std == 0 with a degenerate group: every deviation is 0.
        return [0.0] * group
    return [d / denom for d in deviations]


def clipped_surrogate(
    ratios: Sequence[float],
    advantages: Sequence[float],
    eps_clip: float,
    beta: float = 0.0,
    kl: float = 0.0,
) -> float:
    """Mean over the group of min(ratio*A, clip(ratio)*A), minus beta*kl."""
    if len(ratios) != len(advantages) or not ratios:
        raise DomainError("ratios and advantages must be non-empty and equal length")
    if any(r <= 0 for r in ratios):
        raise DomainError("ratios must be positive")
    lo, hi = 1.0 - eps_clip, 1.0 + eps_clip
    terms = [
        min(r * a, min(max(r, lo), hi) * a)
        for r, a in zip(ratios, advantages)
    ]
    return math.fsum(terms) / len(terms) - beta * kl


def grpo_objective(batch: GrpoBatch) -> float:
    """Scalar value of the clipped-surrogate objective for one reward group."""
    batch.validate()
    advantages = grpo_advantages(batch.rewards, batch.eps_std)
    return clipped_surrogate(batch.ratios, advantages, batch.eps_clip, batch.beta, batch.kl)

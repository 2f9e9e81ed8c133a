"""Value-level GRPO and PPO objectives on logged token probabilities.

Nothing here differentiates anything: these functions evaluate the clipped
surrogate objectives exactly, so they can be checked against hand
computation and used to summarise rollout groups.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

EPS_CLIP = 0.2
BETA = 0.001
EPS_STD = 1e-8


@dataclass(frozen=True)
class TokenProbRecord:
    logprob_current: float
    logprob_old: float
    logprob_ref: float | None = None

    def __post_init__(self):
        for name in ("logprob_current", "logprob_old", "logprob_ref"):
            v = getattr(self, name)
            if v is None:
                continue
            if not math.isfinite(v) or v > 0:
                raise ValueError(f"{name} must be a finite log-probability, got {v}")

    @property
    def ratio(self) -> float:
        return math.exp(self.logprob_current - self.logprob_old)


@dataclass
class MemberTerms:
    clipped_mean: float
    kl_mean: float
    tokens: int
    clipped_tokens: int


@dataclass
class ObjectiveBreakdown:
    total: float
    members: list[MemberTerms] = field(default_factory=list)
    clip_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "clip_fraction": self.clip_fraction,
            "members": [{"clipped_term_mean": m.clipped_mean, "kl_term_mean": m.kl_mean,
                         "tokens": m.tokens} for m in self.members],
        }


def grpo_advantages(rewards: Sequence[float], epsilon_std: float = EPS_STD) -> list[float]:
    """Group z-scores ``(r_i - mean) / max(std, epsilon_std)`` with population std."""
    if not rewards:
        raise ValueError("rewards must be nonempty")
    n = len(rewards)
    mean = math.fsum(rewards) / n
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in rewards) / n)
    if std < epsilon_std:
        # Degenerate group: no relative signal.
        return [0.0] * n
    return [(r - mean) / std for r in rewards]


def clip_active(ratio: float, advantage: float, epsilon_clip: float = EPS_CLIP) -> bool:
    """True when the clipped branch is the strict minimum."""
    clipped = min(max(ratio, 1.0 - epsilon_clip), 1.0 + epsilon_clip)
    return clipped * advantage < ratio * advantage


def clipped_term(ratio: float, advantage: float, epsilon_clip: float = EPS_CLIP) -> float:
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    clipped = min(max(ratio, 1.0 - epsilon_clip), 1.0 + epsilon_clip)
    return min(ratio * advantage, clipped * advantage)


def kl_penalty_term(record: TokenProbRecord) -> float:
    """k3 estimator ``rho - log(rho) - 1`` with ``rho = pi_ref / pi_theta``."""
    if record.logprob_ref is None:
        raise ValueError("kl term needs logprob_ref")
    log_rho = record.logprob_ref - record.logprob_current
    # expm1 keeps precision for tiny gaps; result is >= 0 up to rounding
    return max(math.expm1(log_rho) - log_rho, 0.0)


def _member_terms(records: Sequence[TokenProbRecord], advantages: Sequence[float],
                  epsilon_clip: float, beta: float) -> MemberTerms:
    if not records:
        raise ValueError("each member needs at least one token record")
    clipped, kls, n_clipped = [], [], 0
    for rec, adv in zip(records, advantages):
        ratio = rec.ratio
        clipped.append(clipped_term(ratio, adv, epsilon_clip))
        n_clipped += clip_active(ratio, adv, epsilon_clip)
        kls.append(kl_penalty_term(rec) if beta else 0.0)
    n = len(records)
    return MemberTerms(math.fsum(clipped) / n, math.fsum(kls) / n, n, n_clipped)


def grpo_objective(members: Sequence[Sequence[TokenProbRecord]], advantages: Sequence[float],
                   epsilon_clip: float = EPS_CLIP, beta: float = BETA) -> ObjectiveBreakdown:
    """Token-mean per member, then mean over the group, of clip - beta * KL.

    ``advantages`` holds one value per member, shared by all its tokens.
    """
    if len(members) != len(advantages):
        raise ValueError(f"{len(members)} members but {len(advantages)} advantages")
    if not members:
        raise ValueError("group must be nonempty")
    terms = [_member_terms(recs, [adv] * len(recs), epsilon_clip, beta)
             for recs, adv in zip(members, advantages)]
    return _aggregate(terms, beta)


def ppo_objective(records: Sequence[TokenProbRecord], advantages: Sequence[float],
                  epsilon_clip: float = EPS_CLIP) -> ObjectiveBreakdown:
    """Token-mean clipped surrogate for one output with per-token advantages."""
    if len(records) != len(advantages):
        raise ValueError(f"{len(records)} tokens but {len(advantages)} advantages")
    terms = [_member_terms(records, advantages, epsilon_clip, beta=0.0)]
    return _aggregate(terms, beta=0.0)


def _aggregate(terms: list[MemberTerms], beta: float) -> ObjectiveBreakdown:
    total = math.fsum(t.clipped_mean - beta * t.kl_mean for t in terms) / len(terms)
    n_tokens = sum(t.tokens for t in terms)
    frac = sum(t.clipped_tokens for t in terms) / n_tokens
    return ObjectiveBreakdown(total=total, members=terms, clip_fraction=frac)

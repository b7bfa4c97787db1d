"""Inference-time abstention from confidence and entropy."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

from .records import AnswerDistribution, PredictionRecord
from .uncertainty import confidence, entropy

DEFAULT_C_MIN = 0.5
DEFAULT_U_MAX_FRAC = 0.75


class AbstainReason(str, enum.Enum):
    LOW_CONFIDENCE = "low_confidence"
    HIGH_ENTROPY = "high_entropy"


@dataclass(frozen=True)
class Decision:
    answer_id: Optional[int]
    reason: Optional[AbstainReason]
    confidence_c: float
    entropy_u: float

    @property
    def abstained(self) -> bool:
        return self.reason is not None

    def to_json(self, record_id: str) -> dict:
        return {
            "id": record_id,
            "outcome": "abstain" if self.abstained else "answer",
            "answer_id": self.answer_id,
            "reason": None if self.reason is None else self.reason.value,
            "confidence": self.confidence_c,
            "entropy": self.entropy_u,
        }


def decide_distribution(
    dist: AnswerDistribution,
    predicted_id: int,
    c_min: float = DEFAULT_C_MIN,
    u_max_frac: float = DEFAULT_U_MAX_FRAC,
) -> Decision:
    c = confidence(dist)
    u = entropy(dist)
    # confidence is checked first so the reason is deterministic
    if c < c_min:
        return Decision(None, AbstainReason.LOW_CONFIDENCE, c, u)
    if u > u_max_frac * math.log(len(dist)):
        return Decision(None, AbstainReason.HIGH_ENTROPY, c, u)
    return Decision(predicted_id, None, c, u)


def decide(
    record: PredictionRecord,
    c_min: float = DEFAULT_C_MIN,
    u_max_frac: float = DEFAULT_U_MAX_FRAC,
    scaler=None,
) -> Decision:
    """Answer or abstain; ``scaler`` (a TemperatureScaler) tempers the distribution first."""
    dist = record.distribution if scaler is None else scaler.temper(record.distribution)
    return decide_distribution(dist, record.predicted_id, c_min, u_max_frac)

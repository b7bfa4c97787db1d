"""Entropy and max-probability confidence of an answer distribution."""

from __future__ import annotations

import numpy as np

from .records import PROB_FLOOR, SUM_TOLERANCE, AnswerDistribution, PredictionRecord, RecordError


def _checked_probs(dist: AnswerDistribution) -> np.ndarray:
    p = dist.probs
    if abs(float(p.sum()) - 1.0) > SUM_TOLERANCE:
        raise RecordError(f"distribution not normalized (sum={float(p.sum()):.9g})")
    return p


def entropy(dist: AnswerDistribution) -> float:
    """Shannon entropy in nats. Logs are taken on probabilities floored at 1e-12."""
    p = _checked_probs(dist)
    return float(-np.sum(p * np.log(np.maximum(p, PROB_FLOOR))))


def confidence(dist: AnswerDistribution) -> float:
    return float(_checked_probs(dist).max())


def is_overconfident_failure(record: PredictionRecord, tau1: float, tau2: float) -> bool:
    """Wrong answer given with confidence above tau1 and entropy below tau2 (both strict)."""
    if record.gold_id is None:
        raise RecordError(f"record {record.record_id!r}: gold required")
    if record.predicted_id == record.gold_id:
        return False
    return confidence(record.distribution) > tau1 and entropy(record.distribution) < tau2

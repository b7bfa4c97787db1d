"""Honesty metrics: H-score, ECI, accuracy, macro-F1 and attention IoU."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .records import PredictionRecord, require_gold
from .uncertainty import confidence

LOW_AGREEMENT_THRESHOLD = 0.40


class MetricError(ValueError):
    pass


def _confidences(records: Sequence[PredictionRecord]) -> np.ndarray:
    return np.array([confidence(r.distribution) for r in records])


def _correctness(records: Sequence[PredictionRecord]) -> np.ndarray:
    return np.array([r.predicted_id == r.gold_id for r in records], dtype=bool)


def _checked(records, what: str):
    if len(records) == 0:
        raise MetricError(f"{what}: empty input")
    require_gold(records, what)


def honesty_gap(confidences, correct) -> tuple[float, float]:
    """(h_lemma, h_reported) from raw confidence and correctness arrays.

    h_reported is the mean |C - A|; h_lemma = 1 - h_reported.
    """
    c = np.asarray(confidences, dtype=np.float64)
    a = np.asarray(correct, dtype=np.float64)
    if c.size == 0:
        raise MetricError("honesty score: empty input")
    if c.shape != a.shape:
        raise MetricError("confidences and correctness differ in length")
    if np.any(c < 0) or np.any(c > 1):
        raise MetricError("confidences must lie in [0, 1]")
    reported = float(np.mean(np.abs(c - a)))
    return 1.0 - reported, reported


def honesty_scores(records: Sequence[PredictionRecord], confidences=None) -> tuple[float, float]:
    _checked(records, "honesty score")
    c = _confidences(records) if confidences is None else confidences
    return honesty_gap(c, _correctness(records))


def auc_rank(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the Mann-Whitney rank sum."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ECI undefined: need at least one correct and one incorrect record")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # average ranks (1-based) over runs of tied scores
    start = 0
    while start < len(s):
        stop = start + 1
        while stop < len(s) and sorted_s[stop] == sorted_s[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
        start = stop
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def eci_scores(records: Sequence[PredictionRecord], confidences=None) -> tuple[float, float]:
    """(eci_auc, eci_reported) with eci_reported = 1 - eci_auc."""
    _checked(records, "ECI")
    c = _confidences(records) if confidences is None else np.asarray(confidences)
    auc = auc_rank(c, _correctness(records))
    return auc, 1.0 - auc


def accuracy(records: Sequence[PredictionRecord]) -> float:
    _checked(records, "accuracy")
    return float(np.mean(_correctness(records)))


def macro_f1(records: Sequence[PredictionRecord]) -> float:
    """Unweighted mean of per-class F1 over every id seen as gold or prediction."""
    _checked(records, "macro-F1")
    gold = np.array([r.gold_id for r in records])
    pred = np.array([r.predicted_id for r in records])
    scores = []
    for cls in np.union1d(gold, pred):
        tp = np.sum((pred == cls) & (gold == cls))
        fp = np.sum((pred == cls) & (gold != cls))
        fn = np.sum((pred != cls) & (gold == cls))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def attention_iou(pred_mask, text_mask) -> float:
    a = np.asarray(pred_mask)
    b = np.asarray(text_mask)
    if a.shape != b.shape:
        raise MetricError(f"mask dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise MetricError("mask cells must be 0 or 1")
    a, b = a.astype(bool), b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def low_agreement_fraction(ious, threshold: float = LOW_AGREEMENT_THRESHOLD) -> float:
    x = np.asarray(ious, dtype=np.float64)
    if x.size == 0:
        raise MetricError("low agreement fraction: empty input")
    if np.any(x < 0) or np.any(x > 1):
        raise MetricError("IoU values must lie in [0, 1]")
    return float(np.mean(x < threshold))


@dataclass(frozen=True)
class HonestyReport:
    n_records: int
    accuracy: float
    macro_f1: float
    h_lemma: float
    h_reported: float
    eci_auc: Optional[float]
    eci_reported: Optional[float]
    mean_iou: Optional[float]
    low_agreement_frac: Optional[float]
    abstention_rate: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(self)]
        writer.writerow(names)
        writer.writerow(["" if getattr(self, n) is None else repr(getattr(self, n)) for n in names])
        return buf.getvalue()


def build_report(
    records: Sequence[PredictionRecord],
    confidences=None,
    abstained=None,
) -> HonestyReport:
    """Aggregate every metric over ``records``.

    ``confidences`` overrides the raw max-probabilities (e.g. after a learned
    temperature); ``abstained`` is a boolean per record from the abstention
    policy. ECI fields are ``None`` when only one correctness class is present.
    """
    _checked(records, "report")
    conf = _confidences(records) if confidences is None else np.asarray(confidences, dtype=np.float64)
    h_lemma, h_rep = honesty_gap(conf, _correctness(records))
    try:
        eci_auc = auc_rank(conf, _correctness(records))
        eci_rep: Optional[float] = 1.0 - eci_auc
    except MetricError:
        eci_auc = eci_rep = None
    ious = [
        attention_iou(r.attention_mask, r.text_mask)
        for r in records
        if r.attention_mask is not None and r.text_mask is not None
    ]
    mean_iou = float(np.mean(ious)) if ious else None
    low = low_agreement_fraction(ious) if ious else None
    rate = 0.0 if abstained is None else float(np.mean(np.asarray(abstained, dtype=bool)))
    return HonestyReport(
        n_records=len(records),
        accuracy=accuracy(records),
        macro_f1=macro_f1(records),
        h_lemma=h_lemma,
        h_reported=h_rep,
        eci_auc=eci_auc,
        eci_reported=eci_rep,
        mean_iou=mean_iou,
        low_agreement_frac=low,
        abstention_rate=rate,
    )


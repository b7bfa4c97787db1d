"""Positive/negative selection and triplet assembly for the contrastive term."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import Hyperparams
from .records import PredictionRecord, RecordError
from .transport import wmd
from .uncertainty import is_overconfident_failure

THREADS_ENV = "HONESTCALIB_THREADS"


@dataclass(frozen=True)
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_record_id: str
    positive_record_id: str
    negative_record_id: str

    def to_json(self) -> dict:
        return {
            "anchor_id": self.anchor_record_id,
            "positive_id": self.positive_record_id,
            "negative_id": self.negative_record_id,
            "anchor": self.anchor.tolist(),
            "positive": self.positive.tolist(),
            "negative": self.negative.tolist(),
        }


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def record_wmd(record: PredictionRecord) -> float:
    return wmd(record.predicted_tokens, record.gold_tokens, record.token_embeddings)


def eligible_positive(record: PredictionRecord, delta: float, strict_alignment: bool = True) -> bool:
    """WMD(pred, gold) < delta, conjoined with exact id agreement unless relaxed."""
    if record.gold_id is None:
        raise RecordError(f"record {record.record_id!r}: gold required")
    if strict_alignment and record.predicted_id != record.gold_id:
        return False
    return record_wmd(record) < delta


def eligible_negative(record: PredictionRecord, tau1: float, tau2: float) -> bool:
    return is_overconfident_failure(record, tau1, tau2)


@dataclass(frozen=True)
class Eligibility:
    positive: bool
    negative: bool


def compute_eligibility(records: Sequence[PredictionRecord], params: Hyperparams) -> dict[str, Eligibility]:
    """Per-record pool membership. Depends only on the frozen logs, so it can be cached."""

    def one(rec: PredictionRecord) -> Eligibility:
        return Eligibility(
            eligible_positive(rec, params.delta, params.strict_alignment),
            eligible_negative(rec, params.tau1, params.tau2),
        )

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flags = list(pool.map(one, records))
    else:
        flags = [one(rec) for rec in records]
    return {rec.record_id: flag for rec, flag in zip(records, flags)}


def _positive_vector(rec: PredictionRecord, params: Hyperparams) -> np.ndarray:
    if params.use_gold_positive and rec.gold_embedding is not None:
        return rec.gold_embedding
    return rec.answer_embedding


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def mine_triplets(
    batch: Sequence[PredictionRecord],
    params: Hyperparams,
    seed: int,
    eligibility: Optional[dict[str, Eligibility]] = None,
    head=None,
) -> list[Triplet]:
    """One triplet per anchor record whose positive and negative pools are non-empty.

    Positive: the anchor's own answer when it is eligible, otherwise a seeded
    uniform draw from the batch pool. Negative: seeded uniform draw, or the
    most cosine-similar to the anchor when ``params.hard_negatives`` is set
    (in projected space if ``head`` is given). The positive and negative of a
    triplet never come from the same record.
    """
    if eligibility is None:
        eligibility = compute_eligibility(batch, params)
    rng = np.random.default_rng(seed)
    pos_pool = [r for r in batch if eligibility[r.record_id].positive]
    neg_pool = [r for r in batch if eligibility[r.record_id].negative]
    if not pos_pool or not neg_pool:
        return []

    def embed(v):
        return v if head is None else head.project(v)

    triplets = []
    for rec in batch:
        if not np.linalg.norm(rec.anchor_embedding) > 0:
            continue
        if eligibility[rec.record_id].positive:
            pos = rec
        else:
            pos = pos_pool[int(rng.integers(len(pos_pool)))]
        negs = [r for r in neg_pool if r.record_id != pos.record_id]
        negs = [r for r in negs if np.linalg.norm(r.answer_embedding) > 0]
        pos_vec = _positive_vector(pos, params)
        if not negs or not np.linalg.norm(pos_vec) > 0:
            continue
        if params.hard_negatives:
            a = embed(rec.anchor_embedding)
            sims = [_cos(a, embed(r.answer_embedding)) for r in negs]
            neg = negs[int(np.argmax(sims))]
        else:
            neg = negs[int(rng.integers(len(negs)))]
        triplets.append(
            Triplet(
                anchor=rec.anchor_embedding,
                positive=pos_vec,
                negative=neg.answer_embedding,
                anchor_record_id=rec.record_id,
                positive_record_id=pos.record_id,
                negative_record_id=neg.record_id,
            )
        )
    return triplets


def dump_triplets(triplets: Sequence[Triplet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_json()) + "\n")

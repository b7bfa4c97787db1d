"""Prediction-log data model, JSONL ingestion and validation."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PROB_FLOOR = 1e-12
SUM_TOLERANCE = 1e-6
EXACT_SUM_SLACK = 1e-14
RENORMALIZE_BAND = (0.5, 1.5)
MAX_EMBEDDING_DIM = 4096

EMB_MAGIC = b"HVQE"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIII")


class RecordError(ValueError):
    """Raised for malformed or inconsistent prediction records."""


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class AnswerDistribution:
    """Sparse answer distribution over a vocabulary of ``vocab_size`` answers."""

    answer_ids: np.ndarray
    probs: np.ndarray
    vocab_size: int

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]], vocab_size: int) -> "AnswerDistribution":
        pairs = list(pairs)
        ids = [int(p[0]) for p in pairs]
        probs = [float(p[1]) for p in pairs]
        return cls(_frozen(ids, np.int64), _frozen(probs), int(vocab_size))

    def __len__(self) -> int:
        return len(self.answer_ids)

    def prob_of(self, answer_id: int) -> float:
        hit = np.flatnonzero(self.answer_ids == answer_id)
        return float(self.probs[hit[0]]) if len(hit) else 0.0

    def argmax(self) -> int:
        # lowest answer_id among the maximal entries
        best = np.flatnonzero(self.probs == self.probs.max())
        return int(self.answer_ids[best].min())

    def pairs(self) -> list[list]:
        return [[int(i), float(p)] for i, p in zip(self.answer_ids, self.probs)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, AnswerDistribution):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and np.array_equal(self.answer_ids, other.answer_ids)
            and np.array_equal(self.probs, other.probs)
        )


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    record_id: str
    distribution: AnswerDistribution
    predicted_id: int
    gold_id: Optional[int]
    predicted_tokens: tuple[str, ...]
    gold_tokens: tuple[str, ...]
    token_embeddings: dict[str, np.ndarray]
    anchor_embedding: np.ndarray
    answer_embedding: np.ndarray
    attention_mask: Optional[np.ndarray] = None
    text_mask: Optional[np.ndarray] = None
    gold_embedding: Optional[np.ndarray] = None

    @property
    def has_gold(self) -> bool:
        return self.gold_id is not None

    @property
    def correct(self) -> bool:
        if self.gold_id is None:
            raise RecordError(f"record {self.record_id!r}: gold required")
        return self.predicted_id == self.gold_id

    def __eq__(self, other) -> bool:
        if not isinstance(other, PredictionRecord):
            return NotImplemented
        return record_to_json(self) == record_to_json(other)


def make_record(
    record_id: str,
    pairs: Iterable[Sequence[float]],
    vocab_size: int,
    anchor_embedding,
    answer_embedding,
    gold_id: Optional[int] = None,
    predicted_tokens: Sequence[str] = (),
    gold_tokens: Sequence[str] = (),
    token_embeddings: Optional[dict] = None,
    attention_mask=None,
    text_mask=None,
    gold_embedding=None,
) -> PredictionRecord:
    """Build a record, normalizing the distribution and deriving the argmax."""
    dist = normalize_distribution(AnswerDistribution.from_pairs(pairs, vocab_size))
    tok = {str(t): _frozen(v) for t, v in (token_embeddings or {}).items()}
    return PredictionRecord(
        record_id=str(record_id),
        distribution=dist,
        predicted_id=dist.argmax(),
        gold_id=None if gold_id is None else int(gold_id),
        predicted_tokens=tuple(predicted_tokens),
        gold_tokens=tuple(gold_tokens),
        token_embeddings=tok,
        anchor_embedding=_frozen(anchor_embedding),
        answer_embedding=_frozen(answer_embedding),
        attention_mask=None if attention_mask is None else _frozen(attention_mask, np.int8),
        text_mask=None if text_mask is None else _frozen(text_mask, np.int8),
        gold_embedding=None if gold_embedding is None else _frozen(gold_embedding),
    )


def normalize_distribution(dist: AnswerDistribution) -> AnswerDistribution:
    """Divide probabilities by their sum.

    Zero entries are kept as zero; the 1e-12 floor is applied only where a
    logarithm is taken.
    """
    total = float(dist.probs.sum())
    if not total > 0 or not math.isfinite(total):
        raise RecordError("degenerate distribution")
    if abs(total - 1.0) <= EXACT_SUM_SLACK:
        # Already normalized up to rounding; dividing again would drift by an ulp.
        return dist
    return AnswerDistribution(dist.answer_ids, _frozen(dist.probs / total), dist.vocab_size)


def validate_record(record: PredictionRecord) -> Optional[str]:
    """Return ``None`` if every invariant holds, else the first violation."""
    dist = record.distribution
    if len(dist) == 0:
        return "entries non-empty"
    if dist.vocab_size <= 0:
        return "vocab_size > 0"
    if not np.all(np.isfinite(dist.probs)):
        return "finite probs"
    if np.any(dist.probs < 0):
        return "prob ≥ 0"
    if len(np.unique(dist.answer_ids)) != len(dist.answer_ids):
        return "unique answer_ids"
    if np.any(dist.answer_ids < 0) or np.any(dist.answer_ids >= dist.vocab_size):
        return "answer_id < vocab_size"
    if abs(float(dist.probs.sum()) - 1.0) > SUM_TOLERANCE:
        return "probs sum to 1"
    if record.predicted_id != dist.argmax():
        return "predicted_id = argmax"
    if record.gold_id is not None and not 0 <= record.gold_id < dist.vocab_size:
        return "gold_id < vocab_size"
    a, b = record.anchor_embedding, record.answer_embedding
    if a.ndim != 1 or a.shape[0] == 0 or a.shape != b.shape:
        return "anchor and answer embeddings share dimension d_in > 0"
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return "finite embeddings"
    if record.gold_embedding is not None and record.gold_embedding.shape != a.shape:
        return "gold embedding matches d_in"
    dims = {v.shape for v in record.token_embeddings.values()}
    if len(dims) > 1:
        return "token embeddings share dimension d_tok"
    for name, mask in (("attention_mask", record.attention_mask), ("text_mask", record.text_mask)):
        if mask is not None and (mask.ndim != 2 or not np.isin(mask, (0, 1)).all()):
            return f"{name} cells in {{0,1}}"
    if (
        record.attention_mask is not None
        and record.text_mask is not None
        and record.attention_mask.shape != record.text_mask.shape
    ):
        return "masks have equal dimensions"
    return None


# -- JSONL ---------------------------------------------------------------


def read_embedding_file(path: Path) -> np.ndarray:
    """Read a sidecar ``HVQE`` embedding file into a (count, dim) float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise RecordError(f"{path}: truncated embedding header")
    magic, version, count, dim = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise RecordError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise RecordError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=_EMB_HEADER.size)
    if body.size != count * dim:
        raise RecordError(f"{path}: expected {count * dim} floats, found {body.size}")
    return body.reshape(count, dim).astype(np.float64)


def write_embedding_file(path: Path, rows: np.ndarray) -> None:
    rows = np.asarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("embedding rows must be a 2-D array")
    header = _EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, rows.shape[0], rows.shape[1])
    Path(path).write_bytes(header + rows.tobytes())


_REQUIRED = ("id", "vocab_size", "dist")


def record_from_json(obj: dict, base_dir: Optional[Path] = None, _cache: Optional[dict] = None) -> PredictionRecord:
    """Parse one decoded JSONL object. Errors carry no line info; callers add it."""
    for key in _REQUIRED:
        if key not in obj:
            raise RecordError(f"missing field {key!r}")
    if "emb_ref" in obj:
        ref = obj["emb_ref"]
        try:
            fname, index = ref["file"], int(ref["index"])
        except (TypeError, KeyError, ValueError) as exc:
            raise RecordError(f"malformed emb_ref: {exc}") from None
        fpath = Path(fname) if base_dir is None else base_dir / fname
        cache = {} if _cache is None else _cache
        if fpath not in cache:
            cache[fpath] = read_embedding_file(fpath)
        rows = cache[fpath]
        if not 0 <= index < rows.shape[0]:
            raise RecordError(f"emb_ref index {index} out of range")
        if rows.shape[1] % 2:
            raise RecordError("emb_ref rows must hold anchor and answer halves")
        half = rows.shape[1] // 2
        anchor, answer = rows[index, :half], rows[index, half:]
    else:
        for key in ("anchor_emb", "answer_emb"):
            if key not in obj:
                raise RecordError(f"missing field {key!r}")
        anchor, answer = obj["anchor_emb"], obj["answer_emb"]
    if len(anchor) > MAX_EMBEDDING_DIM:
        raise RecordError(f"embedding dimension {len(anchor)} exceeds {MAX_EMBEDDING_DIM}")
    if len(anchor) != len(answer):
        raise RecordError(f"dimension mismatch: anchor {len(anchor)} vs answer {len(answer)}")

    try:
        pairs = [(int(i), float(p)) for i, p in obj["dist"]]
    except (TypeError, ValueError):
        raise RecordError("dist must be a list of [answer_id, prob] pairs") from None
    if not pairs:
        raise RecordError("entries non-empty")
    total = sum(p for _, p in pairs)
    if not RENORMALIZE_BAND[0] <= total <= RENORMALIZE_BAND[1]:
        raise RecordError(f"distribution sums to {total:.6g}, outside {RENORMALIZE_BAND}")

    tok_emb = obj.get("tok_emb") or {}
    dims = {len(v) for v in tok_emb.values()}
    if len(dims) > 1:
        raise RecordError(f"dimension mismatch in tok_emb: {sorted(dims)}")

    rec = make_record(
        record_id=obj["id"],
        pairs=pairs,
        vocab_size=int(obj["vocab_size"]),
        anchor_embedding=anchor,
        answer_embedding=answer,
        gold_id=obj.get("gold_id"),
        predicted_tokens=obj.get("pred_tokens") or (),
        gold_tokens=obj.get("gold_tokens") or (),
        token_embeddings=tok_emb,
        attention_mask=obj.get("attn_mask"),
        text_mask=obj.get("text_mask"),
        gold_embedding=obj.get("gold_emb"),
    )
    if obj.get("pred_id") is not None and int(obj["pred_id"]) != rec.predicted_id:
        raise RecordError(f"pred_id {obj['pred_id']} is not the argmax ({rec.predicted_id})")
    return rec


def load_records(path) -> list[PredictionRecord]:
    """Load and validate a JSONL prediction log, preserving line order."""
    path = Path(path)
    records = []
    cache: dict = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: parse error: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise RecordError(f"{path}:{lineno}: parse error: expected a JSON object")
            try:
                rec = record_from_json(obj, base_dir=path.parent, _cache=cache)
            except RecordError as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from None
            problem = validate_record(rec)
            if problem is not None:
                raise RecordError(f"{path}:{lineno}: invariant violated: {problem}")
            records.append(rec)
    return records


def _mask_json(mask):
    return None if mask is None else mask.astype(int).tolist()


def record_to_json(rec: PredictionRecord) -> dict:
    obj = {
        "id": rec.record_id,
        "vocab_size": rec.distribution.vocab_size,
        "dist": rec.distribution.pairs(),
        "pred_id": rec.predicted_id,
        "gold_id": rec.gold_id,
        "pred_tokens": list(rec.predicted_tokens),
        "gold_tokens": list(rec.gold_tokens),
        "tok_emb": {t: v.tolist() for t, v in rec.token_embeddings.items()},
        "anchor_emb": rec.anchor_embedding.tolist(),
        "answer_emb": rec.answer_embedding.tolist(),
        "attn_mask": _mask_json(rec.attention_mask),
        "text_mask": _mask_json(rec.text_mask),
    }
    if rec.gold_embedding is not None:
        obj["gold_emb"] = rec.gold_embedding.tolist()
    return obj


def dump_records(records: Iterable[PredictionRecord], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), ensure_ascii=False) + "\n")


def require_gold(records: Sequence[PredictionRecord], what: str) -> None:
    for rec in records:
        if rec.gold_id is None:
            raise RecordError(f"{what}: record {rec.record_id!r} has no gold_id (gold required)")

"""Seeded synthetic prediction logs with a tunable confidence/correctness coupling.

Generative model, per record:

* correctness A ~ Bernoulli(accuracy); the gold id is uniform over the
  vocabulary and a wrong prediction is uniform over the other ids;
* raw = rho * A + (1 - rho) * U(0, 1); for an ``overconfident_frac`` share of
  records raw is pushed up to raw ** overconfident_power (monotone, so the
  ordering of confidences is kept);
* C = c_lo + (1 - c_lo) * raw with c_lo = 1.5 / k, so the prediction is
  always the strict argmax;
* residual mass 1 - C: spread uniformly for correct predictions; for wrong
  ones the gold answer is the runner-up holding ``runner_up_share`` of it;
* anchor ~ mu + 0.5 N(0, I); answer = anchor + offset * (v_ok if correct
  else v_bad) + noise_sigma N(0, I);
* each answer id owns 1-3 tokens with Gaussian embeddings; a correct
  prediction repeats the gold tokens, sometimes with one near-synonym token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import PredictionRecord, make_record


@dataclass(frozen=True)
class SynthConfig:
    n_records: int = 500
    vocab_size: int = 20
    calib_rho: float = 0.5
    d_in: int = 16
    d_tok: int = 8
    noise_sigma: float = 0.1
    seed: int = 0
    accuracy: float = 0.7
    runner_up_share: float = 0.97
    overconfident_frac: float = 0.2
    overconfident_power: float = 0.15
    offset: float = 1.5
    synonym_rate: float = 0.25
    with_masks: bool = True
    mask_size: int = 8

    def __post_init__(self):
        if self.n_records < 0:
            raise ValueError("n_records must be non-negative")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        for name in ("calib_rho", "accuracy", "runner_up_share", "overconfident_frac", "synonym_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.d_in < 1 or self.d_tok < 1:
            raise ValueError("embedding dimensions must be positive")
        if self.noise_sigma < 0 or self.offset < 0:
            raise ValueError("noise_sigma and offset must be non-negative")
        if not 0.0 < self.overconfident_power <= 1.0:
            raise ValueError("overconfident_power must lie in (0, 1]")
        if self.mask_size < 4:
            raise ValueError("mask_size must be at least 4")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _probs(k: int, pred: int, gold: int, conf: float, correct: bool, share: float) -> np.ndarray:
    p = np.empty(k)
    rest = 1.0 - conf
    if correct or k == 2:
        p[:] = rest / (k - 1)
    else:
        g = min(share * rest, 0.98 * conf)
        p[:] = (rest - g) / (k - 2)
        p[gold] = g
    p[pred] = conf
    return p


def _rect(rng: np.random.Generator, size: int, r0=None, c0=None) -> np.ndarray:
    h, w = (int(x) for x in rng.integers(2, 4, size=2))
    if r0 is None:
        r0, c0 = (int(x) for x in rng.integers(0, size - 3, size=2))
    mask = np.zeros((size, size), dtype=np.int8)
    mask[r0 : r0 + h, c0 : c0 + w] = 1
    return mask


def generate(config: SynthConfig) -> list[PredictionRecord]:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    k = cfg.vocab_size

    mu = rng.normal(size=cfg.d_in)
    v_ok = _unit(rng.normal(size=cfg.d_in))
    v_bad = _unit(rng.normal(size=cfg.d_in))
    answer_tokens = []
    token_table: dict[str, np.ndarray] = {}
    for a in range(k):
        toks = [f"ans{a}_w{j}" for j in range(int(rng.integers(1, 4)))]
        for t in toks:
            token_table[t] = rng.normal(size=cfg.d_tok)
        answer_tokens.append(toks)

    c_lo = 1.5 / k
    records = []
    for i in range(cfg.n_records):
        correct = bool(rng.random() < cfg.accuracy)
        gold = int(rng.integers(k))
        pred = gold if correct else (gold + 1 + int(rng.integers(k - 1))) % k
        raw = cfg.calib_rho * correct + (1.0 - cfg.calib_rho) * rng.random()
        if rng.random() < cfg.overconfident_frac:
            raw = raw**cfg.overconfident_power
        conf = c_lo + (1.0 - c_lo) * raw
        probs = _probs(k, pred, gold, conf, correct, cfg.runner_up_share)

        anchor = mu + 0.5 * rng.normal(size=cfg.d_in)
        direction = v_ok if correct else v_bad
        answer = anchor + cfg.offset * direction + cfg.noise_sigma * rng.normal(size=cfg.d_in)
        gold_emb = anchor + cfg.offset * v_ok

        gold_toks = list(answer_tokens[gold])
        pred_toks = list(answer_tokens[pred])
        tok_emb = {t: token_table[t] for t in gold_toks + pred_toks}
        if correct and rng.random() < cfg.synonym_rate:
            j = int(rng.integers(len(pred_toks)))
            variant = f"{pred_toks[j]}~{i}"
            tok_emb[variant] = token_table[pred_toks[j]] + cfg.noise_sigma * rng.normal(size=cfg.d_tok) / np.sqrt(cfg.d_tok)
            pred_toks[j] = variant

        attn = text = None
        if cfg.with_masks:
            text = _rect(rng, cfg.mask_size)
            if correct:
                r0, c0 = (int(x) for x in np.argwhere(text)[0])
                dr, dc = (int(x) for x in rng.integers(0, 2, size=2))
                attn = _rect(rng, cfg.mask_size, r0 + dr, c0 + dc)
            else:
                attn = _rect(rng, cfg.mask_size)

        records.append(
            make_record(
                record_id=f"synth-{cfg.seed}-{i:05d}",
                pairs=list(zip(range(k), probs)),
                vocab_size=k,
                anchor_embedding=anchor,
                answer_embedding=answer,
                gold_id=gold,
                predicted_tokens=pred_toks,
                gold_tokens=gold_toks,
                token_embeddings=tok_emb,
                attention_mask=attn,
                text_mask=text,
                gold_embedding=gold_emb,
            )
        )
    return records

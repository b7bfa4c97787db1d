import numpy as np
import pytest

from honestcalib.records import make_record
from honestcalib.synth import SynthConfig, generate


def rec(
    probs,
    gold=None,
    ids=None,
    rid="r",
    anchor=(1.0, 0.0),
    answer=(0.0, 1.0),
    pred_tokens=("x",),
    gold_tokens=("x",),
    tok_emb=None,
    **kw,
):
    """Small hand-built record; answer ids default to 0..k-1."""
    ids = list(range(len(probs))) if ids is None else ids
    if tok_emb is None:
        tok_emb = {t: [float(i), 0.0] for i, t in enumerate(sorted(set(pred_tokens) | set(gold_tokens)))}
    return make_record(
        rid,
        list(zip(ids, probs)),
        max(ids) + 1 if "vocab_size" not in kw else kw.pop("vocab_size"),
        anchor,
        answer,
        gold_id=gold,
        predicted_tokens=pred_tokens,
        gold_tokens=gold_tokens,
        token_embeddings=tok_emb,
        **kw,
    )


@pytest.fixture
def make_rec():
    return rec


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(n_records=120, calib_rho=0.3, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

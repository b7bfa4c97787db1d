"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear even without -s).
"""

import math
import shutil
import time
from contextlib import contextmanager

import numpy as np
import pytest

from honestcalib.cli import main as cli_main
from honestcalib.config import Hyperparams, load_config
from honestcalib.gradcheck import gradient_check
from honestcalib.metrics import attention_iou, auc_rank, honesty_gap, honesty_scores, low_agreement_fraction
from honestcalib.mining import compute_eligibility, mine_triplets, record_wmd
from honestcalib.records import AnswerDistribution, make_record
from honestcalib.synth import SynthConfig, generate
from honestcalib.training import TemperatureScaler, batch_seed, init_state, train, triplet_margins
from honestcalib.transport import min_cost_flow_emd, transportation_simplex, wmd
from honestcalib.uncertainty import confidence, entropy, is_overconfident_failure

pytestmark = pytest.mark.acceptance

ENTROPY_721 = 0.80181855254333730856


@contextmanager
def criterion(number, title, capsys, limit=None):
    """Run the body, enforce the runtime limit, print one verdict line."""
    detail = {}
    start = time.perf_counter()
    ok = False
    try:
        yield detail
        elapsed = time.perf_counter() - start
        detail["runtime"] = f"{elapsed:.2f}s"
        if limit is not None:
            assert elapsed < limit, f"runtime {elapsed:.2f}s exceeds {limit}s"
        ok = True
    finally:
        extras = ", ".join(f"{k}={v}" for k, v in detail.items())
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {title} ({extras})")


def _dist(probs):
    return AnswerDistribution.from_pairs(enumerate(probs), len(probs))


def test_c01_formula_fidelity(capsys):
    with criterion(1, "entropy/confidence formulas", capsys, limit=1.0) as d:
        for k in (2, 3, 4, 10, 100, 1000):
            assert abs(entropy(_dist([1.0 / k] * k)) - math.log(k)) <= 1e-12
            assert abs(confidence(_dist([1.0 / k] * k)) - 1.0 / k) <= 1e-15
        assert entropy(_dist([1.0])) == 0.0 and entropy(_dist([0.0, 1.0])) == 0.0
        value = entropy(_dist([0.7, 0.2, 0.1]))
        assert abs(value - ENTROPY_721) <= 1e-6
        assert confidence(_dist([0.7, 0.2, 0.1])) == 0.7
        assert confidence(_dist([0.45, 0.45, 0.10])) == 0.45
        d["H[.7,.2,.1]"] = f"{value:.6f}"


def test_c02_honesty_bound(capsys):
    with criterion(2, "honesty score bound and complement", capsys, limit=5.0) as d:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            recs = []
            for i in range(n):
                k = int(rng.integers(2, 6))
                probs = rng.dirichlet(np.ones(k))
                recs.append(make_record(i, list(enumerate(probs)), k, [1.0], [1.0], gold_id=int(rng.integers(k))))
            h_lemma, h_rep = honesty_scores(recs)
            assert 0.0 <= h_lemma <= 1.0
            worst = max(worst, abs(h_lemma + h_rep - 1.0))
        assert worst <= 1e-12
        # C = A exactly: one-hot correct records, and raw zero-confidence misses
        exact = [make_record(i, [(i % 4, 1.0)], 4, [1.0], [1.0], gold_id=i % 4) for i in range(20)]
        assert honesty_scores(exact)[0] == 1.0
        for _ in range(100):
            a = rng.random(int(rng.integers(1, 50))) < 0.5
            assert honesty_gap(a.astype(float), a)[0] == 1.0
        d["max|h_lemma+h_reported-1|"] = f"{worst:.1e}"


def _pairwise(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    return (np.sum(pos[:, None] > neg[None, :]) + 0.5 * np.sum(pos[:, None] == neg[None, :])) / (len(pos) * len(neg))


def test_c03_eci_is_auc(capsys):
    with criterion(3, "rank ECI equals pairwise oracle", capsys, limit=5.0) as d:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(20):
            scores = np.round(rng.random(1000), int(rng.integers(1, 6)))
            labels = rng.random(1000) < rng.uniform(0.2, 0.8)
            worst = max(worst, abs(auc_rank(scores, labels) - _pairwise(scores, labels)))
        assert worst <= 1e-12
        correct = rng.uniform(0.6, 1.0, 500)
        wrong = rng.uniform(0.0, 0.59, 500)
        sep = auc_rank(np.concatenate([correct, wrong]), np.arange(1000) < 500)
        assert sep == 1.0
        d["max_err"] = f"{worst:.1e}"
        d["separated_auc"] = sep


def test_c04_transport(capsys):
    with criterion(4, "transport simplex vs min-cost flow and metric laws", capsys, limit=30.0) as d:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(200):
            m, n = (int(x) for x in rng.integers(1, 9, size=2))
            supply, demand = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(n))
            cost = rng.random((m, n)) * 5
            simplex = float(np.sum(transportation_simplex(supply, demand, cost) * cost))
            worst = max(worst, abs(simplex - min_cost_flow_emd(supply, demand, cost)[1]))
        assert worst <= 1e-9
        vocab = [f"w{i}" for i in range(8)]
        for _ in range(100):
            emb = {t: rng.normal(size=3) for t in vocab}
            bags = [[vocab[int(i)] for i in rng.integers(8, size=int(rng.integers(1, 6)))] for _ in range(3)]
            x, y, z = bags
            assert abs(wmd(x, y, emb) - wmd(y, x, emb)) <= 1e-7
            assert wmd(x, x, emb) <= 1e-7
            assert wmd(x, z, emb) <= wmd(x, y, emb) + wmd(y, z, emb) + 1e-7
        d["max_cost_gap"] = f"{worst:.1e}"


def test_c05_gradient_check(capsys):
    with criterion(5, "analytic gradients vs central differences", capsys, limit=10.0) as d:
        result = gradient_check(seed=0, n_configs=50)
        d["max_rel_err"] = f"{result.max_rel_err:.2e}"
        d["checked"] = result.n_checked
        assert result.passed


def test_c06_end_to_end(capsys):
    with criterion(6, "end-to-end training on synth(rho=0.3, n=500, seed=11)", capsys, limit=60.0) as d:
        records = generate(SynthConfig(n_records=500, calib_rho=0.3, seed=11))
        held_out = generate(SynthConfig(n_records=500, calib_rho=0.3, seed=12))
        params = Hyperparams()
        elig = compute_eligibility(records, params)
        initial = init_state(records[0].anchor_embedding.shape[0], params)
        init_head = initial.head.copy()
        state = train(records, params, eligibility=elig, state=initial)

        first, last = state.loss_history[0], state.loss_history[-1]
        drop = (first - last) / first
        d["loss_drop"] = f"{drop:.1%}"
        triplets = []
        for bi, start in enumerate(range(0, len(records), params.batch_size)):
            triplets += mine_triplets(records[start : start + params.batch_size], params, batch_seed(params.seed, 0, bi), elig)
        m0 = float(np.mean(triplet_margins(triplets, init_head)))
        m1 = float(np.mean(triplet_margins(triplets, state.head)))
        d["margin"] = f"{m0:.3f}->{m1:.3f}"
        h_base = honesty_scores(held_out)[1]
        h_cal = honesty_scores(held_out, state.scaler.confidences(held_out))[1]
        h_drop = (h_base - h_cal) / h_base
        d["heldout_H"] = f"{h_base:.4f}->{h_cal:.4f} ({h_drop:.1%})"
        assert drop >= 0.10
        assert m1 > m0
        assert h_drop >= 0.20


def test_c07_defaults(capsys, tmp_path):
    with criterion(7, "empty config yields the default hyperparameters", capsys):
        path = tmp_path / "empty.toml"
        path.write_text("")
        h = load_config(str(path)).hyper
        got = (h.alpha, h.beta, h.margin_m, h.lambda1, h.lambda2, h.delta, h.tau1, h.tau2)
        assert got == (1.0, 0.5, 0.3, 1.0, 0.7, 0.4, 0.8, 0.5)


def test_c08_mining_soundness(capsys):
    with criterion(8, "mined triplets re-validate", capsys, limit=1.0) as d:
        params = Hyperparams()
        wrong = make_record("w", [(0, 0.9), (1, 0.06), (2, 0.04)], 3, [1.0], [1.0], gold_id=1)
        assert abs(entropy(wrong.distribution) - 0.3) < 0.1 and entropy(wrong.distribution) < 0.5
        assert is_overconfident_failure(wrong, params.tau1, params.tau2)
        records = generate(SynthConfig(n_records=128, calib_rho=0.3, seed=8, with_masks=False))
        by_id = {r.record_id: r for r in records}
        count = 0
        for bi, start in enumerate(range(0, 128, 32)):
            for t in mine_triplets(records[start : start + 32], params, seed=bi):
                p, n = by_id[t.positive_record_id], by_id[t.negative_record_id]
                assert p.predicted_id == p.gold_id and record_wmd(p) < params.delta
                assert is_overconfident_failure(n, params.tau1, params.tau2)
                assert p.record_id != n.record_id
                count += 1
        assert count > 0
        d["triplets"] = count


def test_c09_iou(capsys):
    with criterion(9, "attention IoU and low-agreement threshold", capsys):
        m = np.array([[1, 1], [0, 0]])
        assert attention_iou(m, m) == 1.0
        assert attention_iou(m, 1 - m) == 0.0
        assert attention_iou([[1, 1, 0]], [[0, 1, 1]]) == 1 / 3
        assert low_agreement_fraction([0.1, 0.5, 0.39, 0.41], 0.40) == 0.5
        assert low_agreement_fraction([0.40, 0.40]) == 0.0
        assert low_agreement_fraction([np.nextafter(0.40, 0)]) == 1.0


def test_c10_determinism(capsys, tmp_path):
    with criterion(10, "byte-identical outputs across repeated runs", capsys) as d:
        # same paths both times: the checkpoint echoes its run config
        base = tmp_path / "run"
        outputs = []
        for _ in range(2):
            if base.exists():
                shutil.rmtree(base)
            base.mkdir()
            data = base / "data.jsonl"
            steps = [
                ["synth", "--out", data, "--n-records", 150, "--calib-rho", 0.3, "--seed", 5],
                ["mine", "--input", data, "--out", base / "triplets.jsonl", "--seed", 2],
                ["train", "--input", data, "--out", base / "ck.json", "--epochs", 15, "--seed", 2],
                ["metrics", "--input", data, "--checkpoint", base / "ck.json", "--out", base / "report.json"],
            ]
            for argv in steps:
                assert cli_main([str(a) for a in argv]) == 0
            names = ("data.jsonl", "triplets.jsonl", "ck.json", "ck_loss.csv", "report.json")
            outputs.append({n: (base / n).read_bytes() for n in names})
        assert outputs[0] == outputs[1]
        d["files"] = len(outputs[0])

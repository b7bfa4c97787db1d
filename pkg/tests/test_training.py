import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from honestcalib.config import Hyperparams
from honestcalib.mining import Triplet, compute_eligibility
from honestcalib.records import AnswerDistribution, RecordError, record_to_json
from honestcalib.synth import SynthConfig, generate
from honestcalib.training import (
    ProjectionHead,
    TemperatureScaler,
    TrainingError,
    TrainState,
    alignment_loss,
    contrastive_loss,
    cosine_sim,
    gradients,
    init_state,
    load_checkpoint,
    project,
    save_checkpoint,
    total_loss,
    train,
)

# mpmath, 40 digits
ALIGN_CORRECT = 0.178337471969366189
ALIGN_WRONG = 2.397866136776995497


def unit_at(cos_to_x):
    return np.array([cos_to_x, math.sqrt(1 - cos_to_x**2)])


def identity_state(d=2):
    return TrainState(ProjectionHead(np.eye(d), np.zeros(d)), TemperatureScaler(0.0))


def triplet(sim_ap, sim_an):
    return Triplet(np.array([1.0, 0.0]), unit_at(sim_ap), unit_at(sim_an), "a", "p", "n")


class TestProjection:
    def test_identity(self):
        v = np.array([1.5, -2.0])
        assert np.array_equal(project(ProjectionHead(np.eye(2), np.zeros(2)), v), v)

    def test_zero_weights(self):
        assert project(ProjectionHead(np.zeros((2, 3)), np.array([4.0, 5.0])), [1, 2, 3]).tolist() == [4.0, 5.0]

    def test_hand_product(self):
        head = ProjectionHead(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).T, np.array([0.5, -0.5]))
        # W is 2x3: rows (1,3,5) and (2,4,6)
        assert project(head, [1.0, 0.0, -1.0]).tolist() == [-3.5, -4.5]

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            project(ProjectionHead(np.eye(2), np.zeros(2)), [1.0, 2.0, 3.0])

    def test_cosine(self):
        assert cosine_sim([1, 2], [1, 2]) == pytest.approx(1.0, abs=1e-15)
        assert cosine_sim([1, 0], [0, 3]) == 0.0
        assert cosine_sim([1, 0], [1, 1]) == pytest.approx(0.707107, abs=1e-6)
        with pytest.raises(ValueError, match="zero vector"):
            cosine_sim([0, 0], [1, 0])


class TestAlignment:
    def test_correct(self, make_rec):
        r = make_rec([0.7, 0.2, 0.1], gold=0)
        assert alignment_loss(r, 1.0, 0.5) == pytest.approx(ALIGN_CORRECT, abs=1e-12)

    def test_wrong(self, make_rec):
        r = make_rec([0.9, 0.05, 0.05], gold=1)
        assert alignment_loss(r, 1.0, 0.5) == pytest.approx(ALIGN_WRONG, abs=1e-12)

    def test_gold_outside_entries_is_floored(self, make_rec):
        r = make_rec([0.9, 0.1], gold=5, vocab_size=8)
        assert alignment_loss(r, 1.0, 0.5) == pytest.approx(0.9 + 0.5 * -math.log(1e-12), rel=1e-9)

    def test_gold_required(self, make_rec):
        with pytest.raises(RecordError):
            alignment_loss(make_rec([0.9, 0.1]), 1.0, 0.5)

    def test_high_temperature_bound(self):
        # |C_t - 1/k| vanishes like 1/t; at t = 100 the first-order bound is
        # C_t <= 1 / (k - S/t) with S = sum(ln p_max - ln p_j)
        p = np.array([0.6, 0.3, 0.1])
        dist = AnswerDistribution.from_pairs(enumerate(p), 3)
        scaler = TemperatureScaler(math.log(100.0))
        c = scaler.temper(dist).probs.max()
        s = float(np.sum(np.log(p.max()) - np.log(p)))
        assert 1 / 3 < c <= 1 / (3 - s / 100)
        near = AnswerDistribution.from_pairs(enumerate([0.3334, 0.3333, 0.3333]), 3)
        assert abs(scaler.temper(near).probs.max() - 1 / 3) <= 1e-6

    def test_confidence_decreases_with_temperature(self):
        dist = AnswerDistribution.from_pairs(enumerate([0.6, 0.3, 0.1]), 3)
        cs = [TemperatureScaler(math.log(t)).temper(dist).probs.max() for t in (0.5, 1, 2, 10, 100)]
        assert all(a > b for a, b in zip(cs, cs[1:]))

    def test_clamped(self):
        assert TemperatureScaler(50.0).temperature == pytest.approx(100.0)
        assert TemperatureScaler(-50.0).temperature == pytest.approx(0.01)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(1, 1000), min_size=1, max_size=12), st.floats(math.log(0.01), math.log(100)))
    def test_argmax_preserved(self, weights, log_t):
        total = sum(weights)
        dist = AnswerDistribution.from_pairs(enumerate(w / total for w in weights), len(weights))
        assert TemperatureScaler(log_t).temper(dist).argmax() == dist.argmax()

    def test_unit_temperature_is_identity(self):
        dist = AnswerDistribution.from_pairs(enumerate([0.6, 0.3, 0.1]), 3)
        assert np.allclose(TemperatureScaler(0.0).temper(dist).probs, dist.probs, atol=1e-15)


class TestContrastive:
    head = ProjectionHead(np.eye(2), np.zeros(2))

    def test_inactive(self):
        assert contrastive_loss(triplet(0.9, 0.1), self.head, 0.3) == 0.0

    def test_active(self):
        assert contrastive_loss(triplet(0.2, 0.4), self.head, 0.3) == pytest.approx(0.5, abs=1e-12)

    def test_positive_equals_negative(self):
        t = Triplet(np.array([1.0, 2.0]), np.array([3.0, -1.0]), np.array([3.0, -1.0]), "a", "p", "n")
        assert contrastive_loss(t, self.head, 0.3) == 0.3

    def test_zero_projection(self):
        head = ProjectionHead(np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ValueError, match="zero projected vector"):
            contrastive_loss(triplet(0.2, 0.4), head, 0.3)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 2))
    def test_bounded_and_monotone(self, s1, s2, s_an, m):
        lo, hi = sorted((s1, s2))
        head = self.head
        l_lo = contrastive_loss(triplet(lo, s_an), head, m)
        l_hi = contrastive_loss(triplet(hi, s_an), head, m)
        assert 0.0 <= l_hi <= l_lo + 1e-12
        assert l_lo <= m + 2 + 1e-12


class TestTotalLoss:
    def test_combined(self, make_rec):
        # wrong record: 0.6 + beta * -ln 0.4 = 1.5; triplet hinge = 0.5
        beta = 0.9 / -math.log(0.4)
        r = make_rec([0.6, 0.4], gold=1)
        params = Hyperparams(beta=beta, projection_dim=2)
        state = identity_state()
        assert alignment_loss(r, 1.0, beta) == pytest.approx(1.5, abs=1e-12)
        assert total_loss([r], [triplet(0.2, 0.4)], params, state) == pytest.approx(1.85, abs=1e-12)

    def test_no_triplets(self, make_rec):
        recs = [make_rec([0.7, 0.2, 0.1], gold=0), make_rec([0.9, 0.05, 0.05], gold=1)]
        params = Hyperparams(lambda1=2.0, projection_dim=2)
        expected = 2.0 * (ALIGN_CORRECT + ALIGN_WRONG) / 2
        assert total_loss(recs, [], params, identity_state()) == pytest.approx(expected, abs=1e-12)

    def test_lambda2_zero_decouples(self, make_rec):
        r = make_rec([0.7, 0.2, 0.1], gold=0)
        params = Hyperparams(lambda2=0.0, projection_dim=2)
        assert total_loss([r], [triplet(0.2, 0.4)], params, identity_state()) == pytest.approx(ALIGN_CORRECT, abs=1e-12)

    def test_no_gold(self, make_rec):
        with pytest.raises(RecordError, match="no gold"):
            total_loss([make_rec([0.7, 0.3])], [], Hyperparams(projection_dim=2), identity_state())

    def test_non_negative(self, small_synth):
        state = init_state(16, Hyperparams())
        assert total_loss(small_synth, [], Hyperparams(), state) >= 0


class TestGradients:
    def test_inactive_hinge(self, make_rec):
        r = make_rec([0.7, 0.3], gold=0)
        dW, db, _ = gradients([r], [triplet(0.9, 0.1)], Hyperparams(projection_dim=2), identity_state())
        assert not dW.any() and not db.any()

    def test_lambda1_zero(self, make_rec):
        r = make_rec([0.7, 0.3], gold=1)
        _, _, dlt = gradients([r], [], Hyperparams(lambda1=0.0, projection_dim=2), identity_state())
        assert dlt == 0.0

    def test_calibration_off(self, make_rec):
        r = make_rec([0.7, 0.3], gold=1)
        params = Hyperparams(calibrate_temperature=False, projection_dim=2)
        assert gradients([r], [], params, identity_state())[2] == 0.0

    def test_finite_differences(self):
        from honestcalib.gradcheck import gradient_check

        result = gradient_check(seed=3, n_configs=20)
        assert result.passed, result.summary()


@pytest.fixture(scope="module")
def train_set():
    return generate(SynthConfig(n_records=80, calib_rho=0.3, seed=21))


class TestTrain:
    params = Hyperparams(epochs=5, projection_dim=8)

    def test_zero_learning_rate(self, train_set):
        params = self.params.replace(learning_rate=0.0)
        init = init_state(16, params)
        state = train(train_set, params)
        assert np.array_equal(state.head.weights, init.head.weights)
        assert np.array_equal(state.head.bias, init.head.bias)
        assert state.scaler.log_t == 0.0

    def test_deterministic(self, train_set):
        a = train(train_set, self.params)
        b = train(train_set, self.params)
        assert a.loss_history == b.loss_history
        assert np.array_equal(a.head.weights, b.head.weights)
        assert len(a.loss_history) == 5 and a.step == 5 * 3

    def test_seed_changes_run(self, train_set):
        a = train(train_set, self.params)
        b = train(train_set, self.params.replace(seed=1))
        assert a.loss_history != b.loss_history

    def test_frozen_inputs(self, train_set):
        before = [record_to_json(r) for r in train_set]
        train(train_set, self.params)
        assert [record_to_json(r) for r in train_set] == before

    def test_loss_decreases(self, train_set):
        state = train(train_set, Hyperparams(epochs=60, projection_dim=8))
        assert state.loss_history[-1] < state.loss_history[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_guard(self, train_set):
        with pytest.raises(TrainingError, match="non-finite"):
            train(train_set, self.params.replace(learning_rate=1e308, init_scale=1e300))

    def test_precomputed_eligibility(self, train_set):
        elig = compute_eligibility(train_set, self.params)
        assert train(train_set, self.params, eligibility=elig).loss_history == train(train_set, self.params).loss_history


def test_checkpoint_round_trip(tmp_path, train_set):
    params = Hyperparams(epochs=2, projection_dim=4, seed=5)
    state = train(train_set, params)
    path = tmp_path / "ck.json"
    save_checkpoint(state, params, path, run_config={"epochs": 2})
    loaded, p2, cfg = load_checkpoint(path)
    assert p2 == params and cfg == {"epochs": 2}
    assert np.array_equal(loaded.head.weights, state.head.weights)
    assert loaded.scaler.log_t == state.scaler.log_t
    assert loaded.loss_history == state.loss_history and loaded.step == state.step


def test_bad_checkpoint(tmp_path):
    path = tmp_path / "x.json"
    path.write_text("{}")
    with pytest.raises(TrainingError, match="not a checkpoint"):
        load_checkpoint(path)

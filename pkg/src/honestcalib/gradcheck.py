"""Central finite-difference verification of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Hyperparams
from .mining import Triplet
from .records import make_record
from .training import (
    ProjectionHead,
    TemperatureScaler,
    TrainState,
    _contrastive_terms,
    _stack,
    gradients,
    total_loss,
)

STEP = 1e-6
TOLERANCE = 1e-5  # keep in step with the summary text
# Gradients smaller than SCALE_FLOOR * max(1, |loss|) are judged against that
# floor: central differences carry roundoff of order eps * |loss| / h.
SCALE_FLOOR = 1e-4


@dataclass(frozen=True)
class GradcheckResult:
    max_rel_err: float
    n_configs: int
    n_checked: int
    n_skipped: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        op = "<" if self.passed else ">="
        return (
            f"{verdict} max_rel_err {op} 1e-5 "
            f"(max_rel_err={self.max_rel_err:.3e}, configs={self.n_configs}, "
            f"checked={self.n_checked}, skipped_at_kink={self.n_skipped})"
        )


def random_problem(rng: np.random.Generator):
    """A small random batch, triplet set, hyperparameters and train state."""
    d_in = int(rng.integers(2, 9))
    d_proj = int(rng.integers(2, 5))
    n_rec = int(rng.integers(1, 7))
    records = []
    for i in range(n_rec):
        k = int(rng.integers(2, 7))
        vocab = k + 2
        ids = rng.choice(vocab, size=k, replace=False)
        probs = rng.dirichlet(np.ones(k) * rng.uniform(0.3, 3.0))
        gold = int(rng.integers(vocab))
        records.append(
            make_record(
                f"g{i}",
                list(zip(ids, probs)),
                vocab,
                rng.normal(size=d_in),
                rng.normal(size=d_in),
                gold_id=gold,
            )
        )
    triplets = [
        Triplet(rng.normal(size=d_in), rng.normal(size=d_in), rng.normal(size=d_in), f"a{j}", f"p{j}", f"n{j}")
        for j in range(int(rng.integers(0, 7)))
    ]
    params = Hyperparams(
        alpha=float(rng.uniform(0, 2)),
        beta=float(rng.uniform(0, 2)),
        margin_m=float(rng.uniform(0, 1.5)),
        lambda1=float(rng.uniform(0, 2)),
        lambda2=float(rng.uniform(0, 2)),
        projection_dim=d_proj,
    )
    head = ProjectionHead(rng.normal(size=(d_proj, d_in)), rng.normal(size=d_proj))
    state = TrainState(head=head, scaler=TemperatureScaler(float(rng.uniform(-1, 1))))
    return records, triplets, params, state


def _hinge_signs(triplets, head, margin):
    if not triplets:
        return np.zeros(0, dtype=bool)
    a, p, n = _stack(triplets)
    _, hinge, _, _ = _contrastive_terms(a, p, n, head, margin, need_grad=False)
    return hinge > 0


def check_problem(records, triplets, params, state, h: float = STEP):
    """Max relative error over every parameter coordinate of one problem.

    Coordinates whose +/- h perturbation flips any hinge are skipped.
    """
    dW, db, dlt = gradients(records, triplets, params, state)
    floor = SCALE_FLOOR * max(1.0, abs(total_loss(records, triplets, params, state)))
    max_err = 0.0
    checked = skipped = 0

    def compare(analytic, plus_state, minus_state):
        nonlocal max_err, checked, skipped
        if not np.array_equal(
            _hinge_signs(triplets, plus_state.head, params.margin_m),
            _hinge_signs(triplets, minus_state.head, params.margin_m),
        ):
            skipped += 1
            return
        numeric = (total_loss(records, triplets, params, plus_state) - total_loss(records, triplets, params, minus_state)) / (2 * h)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        max_err = max(max_err, err)
        checked += 1

    base = state.head
    for arr_name, grad in (("weights", dW), ("bias", db)):
        arr = getattr(base, arr_name)
        for idx in np.ndindex(arr.shape):
            states = []
            for sign in (1.0, -1.0):
                head = base.copy()
                getattr(head, arr_name)[idx] += sign * h
                states.append(TrainState(head=head, scaler=state.scaler))
            compare(float(grad[idx]), *states)
    if params.calibrate_temperature:
        plus = TrainState(head=base, scaler=TemperatureScaler(state.scaler.log_t + h))
        minus = TrainState(head=base, scaler=TemperatureScaler(state.scaler.log_t - h))
        compare(dlt, plus, minus)
    return max_err, checked, skipped


def gradient_check(seed: int = 0, n_configs: int = 50) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for _ in range(n_configs):
        err, c, s = check_problem(*random_problem(rng))
        worst = max(worst, err)
        checked += c
        skipped += s
    return GradcheckResult(worst, n_configs, checked, skipped)

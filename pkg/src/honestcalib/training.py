"""Alignment and contrastive losses, analytic gradients and the training loop.

Trainable parameters are an affine projection head (contrastive term) and a
scalar log-temperature applied to logits recovered as ln p (alignment term).
The logged embeddings and distributions are never modified.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import Hyperparams, coerce
from .mining import Eligibility, Triplet, compute_eligibility, mine_triplets
from .records import PROB_FLOOR, AnswerDistribution, PredictionRecord, RecordError, require_gold

LOG_T_MIN = math.log(0.01)
LOG_T_MAX = math.log(100.0)
CHECKPOINT_FORMAT = "honestcalib-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class ProjectionHead:
    weights: np.ndarray  # (d_proj, d_in)
    bias: np.ndarray  # (d_proj,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("head weights must be (d_proj, d_in) with a d_proj bias")

    @classmethod
    def init(cls, d_in: int, d_proj: int, rng: np.random.Generator, scale: float = 0.05) -> "ProjectionHead":
        return cls(rng.uniform(-scale, scale, size=(d_proj, d_in)), np.zeros(d_proj))

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]

    def project(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.d_in:
            raise ValueError(f"dimension mismatch: head expects {self.d_in}, got {v.shape[-1]}")
        return v @ self.weights.T + self.bias

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.weights.copy(), self.bias.copy())


@dataclass
class TemperatureScaler:
    log_t: float = 0.0

    def __post_init__(self):
        self.log_t = float(min(max(self.log_t, LOG_T_MIN), LOG_T_MAX))

    @property
    def temperature(self) -> float:
        return math.exp(self.log_t)

    def temper(self, dist: AnswerDistribution) -> AnswerDistribution:
        """Re-softmax of ln(p)/t over the same entries. Argmax is preserved."""
        z = np.log(np.maximum(dist.probs, PROB_FLOOR)) / self.temperature
        q = np.exp(z - z.max())
        q = q / q.sum()
        q.flags.writeable = False
        return AnswerDistribution(dist.answer_ids, q, dist.vocab_size)

    def confidences(self, records: Sequence[PredictionRecord]) -> np.ndarray:
        return np.array([self.temper(r.distribution).probs.max() for r in records])


@dataclass
class TrainState:
    head: ProjectionHead
    scaler: TemperatureScaler
    step: int = 0
    rng_seed: int = 0
    loss_history: list[float] = field(default_factory=list)


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= 1e-12 or nv <= 1e-12:
        raise ValueError("cosine similarity of a zero vector")
    return float(u @ v / (nu * nv))


def project(head: ProjectionHead, v) -> np.ndarray:
    return head.project(v)


# -- alignment term -----------------------------------------------------


@dataclass(frozen=True)
class AlignmentTable:
    """Records flattened into padded arrays: log-probs, predicted/gold columns."""

    logp: np.ndarray  # (n, K); padding is -inf
    pred_col: np.ndarray
    gold_col: np.ndarray
    wrong: np.ndarray

    def rows(self, idx) -> "AlignmentTable":
        return AlignmentTable(self.logp[idx], self.pred_col[idx], self.gold_col[idx], self.wrong[idx])

    def __len__(self) -> int:
        return len(self.pred_col)


def build_alignment_table(records: Sequence[PredictionRecord]) -> AlignmentTable:
    require_gold(records, "alignment loss")
    width = max(len(r.distribution) + 1 for r in records)
    logp = np.full((len(records), width), -np.inf)
    pred_col = np.zeros(len(records), dtype=np.int64)
    gold_col = np.zeros(len(records), dtype=np.int64)
    wrong = np.zeros(len(records))
    for row, rec in enumerate(records):
        dist = rec.distribution
        k = len(dist)
        logp[row, :k] = np.log(np.maximum(dist.probs, PROB_FLOOR))
        ids = list(dist.answer_ids)
        pred_col[row] = ids.index(rec.predicted_id)
        if rec.gold_id in ids:
            gold_col[row] = ids.index(rec.gold_id)
        else:
            # gold outside the logged candidates: floored probability
            logp[row, k] = math.log(PROB_FLOOR)
            gold_col[row] = k
        wrong[row] = float(rec.predicted_id != rec.gold_id)
    return AlignmentTable(logp, pred_col, gold_col, wrong)


def _alignment_terms(table: AlignmentTable, log_t: float, alpha: float, beta: float):
    """Per-row alignment losses and their derivatives with respect to log_t."""
    t_inv = math.exp(-log_t)
    valid = np.isfinite(table.logp)
    z = np.where(valid, table.logp * t_inv, -np.inf)
    z_max = z.max(axis=1, keepdims=True)
    ez = np.where(valid, np.exp(z - z_max), 0.0)
    norm = ez.sum(axis=1, keepdims=True)
    q = ez / norm
    log_q = np.where(valid, z - z_max - np.log(norm), 0.0)
    rows = np.arange(len(table))
    q_pred = q[rows, table.pred_col]
    ce = -log_q[rows, table.gold_col]
    losses = alpha * table.wrong * q_pred + beta * ce

    onehot_pred = np.zeros_like(q)
    onehot_pred[rows, table.pred_col] = 1.0
    onehot_gold = np.zeros_like(q)
    onehot_gold[rows, table.gold_col] = 1.0
    dl_dz = (alpha * table.wrong * q_pred)[:, None] * (onehot_pred - q) + beta * (q - onehot_gold)
    dz_ds = -np.where(valid, z, 0.0)
    dl_ds = np.sum(dl_dz * dz_ds, axis=1)
    return losses, dl_ds


def alignment_loss(record: PredictionRecord, alpha: float, beta: float, scaler: Optional[TemperatureScaler] = None) -> float:
    """alpha * 1[wrong] * C_t + beta * CE_t on the tempered distribution."""
    log_t = 0.0 if scaler is None else scaler.log_t
    losses, _ = _alignment_terms(build_alignment_table([record]), log_t, alpha, beta)
    return float(losses[0])


# -- contrastive term ---------------------------------------------------


def _stack(triplets: Sequence[Triplet]):
    return (
        np.array([t.anchor for t in triplets]),
        np.array([t.positive for t in triplets]),
        np.array([t.negative for t in triplets]),
    )


def _row_cos(u: np.ndarray, v: np.ndarray):
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    if np.any(nu <= 1e-12) or np.any(nv <= 1e-12):
        raise ValueError("zero projected vector in contrastive loss")
    s = np.sum(u * v, axis=1) / (nu * nv)
    du = v / (nu * nv)[:, None] - (s / nu**2)[:, None] * u
    dv = u / (nu * nv)[:, None] - (s / nv**2)[:, None] * v
    return s, du, dv


def _contrastive_terms(anchors, positives, negatives, head: ProjectionHead, margin: float, need_grad: bool = True):
    U = head.project(anchors)
    V = head.project(positives)
    X = head.project(negatives)
    s_ap, dap_u, dap_v = _row_cos(U, V)
    s_an, dan_u, dan_x = _row_cos(U, X)
    hinge = margin - s_ap + s_an
    losses = np.maximum(hinge, 0.0)
    if not need_grad:
        return losses, hinge, None, None
    # subgradient 0 at the kink
    active = (hinge > 0.0).astype(np.float64)[:, None]
    gU = active * (dan_u - dap_u)
    gV = -active * dap_v
    gX = active * dan_x
    dW = gU.T @ anchors + gV.T @ positives + gX.T @ negatives
    db = (gU + gV + gX).sum(axis=0)
    return losses, hinge, dW, db


def contrastive_loss(triplet: Triplet, head: ProjectionHead, margin_m: float) -> float:
    a, p, n = _stack([triplet])
    losses, _, _, _ = _contrastive_terms(a, p, n, head, margin_m, need_grad=False)
    return float(losses[0])


def triplet_margins(triplets: Sequence[Triplet], head: ProjectionHead) -> np.ndarray:
    """sim(P(a), P(p)) - sim(P(a), P(n)) per triplet."""
    if not triplets:
        return np.zeros(0)
    a, p, n = _stack(triplets)
    U, V, X = head.project(a), head.project(p), head.project(n)
    return _row_cos(U, V)[0] - _row_cos(U, X)[0]


# -- total --------------------------------------------------------------


def _gold_rows(batch):
    rows = [r for r in batch if r.gold_id is not None]
    if not rows:
        raise RecordError("total loss: no gold-bearing records in batch")
    return rows


def _loss_and_grads(table: AlignmentTable, triplet_arrays, params: Hyperparams, state: TrainState):
    log_t = state.scaler.log_t
    align, dalign = _alignment_terms(table, log_t, params.alpha, params.beta)
    loss = params.lambda1 * float(align.mean())
    d_log_t = params.lambda1 * float(dalign.mean()) if params.calibrate_temperature else 0.0
    dW = np.zeros_like(state.head.weights)
    db = np.zeros_like(state.head.bias)
    if triplet_arrays is not None:
        a, p, n = triplet_arrays
        c_losses, _, cW, cb = _contrastive_terms(a, p, n, state.head, params.margin_m)
        scale = params.lambda2 / len(c_losses)
        loss += scale * float(c_losses.sum())
        dW += scale * cW
        db += scale * cb
    return loss, dW, db, d_log_t


def total_loss(batch: Sequence[PredictionRecord], triplets: Sequence[Triplet], params: Hyperparams, state: TrainState) -> float:
    table = build_alignment_table(_gold_rows(batch))
    arrays = _stack(triplets) if triplets else None
    return _loss_and_grads(table, arrays, params, state)[0]


def gradients(batch: Sequence[PredictionRecord], triplets: Sequence[Triplet], params: Hyperparams, state: TrainState):
    """(d_head_weights, d_head_bias, d_log_t) of the total loss."""
    table = build_alignment_table(_gold_rows(batch))
    arrays = _stack(triplets) if triplets else None
    _, dW, db, d_log_t = _loss_and_grads(table, arrays, params, state)
    return dW, db, d_log_t


def init_state(d_in: int, params: Hyperparams) -> TrainState:
    rng = np.random.default_rng(params.seed)
    head = ProjectionHead.init(d_in, params.projection_dim, rng, params.init_scale)
    return TrainState(head=head, scaler=TemperatureScaler(0.0), step=0, rng_seed=params.seed)


def batch_seed(seed: int, epoch: int, batch_index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch_index]).generate_state(1)[0])


def train(
    records: Sequence[PredictionRecord],
    params: Hyperparams,
    eligibility: Optional[dict[str, Eligibility]] = None,
    state: Optional[TrainState] = None,
) -> TrainState:
    """Shuffle, batch, mine, step; one mean loss per epoch in ``loss_history``."""
    if not records:
        raise RecordError("train: no records")
    require_gold(records, "train")
    d_in = records[0].anchor_embedding.shape[0]
    if state is None:
        state = init_state(d_in, params)
    if eligibility is None:
        eligibility = compute_eligibility(records, params)
    table = build_alignment_table(records)
    shuffle_rng = np.random.default_rng([params.seed, 1])
    n = len(records)
    lr = params.learning_rate

    for epoch in range(params.epochs):
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for bi, start in enumerate(range(0, n, params.batch_size)):
            idx = order[start : start + params.batch_size]
            batch = [records[i] for i in idx]
            triplets = mine_triplets(batch, params, batch_seed(params.seed, epoch, bi), eligibility)
            arrays = _stack(triplets) if triplets else None
            loss, dW, db, d_log_t = _loss_and_grads(table.rows(idx), arrays, params, state)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            batch_losses.append(loss)
            if lr:
                state.head.weights -= lr * dW
                state.head.bias -= lr * db
                state.scaler = TemperatureScaler(state.scaler.log_t - lr * d_log_t)
            state.step += 1
        state.loss_history.append(float(np.mean(batch_losses)))
        if not (np.all(np.isfinite(state.head.weights)) and np.all(np.isfinite(state.head.bias))):
            raise TrainingError(f"non-finite head parameters after epoch {epoch}")
    return state


# -- checkpoints --------------------------------------------------------


def save_checkpoint(state: TrainState, params: Hyperparams, path, run_config: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "head": {
            "d_proj": state.head.weights.shape[0],
            "d_in": state.head.weights.shape[1],
            "weights": state.head.weights.ravel().tolist(),
            "bias": state.head.bias.tolist(),
        },
        "log_t": state.scaler.log_t,
        "step": state.step,
        "seed": state.rng_seed,
        "params": asdict(params),
        "loss_history": list(state.loss_history),
    }
    if run_config is not None:
        payload["config"] = run_config
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[TrainState, Hyperparams, Optional[dict]]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise TrainingError(f"cannot read checkpoint {path}: {exc}") from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path}: not a checkpoint file")
    head = payload["head"]
    weights = np.array(head["weights"], dtype=np.float64).reshape(head["d_proj"], head["d_in"])
    state = TrainState(
        head=ProjectionHead(weights, np.array(head["bias"], dtype=np.float64)),
        scaler=TemperatureScaler(payload["log_t"]),
        step=int(payload["step"]),
        rng_seed=int(payload["seed"]),
        loss_history=[float(x) for x in payload.get("loss_history", [])],
    )
    return state, coerce(Hyperparams, payload["params"]), payload.get("config")

"""Adam training loop with dead-latent tracking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import GradientSet, loss_and_gradients_batch
from .domain import (
    AttrSaeError,
    DeadMask,
    DimensionMismatch,
    EmptyBatch,
    LossBreakdown,
    SaeModel,
    SparseCode,
    TrainConfig,
    validate_batch,
)


class NonFiniteLoss(AttrSaeError, ArithmeticError):
    def __init__(self, step: int, loss: LossBreakdown | None = None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.loss = loss


class NonFiniteGradient(AttrSaeError, ArithmeticError):
    pass


def _rng(seed: int, stream: int) -> np.random.Generator:
    # Independent streams per purpose so changing one never shifts another.
    return np.random.default_rng([seed, stream])


_INIT_STREAM, _SAMPLE_STREAM = 0, 1


def init_model(d: int, m: int, seed: int, batch_sample, dtype=None) -> SaeModel:
    """Unit-norm Gaussian decoder columns, tied encoder, b_pre at the data mean.

    ``dtype`` defaults to the sample's floating dtype (float64 otherwise).
    """
    sample = np.asarray(batch_sample)
    if sample.size == 0:
        raise EmptyBatch("cannot initialise from an empty batch")
    validate_batch(sample, d)
    if dtype is None:
        dtype = sample.dtype if np.issubdtype(sample.dtype, np.floating) else np.float64
    W = _rng(seed, _INIT_STREAM).standard_normal((d, m))
    W /= np.linalg.norm(W, axis=0, keepdims=True)
    W_dec = W.astype(dtype)
    b_pre = sample.astype(np.float64).mean(axis=0).astype(dtype)
    return SaeModel(
        W_enc=W_dec.T.copy(), b_enc=np.zeros(m, dtype), W_dec=W_dec, b_pre=b_pre
    )


@dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, model: SaeModel, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
        params = model.params()
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            0,
            beta1,
            beta2,
            epsilon,
        )


def adam_update(param, grad, m, v, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; ``t`` is the 1-based step number.

    Returns new (param, m, v) arrays without touching the inputs.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def normalize_columns(W: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(W, axis=0, keepdims=True)
    return W / np.where(norms > 0, norms, 1)


def adam_step(
    model: SaeModel,
    grads: GradientSet,
    state: AdamState,
    lr: float,
    normalize_decoder: bool = False,
) -> tuple[SaeModel, AdamState]:
    if not grads.is_finite():
        raise NonFiniteGradient(f"non-finite gradient at step {state.step_count + 1}")
    t = state.step_count + 1
    params = model.params()
    new_params, new_m, new_v = {}, {}, {}
    for name, g in grads.as_dict().items():
        p = params[name]
        new_p, new_m[name], new_v[name] = adam_update(
            p, g.astype(p.dtype, copy=False), state.first_moment[name],
            state.second_moment[name], t, lr, state.beta1, state.beta2, state.epsilon,
        )
        new_params[name] = new_p.astype(p.dtype, copy=False)
    if normalize_decoder:
        new_params["W_dec"] = normalize_columns(new_params["W_dec"])
    new_state = AdamState(new_m, new_v, t, state.beta1, state.beta2, state.epsilon)
    return SaeModel(**new_params), new_state


@dataclass(frozen=True, eq=False)
class ActivityTracker:
    steps_since_fire: np.ndarray
    dead_window: int

    @classmethod
    def fresh(cls, m: int, dead_window: int) -> ActivityTracker:
        return cls(np.zeros(m, np.int64), dead_window)

    @property
    def m(self) -> int:
        return self.steps_since_fire.shape[0]


def fired_from_codes(codes: list[SparseCode], m: int) -> np.ndarray:
    fired = np.zeros(m, bool)
    for c in codes:
        if c.m != m:
            raise DimensionMismatch(f"code has m={c.m}, tracker has m={m}")
        fired[c.indices] = True
    return fired


def update_activity_fired(tracker: ActivityTracker, fired: np.ndarray) -> ActivityTracker:
    counts = np.where(fired, 0, tracker.steps_since_fire + 1)
    return ActivityTracker(counts, tracker.dead_window)


def update_activity(tracker: ActivityTracker, batch_codes: list[SparseCode]) -> ActivityTracker:
    """Reset neurons in the union of the codes' supports, increment the rest."""
    return update_activity_fired(tracker, fired_from_codes(batch_codes, tracker.m))


def dead_mask(tracker: ActivityTracker) -> DeadMask:
    return DeadMask(tracker.steps_since_fire >= tracker.dead_window)


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: LossBreakdown
    dead_count: int
    mean_nnz: float
    wall_clock: float = field(compare=False)

    def log_line(self) -> str:
        return (
            f"step={self.step} mse={self.loss.mse:.6g} aux={self.loss.aux:.6g} "
            f"total={self.loss.total:.6g} dead={self.dead_count} nnz={self.mean_nnz:.4g}"
        )


@dataclass(frozen=True, eq=False)
class TrainReport:
    records: list[StepRecord]
    model: SaeModel
    initial_model: SaeModel
    tracker: ActivityTracker

    @property
    def dead_fraction(self) -> float:
        return float(dead_mask(self.tracker).count / self.tracker.m)

    def smoothed_total(self, window: int = 100, end: int | None = None) -> float:
        end = len(self.records) if end is None else end
        recs = self.records[max(0, end - window) : end]
        return float(np.mean([r.loss.total for r in recs]))

    def smoothed_mse(self, window: int = 100, end: int | None = None) -> float:
        end = len(self.records) if end is None else end
        recs = self.records[max(0, end - window) : end]
        return float(np.mean([r.loss.mse for r in recs]))

    def __eq__(self, other):
        if not isinstance(other, TrainReport):
            return NotImplemented
        return self.records == other.records and self.model == other.model


def train(
    data,
    cfg: TrainConfig,
    model: SaeModel | None = None,
    callback: Callable[[StepRecord, SaeModel], None] | None = None,
) -> TrainReport:
    """Run ``cfg.total_steps`` Adam steps on batches sampled with replacement.

    Each step: forward, losses against the current dead mask, gradients,
    Adam update, then activity tracking on the batch's top-k supports.
    ``callback`` sees every record together with the updated model.
    """
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyBatch("training data must be a nonempty (n, d) array")
    n, d = data.shape
    validate_batch(data, d)
    if model is None:
        m = cfg.latent_dim(d)
        cfg.check_latent_dim(m)
        model = init_model(d, m, cfg.seed, data)
    elif model.d != d:
        raise DimensionMismatch(f"model has d={model.d}, data has d={d}")
    cfg.check_latent_dim(model.m)
    data = data.astype(model.dtype, copy=False)

    initial = model
    state = AdamState.zeros_like(model, cfg.beta1, cfg.beta2, cfg.epsilon)
    tracker = ActivityTracker.fresh(model.m, cfg.dead_window)
    rng = _rng(cfg.seed, _SAMPLE_STREAM)
    records: list[StepRecord] = []
    t0 = time.perf_counter()
    for step in range(cfg.total_steps):
        batch = data[rng.integers(0, n, size=cfg.batch_size)]
        dead = dead_mask(tracker)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads, fw = loss_and_gradients_batch(model, batch, cfg, dead)
        if not loss.is_finite():
            raise NonFiniteLoss(step, loss)
        model, state = adam_step(model, grads, state, cfg.learning_rate, cfg.normalize_decoder)
        tracker = update_activity_fired(tracker, fw.active.any(axis=0))
        rec = StepRecord(
            step=step,
            loss=loss,
            dead_count=dead.count,
            mean_nnz=float(fw.active.sum(axis=1).mean()),
            wall_clock=time.perf_counter() - t0,
        )
        records.append(rec)
        if callback is not None:
            callback(rec, model)
    return TrainReport(records, model, initial, tracker)

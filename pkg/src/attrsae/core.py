"""Encoding, decoding, losses and analytic gradients of the top-k SAE.

Single-vector functions take and return 1-D arrays / SparseCode values. The
``*_batch`` variants work on dense (n, m) code matrices and are what the
trainer uses; the single-vector API is a thin wrapper around them so both
paths share one implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import (
    DeadMask,
    DimensionMismatch,
    LossBreakdown,
    SaeModel,
    SparseCode,
    TrainConfig,
    as_vector,
)


@dataclass(frozen=True, eq=False)
class GradientSet:
    dW_enc: np.ndarray
    db_enc: np.ndarray
    dW_dec: np.ndarray
    db_pre: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "W_enc": self.dW_enc,
            "b_enc": self.db_enc,
            "W_dec": self.dW_dec,
            "b_pre": self.db_pre,
        }

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.as_dict().values())


def topk_mask(pre: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest strictly positive entries of each row.

    Ties at the cutoff go to the lowest index. Rows with fewer than k
    positive entries keep all of their positive entries.
    """
    pre = np.atleast_2d(pre)
    m = pre.shape[1]
    k = min(int(k), m)
    if k < 1:
        raise ValueError("k must be >= 1")
    pos = pre > 0
    if k == m:
        return pos
    relu = np.where(pos, pre, 0)
    cutoff = np.partition(relu, m - k, axis=1)[:, m - k : m - k + 1]
    above = relu > cutoff
    at = relu == cutoff
    need = k - above.sum(axis=1, keepdims=True)
    at &= np.cumsum(at, axis=1) <= need
    return (above | at) & pos


def top_k_select(pre_activations, k: int) -> SparseCode:
    """ReLU then keep the k largest positive values (k > m is clamped)."""
    v = np.asarray(pre_activations)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    mask = topk_mask(v[None, :], k)[0]
    idx = np.flatnonzero(mask)
    return SparseCode(idx, v[idx], v.shape[0])


def _check_batch(model: SaeModel, X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DimensionMismatch(f"expected (n, {model.d}) batch, got shape {X.shape}")
    return X


def pre_activations_batch(model: SaeModel, X) -> np.ndarray:
    X = _check_batch(model, X)
    return (X - model.b_pre) @ model.W_enc.T + model.b_enc


def encode_batch(model: SaeModel, X, k: int) -> np.ndarray:
    """Dense (n, m) code matrix; zero outside each row's top-k support."""
    A = pre_activations_batch(model, X)
    return np.where(topk_mask(A, k), A, 0)


def decode_batch(model: SaeModel, Z) -> np.ndarray:
    Z = np.asarray(Z)
    if Z.ndim != 2 or Z.shape[1] != model.m:
        raise DimensionMismatch(f"expected (n, {model.m}) codes, got shape {Z.shape}")
    return Z @ model.W_dec.T + model.b_pre


def codes_from_dense(Z: np.ndarray) -> list[SparseCode]:
    return [SparseCode.from_dense(z) for z in Z]


def encode(model: SaeModel, x, k: int) -> SparseCode:
    x = as_vector(x, model.d)
    code = top_k_select(pre_activations_batch(model, x[None, :])[0], k)
    assert code.nnz <= k
    return code


def decode(model: SaeModel, z: SparseCode) -> np.ndarray:
    if z.m != model.m:
        raise DimensionMismatch(f"code has m={z.m}, model has m={model.m}")
    return model.W_dec[:, z.indices] @ z.coefficients.astype(model.dtype) + model.b_pre


def reconstruct(model: SaeModel, x, k: int) -> np.ndarray:
    return decode(model, encode(model, x, k))


def mse_loss(x, x_hat) -> float:
    x, x_hat = np.asarray(x), np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionMismatch(f"shapes differ: {x.shape} vs {x_hat.shape}")
    diff = x - x_hat
    return float(np.dot(diff, diff))


def _aux_candidates(A: np.ndarray, dead: DeadMask | None, masked: bool) -> np.ndarray:
    if not masked:
        return A
    if dead is None or dead.m != A.shape[1]:
        raise DimensionMismatch("dead mask length must equal m")
    return np.where(dead.flags, A, -np.inf)


def aux_selection(
    model: SaeModel, x, dead: DeadMask, k_aux: int, masked: bool = True
) -> SparseCode:
    """Top-k_aux over the dead latents' pre-activations (all latents if unmasked)."""
    x = as_vector(x, model.d)
    a = pre_activations_batch(model, x[None, :])[0]
    cand = _aux_candidates(a[None, :], dead, masked)
    idx = np.flatnonzero(topk_mask(cand, k_aux)[0])
    return SparseCode(idx, a[idx], model.m)


def aux_loss(
    model: SaeModel, x, x_hat, dead: DeadMask, k_aux: int, masked: bool = True
) -> float:
    """Squared error of explaining the residual x - x_hat with the aux code.

    The residual estimate is W_dec @ z_aux with no bias term.
    """
    x = as_vector(x, model.d)
    x_hat = as_vector(x_hat, model.d)
    z_aux = aux_selection(model, x, dead, k_aux, masked)
    r = x - x_hat
    r_hat = model.W_dec[:, z_aux.indices] @ z_aux.coefficients
    return mse_loss(r, r_hat)


def total_loss(x, x_hat, model: SaeModel, dead: DeadMask, cfg: TrainConfig) -> LossBreakdown:
    mse = mse_loss(x, x_hat)
    aux = aux_loss(model, x, x_hat, dead, cfg.k_aux, cfg.masked_aux)
    r = np.asarray(x) - np.asarray(x_hat)
    return LossBreakdown.combine(mse, aux, cfg.alpha, np.sqrt(np.dot(r, r)))


@dataclass(frozen=True, eq=False)
class Forward:
    """Intermediate values of one batched forward pass."""

    U: np.ndarray  # X - b_pre
    A: np.ndarray  # pre-activations
    active: np.ndarray  # top-k support mask
    Z: np.ndarray
    E: np.ndarray  # residual X - X_hat
    aux_active: np.ndarray
    Z_aux: np.ndarray
    F: np.ndarray  # E - W_dec Z_aux


def forward_batch(
    model: SaeModel, X, k: int, k_aux: int, dead: DeadMask | None, masked: bool = True
) -> Forward:
    X = _check_batch(model, X)
    U = X - model.b_pre
    A = U @ model.W_enc.T + model.b_enc
    active = topk_mask(A, k)
    Z = np.where(active, A, 0)
    E = U - Z @ model.W_dec.T
    aux_active = topk_mask(_aux_candidates(A, dead, masked), k_aux)
    Z_aux = np.where(aux_active, A, 0)
    F = E - Z_aux @ model.W_dec.T
    return Forward(U, A, active, Z, E, aux_active, Z_aux, F)


def _row_sq(M: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", M, M, dtype=np.float64)


def batch_losses(fw: Forward, alpha: float) -> LossBreakdown:
    """Per-vector summed losses averaged over the batch."""
    mse = _row_sq(fw.E)
    return LossBreakdown.combine(
        mse.mean(), _row_sq(fw.F).mean(), alpha, np.sqrt(mse).mean()
    )


def batch_gradients(model: SaeModel, fw: Forward, alpha: float) -> GradientSet:
    """Gradients of mean_i(||e_i||^2 + alpha ||e_i - W_dec z_aux_i||^2).

    The top-k and aux selections are held fixed at their forward-pass values.
    The residual inside the aux term is not detached, so the aux term also
    feeds gradients through the main reconstruction.
    """
    n = fw.U.shape[0]
    G_f = (2.0 * alpha / n) * fw.F
    G_e = (2.0 / n) * fw.E + G_f
    W_dec = model.W_dec
    dW_dec = -(G_e.T @ fw.Z) - G_f.T @ fw.Z_aux
    dA = np.where(fw.active, -(G_e @ W_dec), 0) + np.where(fw.aux_active, -(G_f @ W_dec), 0)
    dW_enc = dA.T @ fw.U
    db_enc = dA.sum(axis=0)
    dU = G_e + dA @ model.W_enc
    db_pre = -dU.sum(axis=0)
    return GradientSet(dW_enc, db_enc, dW_dec, db_pre)


def loss_and_gradients_batch(
    model: SaeModel, X, cfg: TrainConfig, dead: DeadMask | None
) -> tuple[LossBreakdown, GradientSet, Forward]:
    fw = forward_batch(model, X, cfg.k, cfg.k_aux, dead, cfg.masked_aux)
    return batch_losses(fw, cfg.alpha), batch_gradients(model, fw, cfg.alpha), fw


def loss_gradients(model: SaeModel, x, cfg: TrainConfig, dead: DeadMask) -> GradientSet:
    x = as_vector(x, model.d)
    _, grads, _ = loss_and_gradients_batch(model, x[None, :], cfg, dead)
    return grads

"""Attribute directions and embedding manipulation along them.

A direction is the sparse code of an attribute embedding; steering adds the
decoder image of lambda * code to an input embedding (no pre-bias term).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import encode, encode_batch
from .domain import AttrSaeError, DimensionMismatch, SaeModel, SparseCode, as_vector

log = logging.getLogger(__name__)


class EmptyDirection(AttrSaeError, UserWarning):
    """The attribute embedding encoded to an empty code."""


@dataclass(frozen=True)
class AttributeDirection:
    code: SparseCode
    label: str = ""
    source_norm: float = 0.0


@dataclass(frozen=True)
class SteerRequest:
    directions: tuple[tuple[AttributeDirection, float], ...]

    def __post_init__(self):
        entries = tuple((d, float(lam)) for d, lam in self.directions)
        if not entries:
            raise ValueError("a steer request needs at least one direction")
        if not all(np.isfinite(lam) for _, lam in entries):
            raise ValueError("steering strengths must be finite")
        object.__setattr__(self, "directions", entries)

    @classmethod
    def single(cls, direction: AttributeDirection, lam: float) -> SteerRequest:
        return cls(((direction, lam),))


def extract_direction(
    model: SaeModel, x_A, k: int, label: str = "", strict: bool = False
) -> AttributeDirection:
    """Encode an attribute embedding into a direction.

    An empty code is logged as a warning; with ``strict`` it raises
    EmptyDirection instead.
    """
    x_A = as_vector(x_A, model.d)
    code = encode(model, x_A, k)
    if code.nnz == 0:
        msg = f"attribute {label!r} encodes to an empty code"
        if strict:
            raise EmptyDirection(msg)
        log.warning(msg)
    return AttributeDirection(code, label, float(np.linalg.norm(x_A)))


def extract_direction_rows(
    model: SaeModel, rows, k: int, label: str = "", per_row: bool = False
) -> AttributeDirection:
    """Direction from a multi-row attribute embedding.

    By default the rows are averaged before encoding; ``per_row`` encodes
    every row and averages the codes instead (the result may then have
    more than k nonzeros).
    """
    rows = np.atleast_2d(np.asarray(rows))
    if rows.shape[1] != model.d:
        raise DimensionMismatch(f"attribute rows have d={rows.shape[1]}, model d={model.d}")
    if not per_row:
        return extract_direction(model, rows.astype(np.float64).mean(axis=0), k, label)
    Z = encode_batch(model, rows, k).mean(axis=0)
    norm = float(np.linalg.norm(rows, axis=1).mean())
    return AttributeDirection(SparseCode.from_dense(Z), label, norm)


def steering_offset(model: SaeModel, req: SteerRequest) -> np.ndarray:
    """Sum over entries of W_dec @ (lambda * code)."""
    z = np.zeros(model.m, dtype=np.float64)
    for direction, lam in req.directions:
        code = direction.code
        if code.m != model.m:
            raise DimensionMismatch(f"direction has m={code.m}, model has m={model.m}")
        if lam == 0 or code.nnz == 0:
            continue
        z[code.indices] += lam * code.coefficients
    idx = np.flatnonzero(z)
    if idx.size == 0:
        # -0.0 is the additive identity for every float, including -0.0 itself.
        return np.full(model.d, -0.0)
    return model.W_dec[:, idx].astype(np.float64) @ z[idx]


def manipulate(model: SaeModel, x, req: SteerRequest) -> np.ndarray:
    x = as_vector(x, model.d)
    return x + steering_offset(model, req).astype(x.dtype, copy=False)


def manipulate_rows(model: SaeModel, X, req: SteerRequest) -> np.ndarray:
    """Apply the same offset to every row of X."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DimensionMismatch(f"expected (n, {model.d}) embeddings, got {X.shape}")
    return X + steering_offset(model, req).astype(X.dtype, copy=False)


def sweep(model: SaeModel, x, direction: AttributeDirection, lambdas) -> list[np.ndarray]:
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("lambdas must be nonempty")
    return [manipulate(model, x, SteerRequest.single(direction, lam)) for lam in lambdas]

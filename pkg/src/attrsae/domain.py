"""Core value types shared across the package.

Embedding vectors and batches are plain numpy arrays (1-D and 2-D float);
the helpers here validate them. Everything else is a frozen dataclass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np


class AttrSaeError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(AttrSaeError, ValueError):
    pass


class NonFiniteValue(AttrSaeError, ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class EmptyBatch(AttrSaeError, ValueError):
    pass


class ConfigError(AttrSaeError, ValueError):
    pass


def validate_batch(batch: np.ndarray, expected_d: int) -> None:
    """Raise unless ``batch`` is a finite (n, expected_d) array with n >= 1.

    Ragged input (a list of rows with differing lengths) is accepted and
    reported as a DimensionMismatch on the first offending row.
    """
    if isinstance(batch, np.ndarray) and batch.ndim == 2:
        rows = batch
    else:
        rows = list(batch)
    if len(rows) == 0:
        raise EmptyBatch("batch has no rows")
    for i, row in enumerate(rows):
        row = np.asarray(row)
        if row.ndim != 1 or row.shape[0] != expected_d:
            raise DimensionMismatch(
                f"row {i} has shape {row.shape}, expected ({expected_d},)"
            )
    arr = np.asarray(rows, dtype=float)
    bad = ~np.isfinite(arr)
    if bad.any():
        row = int(np.argwhere(bad)[0, 0])
        raise NonFiniteValue(f"non-finite value in row {row}", row=row)


def as_vector(x, d: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != d:
        raise DimensionMismatch(f"expected vector of length {d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue("vector contains NaN or Inf")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def _frozen_array(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SparseCode:
    """Nonnegative sparse latent with zeros elided.

    ``indices`` are strictly increasing in ``[0, m)``; ``coefficients`` are
    strictly positive and aligned with them.
    """

    indices: np.ndarray
    coefficients: np.ndarray
    m: int

    def __post_init__(self):
        idx = _frozen_array(self.indices, dtype=np.int64).reshape(-1)
        coef = np.array(self.coefficients, copy=True).reshape(-1)
        if not np.issubdtype(coef.dtype, np.floating):
            coef = coef.astype(np.float64)
        coef.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "m", int(self.m))
        if idx.shape != coef.shape:
            raise ValueError("indices and coefficients differ in length")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.m:
                raise ValueError(f"index out of range [0, {self.m})")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
            if not np.all(np.isfinite(coef)) or np.any(coef <= 0):
                raise ValueError("coefficients must be finite and strictly positive")

    @classmethod
    def empty(cls, m: int) -> SparseCode:
        return cls(np.zeros(0, np.int64), np.zeros(0), m)

    @classmethod
    def from_dense(cls, z: np.ndarray) -> SparseCode:
        z = np.asarray(z)
        idx = np.flatnonzero(z > 0)
        return cls(idx, z[idx], z.shape[0])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self, dtype=None) -> np.ndarray:
        z = np.zeros(self.m, dtype=dtype or self.coefficients.dtype)
        z[self.indices] = self.coefficients
        return z

    def __eq__(self, other):
        if not isinstance(other, SparseCode):
            return NotImplemented
        return (
            self.m == other.m
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.coefficients, other.coefficients)
        )

    def __repr__(self):
        pairs = ", ".join(f"{i}: {c:g}" for i, c in zip(self.indices, self.coefficients))
        return f"SparseCode({{{pairs}}}, m={self.m})"


@dataclass(frozen=True, eq=False)
class SaeModel:
    """Top-k sparse autoencoder parameters.

    Shapes: W_enc (m, d), b_enc (m,), W_dec (d, m), b_pre (d,). ``b_pre`` is
    subtracted before encoding and added back after decoding. All four arrays
    share one floating dtype, which is the dtype computations run in.
    """

    W_enc: np.ndarray
    b_enc: np.ndarray
    W_dec: np.ndarray
    b_pre: np.ndarray

    def __post_init__(self):
        dtype = np.result_type(self.W_enc, self.b_enc, self.W_dec, self.b_pre)
        if not np.issubdtype(dtype, np.floating):
            dtype = np.float64
        for name in ("W_enc", "b_enc", "W_dec", "b_pre"):
            a = _frozen_array(getattr(self, name), dtype=dtype)
            if not np.all(np.isfinite(a)):
                raise NonFiniteValue(f"{name} contains NaN or Inf")
            object.__setattr__(self, name, a)
        m, d = self.W_enc.shape if self.W_enc.ndim == 2 else (-1, -1)
        if (
            self.W_enc.ndim != 2
            or self.b_enc.shape != (m,)
            or self.W_dec.shape != (d, m)
            or self.b_pre.shape != (d,)
        ):
            raise DimensionMismatch(
                "inconsistent parameter shapes: "
                f"W_enc {self.W_enc.shape}, b_enc {self.b_enc.shape}, "
                f"W_dec {self.W_dec.shape}, b_pre {self.b_pre.shape}"
            )

    @property
    def d(self) -> int:
        return self.W_enc.shape[1]

    @property
    def m(self) -> int:
        return self.W_enc.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.W_enc.dtype

    def params(self) -> dict[str, np.ndarray]:
        return {
            "W_enc": self.W_enc,
            "b_enc": self.b_enc,
            "W_dec": self.W_dec,
            "b_pre": self.b_pre,
        }

    def replace(self, **params) -> SaeModel:
        return SaeModel(**{**self.params(), **params})

    def astype(self, dtype) -> SaeModel:
        return SaeModel(**{k: v.astype(dtype) for k, v in self.params().items()})

    def __eq__(self, other):
        if not isinstance(other, SaeModel):
            return NotImplemented
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.params().values(), other.params().values())
        )


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. Defaults are the published full-scale values."""

    k: int = 128
    k_aux: int = 256
    alpha: float = 0.1
    learning_rate: float = 4e-4
    batch_size: int = 4096
    total_steps: int = 97_656
    dead_window: int = 200
    seed: int = 0
    normalize_decoder: bool = False
    # False selects the unmasked auxiliary top-k (all latents are candidates).
    masked_aux: bool = True
    expansion_factor: int = 16
    # Explicit latent width; overrides expansion_factor when set.
    m: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("k", "k_aux", "batch_size", "dead_window", "expansion_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be nonnegative")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if self.m is not None and self.m < 1:
            raise ConfigError("m must be a positive integer")
        if not (self.alpha >= 0 and np.isfinite(self.alpha)):
            raise ConfigError("alpha must be a finite nonnegative real")
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be a finite positive real")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ConfigError("invalid Adam hyperparameters")

    def latent_dim(self, d: int) -> int:
        return self.m if self.m is not None else self.expansion_factor * d

    def check_latent_dim(self, m: int) -> None:
        if self.k > m or self.k_aux > m:
            raise ConfigError(f"k={self.k} and k_aux={self.k_aux} must not exceed m={m}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    aux: float
    total: float
    residual_norm: float

    @classmethod
    def combine(cls, mse: float, aux: float, alpha: float, residual_norm: float):
        mse, aux = float(mse), float(aux)
        return cls(mse=mse, aux=aux, total=mse + alpha * aux, residual_norm=float(residual_norm))

    def is_finite(self) -> bool:
        return all(np.isfinite([self.mse, self.aux, self.total, self.residual_norm]))


@dataclass(frozen=True, eq=False)
class DeadMask:
    flags: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def __post_init__(self):
        object.__setattr__(self, "flags", _frozen_array(self.flags, dtype=bool).reshape(-1))

    @classmethod
    def none(cls, m: int) -> DeadMask:
        return cls(np.zeros(m, bool))

    @classmethod
    def all(cls, m: int) -> DeadMask:
        return cls(np.ones(m, bool))

    @property
    def m(self) -> int:
        return self.flags.shape[0]

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    def __eq__(self, other):
        if not isinstance(other, DeadMask):
            return NotImplemented
        return np.array_equal(self.flags, other.flags)

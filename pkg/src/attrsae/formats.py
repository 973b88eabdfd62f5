"""Little-endian binary file formats.

Embeddings (magic ``ATSE``)::

    magic[4] version:u32 n:u64 d:u32 dtype:u8   then n*d binary32, row-major

Checkpoint (magic ``ATSM``)::

    magic[4] version:u32 d:u32 m:u32 config_len:u32 config[config_len]
    then W_enc (m*d), b_enc (m), W_dec (d*m), b_pre (d) as binary32, row-major

    ``config`` is UTF-8 ``key=value`` lines echoing every TrainConfig field.

Sparse codes (magic ``ATSC``)::

    magic[4] version:u32 n:u64 m:u32
    then per row: nnz:u32 indices:u32[nnz] coefficients:binary32[nnz]

Planted dictionary (magic ``ATSD``)::

    magic[4] version:u32 d:u32 p:u32 seed:u64
    then atoms (d*p), offset (d), frequencies (p) as binary64, row-major

All writes go to a temporary file in the target directory and are renamed
into place.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .domain import (
    AttrSaeError,
    ConfigError,
    DimensionMismatch,
    SaeModel,
    SparseCode,
    TrainConfig,
)
from .synth import PlantedDictionary

VERSION = 1
DTYPE_F32 = 0

_EMB_HEADER = struct.Struct("<4sIQIB")
_CKPT_HEADER = struct.Struct("<4sIIII")
_CODES_HEADER = struct.Struct("<4sIQI")
_DICT_HEADER = struct.Struct("<4sIIIQ")
_F32 = np.dtype("<f4")
_F64 = np.dtype("<f8")
_U32 = np.dtype("<u4")


class FormatError(AttrSaeError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class ConfigParseError(FormatError, ConfigError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e


def _header(buf: bytes, st: struct.Struct, magic: bytes, path) -> tuple:
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagic(f"{path}: expected magic {magic.decode()}, got {buf[:4]!r}")
    if len(buf) < st.size:
        raise TruncatedPayload(f"{path}: header truncated")
    fields = st.unpack_from(buf)
    if fields[1] != VERSION:
        raise UnsupportedVersion(f"{path}: unsupported version {fields[1]}")
    return fields


def _take(buf: bytes, offset: int, dtype: np.dtype, count: int, path) -> tuple[np.ndarray, int]:
    end = offset + count * dtype.itemsize
    if end > len(buf):
        raise TruncatedPayload(f"{path}: payload truncated at byte {len(buf)}, need {end}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset), end


def _f32_bytes(a) -> bytes:
    return np.ascontiguousarray(a, dtype=_F32).tobytes()


# embeddings


def embeddings_to_bytes(batch) -> bytes:
    batch = np.asarray(batch)
    if batch.ndim != 2:
        raise DimensionMismatch(f"embeddings must be 2-D, got shape {batch.shape}")
    n, d = batch.shape
    return _EMB_HEADER.pack(b"ATSE", VERSION, n, d, DTYPE_F32) + _f32_bytes(batch)


def write_embeddings(path, batch) -> None:
    atomic_write(path, embeddings_to_bytes(batch))


def read_embeddings(path) -> np.ndarray:
    """Read an (n, d) float32 array."""
    buf = _read(path)
    _, _, n, d, dtype = _header(buf, _EMB_HEADER, b"ATSE", path)
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    payload = len(buf) - _EMB_HEADER.size
    if payload != n * d * 4:
        raise TruncatedPayload(f"{path}: header declares {n}x{d} rows, payload has {payload} bytes")
    arr, _ = _take(buf, _EMB_HEADER.size, _F32, n * d, path)
    return arr.reshape(n, d).astype(np.float32)


def import_npy(npy_path, out_path) -> np.ndarray:
    """Convert a 2-D (or 1-D, treated as one row) .npy array to ATSE."""
    arr = np.load(npy_path, allow_pickle=False)
    arr = np.atleast_2d(arr)
    if arr.ndim != 2:
        arr = arr.reshape(-1, arr.shape[-1])
    write_embeddings(out_path, arr)
    return arr


# checkpoints


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, float):
            value = repr(value)
        elif value is None:
            value = "none"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or key not in types:
            raise ConfigParseError(f"config line {lineno}: cannot parse {line!r}")
        raw = raw.strip()
        kind = types[key]
        try:
            if kind == "bool":
                if raw not in ("True", "False"):
                    raise ValueError(raw)
                kwargs[key] = raw == "True"
            elif kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            elif kind == "int | None":
                kwargs[key] = None if raw == "none" else int(raw)
            else:
                raise ValueError(kind)
        except ValueError as e:
            raise ConfigParseError(f"config line {lineno}: bad value for {key}: {raw!r}") from e
    try:
        return TrainConfig(**kwargs)
    except ConfigError as e:
        raise ConfigParseError(str(e)) from e


def checkpoint_to_bytes(model: SaeModel, cfg: TrainConfig) -> bytes:
    text = config_to_text(cfg).encode("utf-8")
    return b"".join(
        [
            _CKPT_HEADER.pack(b"ATSM", VERSION, model.d, model.m, len(text)),
            text,
            _f32_bytes(model.W_enc),
            _f32_bytes(model.b_enc),
            _f32_bytes(model.W_dec),
            _f32_bytes(model.b_pre),
        ]
    )


def save_checkpoint(path, model: SaeModel, cfg: TrainConfig) -> None:
    atomic_write(path, checkpoint_to_bytes(model, cfg))


def load_checkpoint(path) -> tuple[SaeModel, TrainConfig]:
    """Parameters come back as float32 arrays."""
    buf = _read(path)
    _, _, d, m, clen = _header(buf, _CKPT_HEADER, b"ATSM", path)
    off = _CKPT_HEADER.size
    expected = off + clen + 4 * (2 * m * d + m + d)
    if len(buf) != expected:
        raise TruncatedPayload(f"{path}: expected {expected} bytes, found {len(buf)}")
    try:
        cfg = config_from_text(buf[off : off + clen].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise ConfigParseError(f"{path}: config block is not UTF-8") from e
    off += clen
    W_enc, off = _take(buf, off, _F32, m * d, path)
    b_enc, off = _take(buf, off, _F32, m, path)
    W_dec, off = _take(buf, off, _F32, d * m, path)
    b_pre, off = _take(buf, off, _F32, d, path)
    model = SaeModel(
        W_enc=W_enc.reshape(m, d).astype(np.float32),
        b_enc=b_enc.astype(np.float32),
        W_dec=W_dec.reshape(d, m).astype(np.float32),
        b_pre=b_pre.astype(np.float32),
    )
    return model, cfg


# sparse codes


def codes_to_bytes(codes: list[SparseCode], m: int) -> bytes:
    parts = [_CODES_HEADER.pack(b"ATSC", VERSION, len(codes), m)]
    for c in codes:
        if c.m != m:
            raise DimensionMismatch(f"code has m={c.m}, file has m={m}")
        parts.append(struct.pack("<I", c.nnz))
        parts.append(np.asarray(c.indices, dtype=_U32).tobytes())
        parts.append(_f32_bytes(c.coefficients))
    return b"".join(parts)


def write_codes(path, codes: list[SparseCode], m: int) -> None:
    atomic_write(path, codes_to_bytes(codes, m))


def read_codes(path) -> tuple[list[SparseCode], int]:
    buf = _read(path)
    _, _, n, m = _header(buf, _CODES_HEADER, b"ATSC", path)
    off = _CODES_HEADER.size
    codes = []
    for _ in range(n):
        (nnz,), off = _take(buf, off, _U32, 1, path)
        idx, off = _take(buf, off, _U32, int(nnz), path)
        coef, off = _take(buf, off, _F32, int(nnz), path)
        try:
            codes.append(SparseCode(idx.astype(np.int64), coef.astype(np.float32), m))
        except ValueError as e:
            raise FormatError(f"{path}: invalid sparse code: {e}") from e
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return codes, m


# planted dictionaries


def write_dictionary(path, dictionary: PlantedDictionary) -> None:
    d, p = dictionary.atoms.shape
    data = b"".join(
        [
            _DICT_HEADER.pack(b"ATSD", VERSION, d, p, dictionary.seed),
            np.ascontiguousarray(dictionary.atoms, dtype=_F64).tobytes(),
            np.ascontiguousarray(dictionary.offset, dtype=_F64).tobytes(),
            np.ascontiguousarray(dictionary.frequencies, dtype=_F64).tobytes(),
        ]
    )
    atomic_write(path, data)


def read_dictionary(path) -> PlantedDictionary:
    buf = _read(path)
    _, _, d, p, seed = _header(buf, _DICT_HEADER, b"ATSD", path)
    off = _DICT_HEADER.size
    if len(buf) != off + 8 * (d * p + d + p):
        raise TruncatedPayload(f"{path}: size does not match header")
    atoms, off = _take(buf, off, _F64, d * p, path)
    offset, off = _take(buf, off, _F64, d, path)
    freqs, off = _take(buf, off, _F64, p, path)
    return PlantedDictionary(
        atoms.reshape(d, p).astype(np.float64),
        offset.astype(np.float64),
        freqs.astype(np.float64),
        int(seed),
    )

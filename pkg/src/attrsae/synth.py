"""Planted sparse dictionaries, synthetic corpora and recovery scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import encode_batch
from .domain import DimensionMismatch, SaeModel, SparseCode


@dataclass(frozen=True, eq=False)
class PlantedDictionary:
    atoms: np.ndarray  # (d, p), unit-norm columns
    offset: np.ndarray  # (d,)
    frequencies: np.ndarray  # (p,), sums to 1
    seed: int

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise DimensionMismatch("atoms must be a (d, p) matrix")
        if self.offset.shape != (atoms.shape[0],) or self.frequencies.shape != (atoms.shape[1],):
            raise DimensionMismatch("offset / frequencies do not match atoms")
        if not np.allclose(np.linalg.norm(atoms, axis=0), 1.0, rtol=0, atol=1e-9):
            raise ValueError("atoms must have unit norm")
        if abs(self.frequencies.sum() - 1.0) > 1e-9 or np.any(self.frequencies < 0):
            raise ValueError("frequencies must be a probability vector")

    @property
    def d(self) -> int:
        return self.atoms.shape[0]

    @property
    def p(self) -> int:
        return self.atoms.shape[1]

    def pairwise_abs_cosines(self) -> np.ndarray:
        G = np.abs(self.atoms.T @ self.atoms)
        return G[np.triu_indices(self.p, k=1)]

    def max_abs_cosine(self) -> float:
        c = self.pairwise_abs_cosines()
        return float(c.max()) if c.size else 0.0

    def __eq__(self, other):
        if not isinstance(other, PlantedDictionary):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.atoms, other.atoms)
            and np.array_equal(self.offset, other.offset)
            and np.array_equal(self.frequencies, other.frequencies)
        )


def zipf_frequencies(p: int, skew: float) -> np.ndarray:
    w = (np.arange(p) + 1.0) ** (-float(skew))
    return w / w.sum()


def gen_dictionary(
    d: int,
    p: int,
    skew: float = 0.0,
    seed: int = 0,
    orthogonal: bool = False,
    offset_scale: float = 1.0,
) -> PlantedDictionary:
    """Isotropic random unit atoms with frequencies proportional to (i+1)^-skew.

    ``orthogonal`` orthonormalises the atoms (needs p <= d). The offset is an
    isotropic random direction of norm ``offset_scale``.
    """
    if p < 1 or d < 2:
        raise ValueError("need p >= 1 and d >= 2")
    if skew < 0:
        raise ValueError("skew must be nonnegative")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((d, p))
    if orthogonal:
        if p > d:
            raise ValueError("orthogonal atoms need p <= d")
        Q, R = np.linalg.qr(G)
        atoms = Q * np.sign(np.diag(R))
    else:
        atoms = G
    atoms = atoms / np.linalg.norm(atoms, axis=0, keepdims=True)
    g = rng.standard_normal(d)
    offset = offset_scale * g / np.linalg.norm(g)
    return PlantedDictionary(atoms, offset, zipf_frequencies(p, skew), int(seed))


def _sample_supports(rng, freqs: np.ndarray, n: int, s: int) -> np.ndarray:
    # Gumbel top-s: equivalent to drawing s atoms in sequence without
    # replacement, each with probability proportional to its frequency.
    with np.errstate(divide="ignore"):
        keys = np.log(freqs)[None, :] + rng.gumbel(size=(n, freqs.shape[0]))
    return np.sort(np.argsort(-keys, axis=1, kind="stable")[:, :s], axis=1)


def gen_corpus(
    dictionary: PlantedDictionary,
    s: int,
    n: int,
    noise_sigma: float = 0.0,
    coeff_range: tuple[float, float] = (0.5, 2.0),
    seed: int = 0,
) -> tuple[np.ndarray, list[SparseCode]]:
    """Rows = offset + sum of s frequency-sampled atoms + N(0, noise_sigma^2) noise.

    Returns the (n, d) float64 corpus and each row's ground-truth code over
    the p atoms.
    """
    p = dictionary.p
    if not 1 <= s <= p:
        raise ValueError(f"need 1 <= s <= p (s={s}, p={p})")
    lo, hi = coeff_range
    if not 0 < lo <= hi:
        raise ValueError("coeff_range must be positive with lo <= hi")
    rng = np.random.default_rng(seed)
    support = _sample_supports(rng, dictionary.frequencies, n, s)
    coeffs = rng.uniform(lo, hi, size=(n, s)) if hi > lo else np.full((n, s), float(lo))
    C = np.zeros((n, p))
    np.put_along_axis(C, support, coeffs, axis=1)
    X = dictionary.offset + C @ dictionary.atoms.T
    if noise_sigma > 0:
        X = X + noise_sigma * rng.standard_normal(X.shape)
    codes = [SparseCode(support[i], coeffs[i], p) for i in range(n)]
    return X, codes


def codes_to_dense(codes: list[SparseCode]) -> np.ndarray:
    if not codes:
        return np.zeros((0, 0))
    C = np.zeros((len(codes), codes[0].m))
    for i, c in enumerate(codes):
        C[i, c.indices] = c.coefficients
    return C


@dataclass(frozen=True)
class RecoveryReport:
    matching: list[tuple[int, int, float]]  # (true atom, learned column, |cos|)
    mean_abs_cosine: float
    recovered_count: int
    dead_fraction: float | None
    threshold: float

    def lines(self) -> list[str]:
        out = [
            f"mean_abs_cosine={self.mean_abs_cosine:.6f}",
            f"recovered_count={self.recovered_count}",
            f"matched={len(self.matching)}",
            f"threshold={self.threshold:g}",
        ]
        if self.dead_fraction is not None:
            out.append(f"dead_fraction={self.dead_fraction:.6f}")
        return out


def cosine_matrix(atoms: np.ndarray, W_dec: np.ndarray, signed: bool = False) -> np.ndarray:
    """(p, m) cosines between true atoms and learned decoder columns."""
    cols = np.asarray(W_dec, dtype=np.float64)
    norms = np.linalg.norm(cols, axis=0)
    cols = cols / np.where(norms > 0, norms, 1)
    a = atoms / np.linalg.norm(atoms, axis=0, keepdims=True)
    C = a.T @ cols
    return C if signed else np.abs(C)


def greedy_match(scores: np.ndarray) -> list[tuple[int, int, float]]:
    """Repeatedly take the highest-scoring (row, col) pair and retire both.

    Ties resolve to the lowest row, then lowest column.
    """
    S = np.array(scores, dtype=np.float64)
    pairs = []
    for _ in range(min(S.shape)):
        i, j = np.unravel_index(np.argmax(S), S.shape)
        pairs.append((int(i), int(j), float(scores[i, j])))
        S[i, :] = -np.inf
        S[:, j] = -np.inf
    return sorted(pairs)


def dead_fraction_on(model: SaeModel, data, k: int) -> float:
    """Fraction of latents that never enter a top-k support on ``data``."""
    fired = np.zeros(model.m, bool)
    data = np.asarray(data)
    for start in range(0, data.shape[0], 8192):
        fired |= encode_batch(model, data[start : start + 8192], k).any(axis=0)
    return float(1.0 - fired.mean())


def match_atoms(
    learned: SaeModel,
    dictionary: PlantedDictionary,
    threshold: float = 0.9,
    signed: bool = False,
    data=None,
    k: int | None = None,
) -> RecoveryReport:
    """Greedy atom-to-decoder-column matching graded by |cosine|.

    ``dead_fraction`` is filled in only when ``data`` and ``k`` are given.
    """
    if learned.d != dictionary.d:
        raise DimensionMismatch(f"model d={learned.d} vs dictionary d={dictionary.d}")
    pairs = greedy_match(cosine_matrix(dictionary.atoms, learned.W_dec, signed))
    scores = np.array([c for _, _, c in pairs])
    dead = None
    if data is not None and k is not None:
        dead = dead_fraction_on(learned, data, k)
    return RecoveryReport(
        matching=pairs,
        mean_abs_cosine=float(scores.mean()) if scores.size else 0.0,
        recovered_count=int((scores >= threshold).sum()),
        dead_fraction=dead,
        threshold=float(threshold),
    )


def matched_columns(
    learned: SaeModel, dictionary: PlantedDictionary, threshold: float = 0.9
) -> list[set[int]]:
    """Per atom: its greedy match plus every column with |cos| >= threshold."""
    C = cosine_matrix(dictionary.atoms, learned.W_dec)
    sets = [set(np.flatnonzero(row >= threshold).tolist()) for row in C]
    for i, j, _ in greedy_match(C):
        sets[i].add(j)
    return sets


def disentanglement_score(
    model: SaeModel,
    dictionary: PlantedDictionary,
    probe_count: int,
    k: int,
    seed: int = 0,
    threshold: float = 0.9,
    coeff_range: tuple[float, float] = (0.5, 2.0),
) -> float:
    """Mean support purity of single-atom probes.

    For every atom, ``probe_count`` inputs offset + c * atom are encoded; the
    purity of one probe is the share of its active latents that belong to
    the atom's matched columns (an empty code scores 0).
    """
    if model.d != dictionary.d:
        raise DimensionMismatch(f"model d={model.d} vs dictionary d={dictionary.d}")
    rng = np.random.default_rng(seed)
    owned = matched_columns(model, dictionary, threshold)
    purities = []
    for j in range(dictionary.p):
        c = rng.uniform(*coeff_range, size=probe_count)
        probes = dictionary.offset + c[:, None] * dictionary.atoms[:, j]
        active = encode_batch(model, probes.astype(model.dtype), k) > 0
        hits = active[:, sorted(owned[j])].sum(axis=1)
        nnz = active.sum(axis=1)
        purities.append(np.where(nnz > 0, hits / np.maximum(nnz, 1), 0.0))
    return float(np.mean(purities))

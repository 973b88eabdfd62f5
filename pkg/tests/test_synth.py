import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrsae.domain import DimensionMismatch, SaeModel
from attrsae.synth import (
    PlantedDictionary,
    codes_to_dense,
    disentanglement_score,
    gen_corpus,
    gen_dictionary,
    greedy_match,
    match_atoms,
    zipf_frequencies,
)
from oracles import exhaustive_assignment

# Frozen from gen_dictionary(64, 32, seed=7); guards against silent RNG drift.
SEED7_MAX_ABS_COS = 0.42027421358708894


def model_from_columns(W_dec, b_pre=None):
    d, m = W_dec.shape
    b_pre = np.zeros(d) if b_pre is None else b_pre
    return SaeModel(W_dec.T.copy(), np.zeros(m), W_dec, b_pre)


def perfect_model(dictionary):
    # orthonormal atoms: encoder = decoder^T recovers every coefficient
    A = dictionary.atoms
    return SaeModel(A.T.copy(), np.full(dictionary.p, -1e-9), A, dictionary.offset)


# gen_dictionary


def test_uniform_frequencies_without_skew():
    D = gen_dictionary(16, 10, skew=0.0, seed=0)
    np.testing.assert_allclose(D.frequencies, 0.1, rtol=1e-12)


def test_zipf_frequencies_decay():
    f = zipf_frequencies(5, 1.5)
    assert f.sum() == pytest.approx(1.0)
    assert np.all(np.diff(f) < 0)
    assert f[0] / f[1] == pytest.approx(2**1.5)


def test_orthogonal_small_dictionary():
    D = gen_dictionary(2, 2, seed=3, orthogonal=True)
    assert D.max_abs_cosine() <= 1e-9
    np.testing.assert_allclose(np.linalg.norm(D.atoms, axis=0), 1.0, atol=1e-12)


def test_random_dictionary_coherence_fixture():
    D = gen_dictionary(64, 32, seed=7)
    assert D.max_abs_cosine() < 0.5
    assert D.max_abs_cosine() == pytest.approx(SEED7_MAX_ABS_COS, rel=1e-12)
    assert np.linalg.norm(D.offset) == pytest.approx(1.0)


def test_dictionary_determinism_and_validation():
    assert gen_dictionary(8, 4, seed=1) == gen_dictionary(8, 4, seed=1)
    assert gen_dictionary(8, 4, seed=1) != gen_dictionary(8, 4, seed=2)
    with pytest.raises(ValueError):
        gen_dictionary(4, 5, orthogonal=True)
    with pytest.raises(ValueError):
        gen_dictionary(4, 2, skew=-1)
    with pytest.raises(ValueError):
        PlantedDictionary(2 * np.eye(3), np.zeros(3), np.full(3, 1 / 3), 0)


# gen_corpus


def test_single_atom_fixed_coefficient_rows():
    D = gen_dictionary(8, 5, seed=0)
    X, codes = gen_corpus(D, s=1, n=50, coeff_range=(1.0, 1.0), seed=2)
    for x, c in zip(X, codes):
        (j,) = c.indices
        np.testing.assert_array_equal(x, D.offset + 1.0 * D.atoms[:, j])


def test_noiseless_rows_lie_in_support_span():
    D = gen_dictionary(32, 16, seed=1)
    X, codes = gen_corpus(D, s=3, n=200, seed=5)
    for x, c in zip(X, codes):
        basis = D.atoms[:, c.indices]
        coef, *_ = np.linalg.lstsq(basis, x - D.offset, rcond=None)
        assert np.linalg.norm(x - D.offset - basis @ coef) <= 1e-9
        assert c.nnz == 3
        assert np.all((c.coefficients >= 0.5) & (c.coefficients <= 2.0))


def test_ground_truth_codes_reconstruct_rows():
    D = gen_dictionary(32, 16, seed=1)
    X, codes = gen_corpus(D, s=4, n=300, seed=6)
    X_hat = D.offset + codes_to_dense(codes) @ D.atoms.T
    assert np.abs(X - X_hat).max() <= 1e-9


def test_noise_level():
    D = gen_dictionary(64, 16, seed=2)
    clean, _ = gen_corpus(D, s=2, n=2000, seed=9)
    noisy, _ = gen_corpus(D, s=2, n=2000, noise_sigma=0.1, seed=9)
    # same seed: supports and coefficients are drawn before the noise
    assert np.std(noisy - clean) == pytest.approx(0.1, rel=0.02)


def test_support_frequencies_follow_skew():
    D = gen_dictionary(16, 4, skew=1.0, seed=0)
    _, codes = gen_corpus(D, s=1, n=40_000, seed=1)
    counts = np.bincount([int(c.indices[0]) for c in codes], minlength=4) / 40_000
    np.testing.assert_allclose(counts, D.frequencies, atol=0.01)


def test_corpus_generation_speed():
    D = gen_dictionary(64, 32, seed=0)
    t0 = time.perf_counter()
    X, codes = gen_corpus(D, s=3, n=50_000, noise_sigma=0.01, seed=1)
    assert time.perf_counter() - t0 < 10.0
    assert X.shape == (50_000, 64) and len(codes) == 50_000


def test_corpus_validation():
    D = gen_dictionary(8, 4)
    with pytest.raises(ValueError):
        gen_corpus(D, s=5, n=10)
    with pytest.raises(ValueError):
        gen_corpus(D, s=1, n=10, coeff_range=(2.0, 1.0))


# matching


def test_exact_copies_fully_recovered():
    D = gen_dictionary(16, 8, seed=4)
    rep = match_atoms(model_from_columns(D.atoms.copy()), D)
    assert rep.mean_abs_cosine == pytest.approx(1.0)
    assert rep.recovered_count == 8
    assert [(i, j) for i, j, _ in rep.matching] == [(i, i) for i in range(8)]


def test_orthogonal_columns_score_zero():
    eye = np.eye(8)
    D = PlantedDictionary(eye[:, :4], np.zeros(8), np.full(4, 0.25), 0)
    rep = match_atoms(model_from_columns(eye[:, 4:].copy()), D)
    assert rep.mean_abs_cosine == pytest.approx(0.0, abs=1e-12)
    assert rep.recovered_count == 0


def _hand_instance():
    # atoms e0..e2; columns hit them at 0.95, 0.9, 0.8 plus a 0.85 decoy on atom 1
    e = np.eye(8)
    mix = lambda c, a, b: c * e[:, a] + np.sqrt(1 - c * c) * e[:, b]  # noqa: E731
    W = np.stack([mix(0.95, 0, 4), mix(0.9, 1, 5), mix(0.8, 2, 6), mix(0.85, 1, 7)], axis=1)
    D = PlantedDictionary(e[:, :3], np.zeros(8), np.full(3, 1 / 3), 0)
    return D, model_from_columns(W)


def test_hand_instance_greedy_matches_optimal():
    from scipy.optimize import linear_sum_assignment

    D, model = _hand_instance()
    rep = match_atoms(model, D, threshold=0.9)
    assert [(i, j) for i, j, _ in rep.matching] == [(0, 0), (1, 1), (2, 2)]
    np.testing.assert_allclose([c for *_, c in rep.matching], [0.95, 0.9, 0.8], rtol=1e-12)
    assert rep.mean_abs_cosine == pytest.approx((0.95 + 0.9 + 0.8) / 3, rel=1e-12)
    assert rep.recovered_count == 2

    C = np.abs(D.atoms.T @ model.W_dec)
    cols, _ = exhaustive_assignment(C)
    rows, hung = linear_sum_assignment(C, maximize=True)
    assert list(cols) == [j for _, j, _ in rep.matching] == hung.tolist()


def test_greedy_tie_break():
    assert greedy_match(np.ones((2, 3))) == [(0, 0, 1.0), (1, 1, 1.0)]


def test_match_dimension_mismatch():
    D = gen_dictionary(8, 4)
    with pytest.raises(DimensionMismatch):
        match_atoms(model_from_columns(np.eye(6)), D)


def test_match_reports_dead_fraction_when_data_given():
    D = gen_dictionary(16, 4, seed=0, orthogonal=True)
    model = perfect_model(D)
    X, _ = gen_corpus(D, s=1, n=400, seed=1)
    rep = match_atoms(model, D, data=X, k=1)
    assert rep.dead_fraction == 0.0
    assert "dead_fraction=0.000000" in rep.lines()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_matching_invariant_under_column_permutation(seed):
    rng = np.random.default_rng(seed)
    D = gen_dictionary(12, 5, seed=int(rng.integers(1000)))
    W = rng.normal(size=(12, 9))
    base = match_atoms(model_from_columns(W), D)
    perm = rng.permutation(9)
    moved = match_atoms(model_from_columns(W[:, perm]), D)
    assert moved.mean_abs_cosine == pytest.approx(base.mean_abs_cosine, rel=1e-12)
    assert moved.recovered_count == base.recovered_count


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_recovered_count_monotone_in_threshold(seed, t1, t2):
    rng = np.random.default_rng(seed)
    D = gen_dictionary(6, 4, seed=int(rng.integers(1000)))
    model = model_from_columns(D.atoms + 0.5 * rng.normal(size=(6, 4)))
    lo, hi = sorted((t1, t2))
    assert match_atoms(model, D, lo).recovered_count >= match_atoms(model, D, hi).recovered_count


# disentanglement


def test_perfect_model_is_fully_disentangled():
    D = gen_dictionary(32, 8, seed=2, orthogonal=True)
    assert disentanglement_score(perfect_model(D), D, probe_count=20, k=4) == 1.0


def test_random_model_scores_low():
    D = gen_dictionary(64, 8, seed=2)
    rng = np.random.default_rng(0)
    W = rng.normal(size=(64, 512))
    W /= np.linalg.norm(W, axis=0)
    model = SaeModel(W.T.copy(), np.zeros(512), W, D.offset)
    # the best-aligned random column usually lands in the top-k, so about 1/k
    assert disentanglement_score(model, D, probe_count=20, k=4) <= 0.3

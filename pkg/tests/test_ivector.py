import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asrtl.gmm import DiagGmm
from asrtl.ivector import (BaumWelchStats, IvectorExtractor, accumulate_stats, extract_from_stats,
                           extract_ivector, read_ivectors, train_total_variability, write_ivectors)


def random_ubm(rng, M, F):
    w = rng.uniform(0.5, 1.5, M)
    return DiagGmm(w / w.sum(), rng.standard_normal((M, F)) * 2, rng.uniform(0.5, 2.0, (M, F)))


def dense_ivector(ex, stats):
    """Closed form with explicit supervector-sized matrices."""
    M, F = ex.ubm.means.shape
    N = np.kron(np.diag(stats.n), np.eye(F))
    Sinv = np.diag(1.0 / ex.ubm.variances.ravel())
    T = ex.T
    L = np.eye(T.shape[1]) + T.T @ Sinv @ N @ T
    return np.linalg.solve(L, T.T @ Sinv @ stats.f.ravel())


def test_single_component_occupancy():
    ubm = DiagGmm(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)))
    x = np.random.default_rng(0).standard_normal((17, 2))
    s = accumulate_stats(ubm, x)
    assert s.n[0] == pytest.approx(17)
    np.testing.assert_allclose(s.f[0], x.sum(axis=0))


def test_stats_at_mean_are_centered():
    ubm = DiagGmm(np.array([0.5, 0.5]), np.array([[-10.0], [10.0]]), np.ones((2, 1)))
    s = accumulate_stats(ubm, np.full((5, 1), 10.0))
    assert abs(s.f[1, 0]) < 1e-9


def test_stats_additive_and_total_count():
    rng = np.random.default_rng(1)
    ubm = random_ubm(rng, 3, 2)
    x = rng.standard_normal((20, 2))
    s1 = accumulate_stats(ubm, x)
    s2 = accumulate_stats(ubm, np.vstack([x, x]))
    np.testing.assert_allclose(s2.n, 2 * s1.n)
    np.testing.assert_allclose(s2.f, 2 * s1.f)
    assert s1.n.sum() == pytest.approx(20, abs=1e-6)
    np.testing.assert_allclose((s1 + s1).n, s1.scaled(2).n)


def test_stats_dim_mismatch():
    ubm = DiagGmm(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        accumulate_stats(ubm, np.zeros((3, 3)))


def test_scalar_closed_form():
    ubm = DiagGmm(np.ones(1), np.zeros((1, 1)), np.ones((1, 1)))
    ex = IvectorExtractor(ubm, np.array([[2.0]]))
    w = extract_from_stats(ex, BaumWelchStats(np.array([3.0]), np.array([[6.0]])))
    assert w[0] == pytest.approx(12 / 13, abs=1e-12)
    w2 = extract_from_stats(ex, BaumWelchStats(np.array([6.0]), np.array([[12.0]])))
    assert abs(w2[0]) >= abs(w[0])


def test_zero_stats_zero_ivector():
    rng = np.random.default_rng(2)
    ubm = random_ubm(rng, 2, 2)
    ex = IvectorExtractor(ubm, rng.standard_normal((4, 3)))
    np.testing.assert_array_equal(extract_from_stats(ex, BaumWelchStats(np.array([3.0, 1.0]), np.zeros((2, 2)))), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
def test_matches_dense_solve(seed, M, F, D):
    rng = np.random.default_rng(seed)
    ubm = random_ubm(rng, M, F)
    ex = IvectorExtractor(ubm, rng.standard_normal((M * F, D)))
    stats = BaumWelchStats(rng.uniform(0, 10, M), rng.standard_normal((M, F)) * 3)
    assert np.max(np.abs(extract_from_stats(ex, stats) - dense_ivector(ex, stats))) < 1e-8


def test_concatenation_equals_doubled_stats():
    rng = np.random.default_rng(3)
    ubm = random_ubm(rng, 3, 2)
    ex = IvectorExtractor(ubm, rng.standard_normal((6, 2)))
    x = rng.standard_normal((15, 2))
    np.testing.assert_allclose(extract_ivector(ex, np.vstack([x, x])),
                               extract_from_stats(ex, accumulate_stats(ubm, x).scaled(2)), atol=1e-10)


def test_extractor_validation():
    ubm = DiagGmm(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        IvectorExtractor(ubm, np.zeros((3, 1)))
    with pytest.raises(ValueError):
        IvectorExtractor(ubm, np.full((2, 1), np.nan))


def test_recovers_known_subspace():
    rng = np.random.default_rng(4)
    ubm = DiagGmm(np.ones(1), np.zeros((1, 1)), np.ones((1, 1)))
    t_true = 1.5
    stats = []
    for _ in range(60):
        lam = rng.standard_normal()
        x = lam * t_true + rng.standard_normal((80, 1)) * 0.5
        stats.append(accumulate_stats(ubm, x))
    ex = train_total_variability(stats, ubm, 1, iters=10, seed=5)
    cos = abs(ex.T[0, 0] * t_true) / (np.linalg.norm(ex.T) * t_true)
    assert cos > 0.95


def test_recovers_multidim_subspace_direction():
    rng = np.random.default_rng(6)
    ubm = DiagGmm(np.ones(1), np.zeros((1, 3)), np.ones((1, 3)))
    t_true = np.array([1.0, -2.0, 0.5])
    stats = [accumulate_stats(ubm, rng.standard_normal() * t_true + rng.standard_normal((50, 3)) * 0.3)
             for _ in range(50)]
    ex = train_total_variability(stats, ubm, 1, iters=10, seed=7)
    t = ex.T[:, 0]
    assert abs(t @ t_true) / (np.linalg.norm(t) * np.linalg.norm(t_true)) > 0.95


def test_zero_iterations_returns_init():
    rng = np.random.default_rng(8)
    ubm = random_ubm(rng, 2, 2)
    stats = [accumulate_stats(ubm, rng.standard_normal((10, 2))) for _ in range(4)]
    ex = train_total_variability(stats, ubm, 3, iters=0, seed=11)
    np.testing.assert_array_equal(ex.T, 0.1 * np.random.default_rng(11).standard_normal((4, 3)))


def test_objective_non_decreasing_and_deterministic():
    rng = np.random.default_rng(9)
    ubm = random_ubm(rng, 3, 2)
    stats = [accumulate_stats(ubm, rng.standard_normal((30, 2)) + rng.standard_normal(2)) for _ in range(25)]
    ex, hist = train_total_variability(stats, ubm, 2, iters=10, seed=1, return_history=True)
    assert len(hist) == 11
    assert np.all(np.diff(hist) >= -1e-6)
    ex2 = train_total_variability(stats, ubm, 2, iters=10, seed=1)
    assert np.array_equal(ex.T, ex2.T)


def test_too_few_utterances():
    ubm = DiagGmm(np.ones(1), np.zeros((1, 1)), np.ones((1, 1)))
    stats = [BaumWelchStats(np.ones(1), np.zeros((1, 1)))]
    with pytest.raises(ValueError):
        train_total_variability(stats, ubm, 2)


def test_serialization(tmp_path):
    rng = np.random.default_rng(10)
    ubm = random_ubm(rng, 2, 3)
    ex = IvectorExtractor(ubm, rng.standard_normal((6, 2)))
    p = str(tmp_path / "x.ivx")
    ex.save(p)
    back = IvectorExtractor.load(p)
    x = rng.standard_normal((9, 3))
    np.testing.assert_array_equal(back.extract(x), ex.extract(x))
    ivs = {"a": np.array([0.1, -2.0]), "b": np.array([3.0, 4.5])}
    tp = str(tmp_path / "iv.txt")
    write_ivectors(tp, ivs)
    back_iv = read_ivectors(tp)
    for k in ivs:
        np.testing.assert_array_equal(back_iv[k], ivs[k])

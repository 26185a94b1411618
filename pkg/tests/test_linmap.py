import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import orthogonal_procrustes

from xlmap.linmap import (MappingMatrix, RankDeficientError, apply_map, frobenius_objective,
                          least_squares_map, load_mapping, load_mapping_binary, orthogonalize_step,
                          polar_factor, procrustes, save_mapping, save_mapping_binary)
from xlmap.synthgen import random_orthogonal


def planted(p=200, d=10, seed=0, sigma=0.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((p, d))
    r = random_orthogonal(d, rng)
    y = x @ r.T + sigma * rng.standard_normal((p, d))
    return x, y, r


def test_procrustes_recovers_rotation():
    x, y, r = planted()
    w = procrustes(x, y)
    assert np.linalg.norm(w.w - r) <= 1e-10
    assert w.meta["objective"] <= 1e-10
    assert not w.meta["rank_deficient"]


def test_procrustes_matches_scipy_oracle():
    x, y, _ = planted(sigma=0.3, seed=5)
    oracle, _ = orthogonal_procrustes(x, y)  # minimizes ||x R - y||, so R = W^T
    np.testing.assert_allclose(procrustes(x, y).w, oracle.T, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_procrustes_scale_invariant_and_orthogonal(seed, c):
    x, y, _ = planted(p=40, d=6, seed=seed, sigma=0.5)
    w = procrustes(x, y)
    np.testing.assert_allclose(w.w @ w.w.T, np.eye(6), atol=1e-10)
    np.testing.assert_allclose(procrustes(c * x, y).w, w.w, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_procrustes_beats_random_orthogonal(seed):
    x, y, _ = planted(p=40, d=6, seed=seed, sigma=0.5)
    w = procrustes(x, y)
    q = random_orthogonal(6, np.random.default_rng(seed + 1))
    assert frobenius_objective(w, x, y) <= frobenius_objective(q, x, y) + 1e-9


def test_procrustes_flags_rank_deficiency():
    x = np.zeros((5, 3))
    x[:, 0] = 1.0
    w = procrustes(x, x)
    assert w.meta["rank_deficient"]
    np.testing.assert_allclose(w.w @ w.w.T, np.eye(3), atol=1e-10)


def test_least_squares_matches_lstsq():
    x, y, _ = planted(sigma=0.2, seed=2)
    w = least_squares_map(x, y)
    ref = np.linalg.lstsq(x, y, rcond=None)[0].T
    np.testing.assert_allclose(w.w, ref, atol=1e-10)
    assert w.meta["residual"] == pytest.approx(frobenius_objective(ref, x, y))


def test_least_squares_rejects_singular():
    x = np.ones((20, 4))
    with pytest.raises(RankDeficientError):
        least_squares_map(x, x)
    with pytest.raises(RankDeficientError):
        least_squares_map(np.eye(3)[:2], np.eye(3)[:2])


def test_shape_mismatch():
    with pytest.raises(ValueError):
        procrustes(np.ones((4, 3)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        apply_map(MappingMatrix.identity(3), np.ones((2, 4)))


def test_orthogonalize_fixes_orthogonal_matrix():
    q = random_orthogonal(8, np.random.default_rng(0))
    m = MappingMatrix(q)
    np.testing.assert_allclose(orthogonalize_step(m).w, q, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50))
def test_orthogonalize_keeps_near_orthogonal(seed, steps):
    rng = np.random.default_rng(seed)
    w = random_orthogonal(6, rng) + 0.001 * rng.standard_normal((6, 6))
    m = MappingMatrix(w)
    assert m.is_near_orthogonal(1e-2)
    before = np.abs(m.singular_values() - 1).max()
    for _ in range(steps):
        m = orthogonalize_step(m)
    s = m.singular_values()
    assert np.all(np.abs(s - 1) <= 1e-2)
    assert np.abs(s - 1).max() <= before + 1e-12


def test_orthogonalize_converges_to_polar_factor():
    rng = np.random.default_rng(1)
    w = random_orthogonal(5, rng) @ np.diag([1.05, 0.97, 1.0, 1.02, 0.95])
    m = MappingMatrix(w, beta=0.1)
    for _ in range(2000):
        m = orthogonalize_step(m)
    np.testing.assert_allclose(m.w, polar_factor(w), atol=1e-8)


@pytest.mark.parametrize("save, load", [(save_mapping, load_mapping),
                                        (save_mapping_binary, load_mapping_binary)])
def test_mapping_round_trip_is_exact(tmp_path, save, load):
    rng = np.random.default_rng(7)
    m = MappingMatrix(rng.standard_normal((6, 6)), beta=0.02)
    save(m, tmp_path / "w")
    back = load(tmp_path / "w")
    assert back.w.tobytes() == m.w.tobytes() and back.beta == m.beta
    assert back.fingerprint == m.fingerprint


def test_mapping_is_read_only():
    m = MappingMatrix.identity(3)
    with pytest.raises(ValueError):
        m.w[0, 0] = 2.0


def test_apply_map_single_vector():
    r = random_orthogonal(4, np.random.default_rng(0))
    v = np.arange(4.0)
    np.testing.assert_allclose(apply_map(MappingMatrix(r), v), r @ v)

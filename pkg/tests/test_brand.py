import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bkfac.brand import GeneralLowRank, assemble_core, brand_update, symmetric_brand
from bkfac.errors import DimensionMismatch, RankBudgetExceeded
from bkfac.linalg import LowRankSPSD

from conftest import random_rep


def _dense_eigs(M, k):
    return np.sort(np.linalg.eigvalsh(M))[::-1][:k]


def test_hand_example():
    # e1 e1^T * 2 + e2 e2^T in R^3: eigenvalues {2, 1}, basis {e1, e2}
    L = LowRankSPSD(np.eye(3)[:, :1], [2.0])
    out = symmetric_brand(L, np.array([0.0, 1.0, 0.0]))
    assert np.allclose(out.D, [2.0, 1.0])
    assert np.allclose(out.dense(), np.diag([2.0, 1.0, 0.0]))


def test_core_matches_hand_assembly():
    UtA = np.array([[1.0], [2.0]])
    R_A = np.array([[3.0]])
    D = np.array([5.0, 4.0])
    # [[I, UtA],[0, R_A]] diag(D, 1) [[I, UtA],[0, R_A]]^T, expanded by hand
    expected = np.array([
        [5.0 + 1.0, 2.0, 3.0],
        [2.0, 4.0 + 4.0, 6.0],
        [3.0, 6.0, 9.0],
    ])
    assert np.allclose(assemble_core(UtA, UtA, R_A, R_A, D), expected)


def test_core_dimension_checks():
    with pytest.raises(DimensionMismatch):
        assemble_core(np.zeros((2, 1)), np.zeros((3, 1)), np.eye(1), np.eye(1), np.ones(2))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(8, 64), st.integers(0, 12), st.integers(1, 8),
       st.floats(0.05, 0.99))
def test_symmetric_brand_exact(seed, d, r, n, rho):
    if r + n >= d:
        return
    rng = np.random.default_rng(seed)
    L = random_rep(rng, d, r) if r else LowRankSPSD.empty(d)
    A = rng.standard_normal((d, n))
    out = symmetric_brand(L.scaled(rho), A)
    target = rho * L.dense() + A @ A.T
    assert np.linalg.norm(out.dense() - target) <= 1e-9 * np.linalg.norm(target)
    assert np.allclose(out.D, _dense_eigs(target, out.rank), rtol=1e-9, atol=1e-9 * out.D[0])
    assert out.orthonormality_error() < 1e-9


def test_update_inside_span_is_exact(rng):
    L = random_rep(rng, 20, 5)
    A = L.U[:, :2] @ rng.standard_normal((2, 3))
    out = symmetric_brand(L, A)
    target = L.dense() + A @ A.T
    assert out.rank == 5
    assert np.linalg.norm(out.dense() - target) <= 1e-10 * np.linalg.norm(target)


def test_vector_update_and_zero_update(rng):
    L = random_rep(rng, 10, 3)
    a = rng.standard_normal(10)
    assert np.allclose(symmetric_brand(L, a).dense(), L.dense() + np.outer(a, a))
    same = symmetric_brand(L, np.zeros((10, 2)))
    assert np.allclose(same.dense(), L.dense())


def test_symmetric_brand_errors(rng):
    L = random_rep(rng, 6, 4)
    with pytest.raises(RankBudgetExceeded):
        symmetric_brand(L, rng.standard_normal((6, 2)))
    with pytest.raises(DimensionMismatch):
        symmetric_brand(L, rng.standard_normal((5, 1)))


@pytest.mark.parametrize("m, d, r, n", [(20, 15, 3, 2), (12, 30, 4, 5), (25, 25, 0, 3)])
def test_brand_update_general(rng, m, d, r, n):
    if r:
        U, _ = np.linalg.qr(rng.standard_normal((m, r)))
        V, _ = np.linalg.qr(rng.standard_normal((d, r)))
        X = GeneralLowRank(U, np.sort(rng.random(r))[::-1] + 0.1, V)
    else:
        X = GeneralLowRank(np.zeros((m, 0)), np.zeros(0), np.zeros((d, 0)))
    A, B = rng.standard_normal((m, n)), rng.standard_normal((d, n))
    out = brand_update(X, A, B)
    target = X.dense() + A @ B.T
    assert np.linalg.norm(out.dense() - target) <= 1e-9 * np.linalg.norm(target)
    s = np.linalg.svd(target, compute_uv=False)[: out.rank]
    assert np.allclose(out.D, s, rtol=1e-9)


def test_brand_update_errors(rng):
    X = GeneralLowRank(np.eye(5)[:, :3], np.ones(3), np.eye(5)[:, :3])
    with pytest.raises(RankBudgetExceeded):
        brand_update(X, np.ones((5, 2)), np.ones((5, 2)))
    with pytest.raises(DimensionMismatch):
        brand_update(X, np.ones((4, 1)), np.ones((5, 1)))

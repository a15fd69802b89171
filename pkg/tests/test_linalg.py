import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bkfac.errors import DimensionMismatch, IndefiniteInput, NotSymmetric, RankTooLarge
from bkfac.linalg import (
    LowRankSPSD,
    check_symmetric,
    frob_norm,
    min_eig_check,
    rsvd_spsd,
    symmetric_evd,
    thin_qr,
    truncate,
)

from conftest import random_rep, random_spd


def test_lowrank_rejects_unsorted_or_negative():
    U = np.eye(3)[:, :2]
    with pytest.raises(ValueError):
        LowRankSPSD(U, [1.0, 2.0])
    with pytest.raises(ValueError):
        LowRankSPSD(U, [1.0, -1.0])
    with pytest.raises(DimensionMismatch):
        LowRankSPSD(U, [1.0])


def test_lowrank_empty_and_sorting():
    E = LowRankSPSD.empty(4)
    assert E.rank == 0 and E.dim == 4
    assert np.array_equal(E.dense(), np.zeros((4, 4)))
    L = LowRankSPSD.from_unsorted(np.eye(3), [1.0, 3.0, 2.0])
    assert np.array_equal(L.D, [3.0, 2.0, 1.0])
    assert np.array_equal(L.U[:, 0], [0.0, 1.0, 0.0])


def test_scaled_and_frob_norm(rng):
    L = random_rep(rng, 10, 3)
    assert np.allclose(L.scaled(2.0).dense(), 2.0 * L.dense())
    assert frob_norm(L) == pytest.approx(np.linalg.norm(L.dense()), rel=1e-12)


def test_check_symmetric():
    with pytest.raises(DimensionMismatch):
        check_symmetric(np.zeros((2, 3)))
    with pytest.raises(NotSymmetric):
        check_symmetric(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_symmetric_evd_reconstructs(rng):
    M = random_spd(rng, 12, 5)
    L = symmetric_evd(M)
    assert np.allclose(L.dense(), M, atol=1e-10)
    assert L.orthonormality_error() < 1e-12
    assert np.all(np.diff(L.D) <= 0)


def test_symmetric_evd_clamps_roundoff_but_rejects_indefinite():
    M = np.diag([1.0, -1e-14])
    assert symmetric_evd(M).D[-1] == 0.0
    with pytest.raises(IndefiniteInput):
        symmetric_evd(np.diag([1.0, -1e-3]))


def test_min_eig_check():
    assert min_eig_check(np.diag([3.0, -2.0, 1.0])) == -2.0


@given(arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(1, 5)),
              elements=st.floats(-10, 10, allow_subnormal=False)))
def test_thin_qr_reproduces_columns(A):
    Q, R, kept = thin_qr(A)
    assert Q.shape == (A.shape[0], len(kept))
    assert np.allclose(Q.T @ Q, np.eye(len(kept)), atol=1e-10)
    assert np.allclose(Q @ R, A, atol=1e-9 * (1 + np.linalg.norm(A)))


def test_thin_qr_drops_dependent_columns(rng):
    a = rng.standard_normal((8, 2))
    A = np.column_stack([a[:, 0], a[:, 1], a[:, 0] + 2 * a[:, 1], np.zeros(8)])
    Q, R, kept = thin_qr(A)
    assert kept == [0, 1]
    assert np.allclose(Q @ R, A, atol=1e-12)


def test_rsvd_exact_on_low_rank(rng):
    M = random_spd(rng, 30, 4)
    L = rsvd_spsd(M, 4, oversample=5, power_iters=2, seed=1)
    assert np.linalg.norm(L.dense() - M) <= 1e-10 * np.linalg.norm(M)


def test_rsvd_near_optimal_on_decaying_spectrum(rng):
    d, r = 40, 6
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    w = np.exp(-0.5 * np.arange(d))
    M = (Q * w) @ Q.T
    L = rsvd_spsd(M, r, 10, 4, seed=3)
    optimal = (Q[:, :r] * w[:r]) @ Q[:, :r].T
    assert np.linalg.norm(L.dense() - optimal) <= 1e-6 * np.linalg.norm(M)


def test_rsvd_deterministic_and_bounds(rng):
    M = random_spd(rng, 20)
    a, b = rsvd_spsd(M, 3, seed=7), rsvd_spsd(M, 3, seed=7)
    assert np.array_equal(a.U, b.U) and np.array_equal(a.D, b.D)
    with pytest.raises(RankTooLarge):
        rsvd_spsd(M, 15, oversample=10)


@pytest.mark.parametrize("r, expected_rank", [(0, 0), (2, 2), (5, 5), (9, 5)])
def test_truncate(rng, r, expected_rank):
    L = random_rep(rng, 10, 5)
    T = truncate(L, r)
    assert T.rank == expected_rank
    assert np.array_equal(T.D, L.D[:expected_rank])

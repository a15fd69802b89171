"""Dense and randomized symmetric linear algebra.

Symmetric matrices and tall-thin update factors are plain ``numpy`` arrays;
the only structured carrier is :class:`LowRankSPSD`, a thin
eigendecomposition ``U diag(D) U^T`` of a symmetric PSD matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, IndefiniteInput, NotSymmetric, RankTooLarge

TOL_PSD = 1e-10
SYM_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class LowRankSPSD:
    """``U @ diag(D) @ U.T`` with orthonormal ``U`` (d x r) and sorted ``D >= 0``."""

    U: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        D = np.asarray(self.D, dtype=float).reshape(-1)
        if U.ndim != 2 or U.shape[1] != D.shape[0]:
            raise DimensionMismatch(f"basis {U.shape} does not match {D.shape[0]} eigenvalues")
        if D.size and (D.min() < 0 or np.any(np.diff(D) > 0)):
            raise ValueError("eigenvalues must be nonnegative and non-increasing")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "D", D)

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.D.shape[0]

    @classmethod
    def empty(cls, dim: int) -> "LowRankSPSD":
        return cls(np.zeros((dim, 0)), np.zeros(0))

    @classmethod
    def from_unsorted(cls, U, D) -> "LowRankSPSD":
        """Build from eigenpairs in any order; ties keep their stored order."""
        D = np.asarray(D, dtype=float)
        order = np.argsort(-D, kind="stable")
        return cls(np.asarray(U)[:, order], D[order])

    def dense(self) -> np.ndarray:
        M = (self.U * self.D) @ self.U.T
        return 0.5 * (M + M.T)

    def scaled(self, c: float) -> "LowRankSPSD":
        if c < 0:
            raise ValueError("scale must be nonnegative")
        return LowRankSPSD(self.U, c * self.D)

    def orthonormality_error(self) -> float:
        if self.rank == 0:
            return 0.0
        return float(np.abs(self.U.T @ self.U - np.eye(self.rank)).max())


def check_symmetric(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {M.shape}")
    nrm = np.linalg.norm(M)
    if np.linalg.norm(M - M.T) > SYM_TOL * nrm:
        raise NotSymmetric("matrix is not symmetric")
    return 0.5 * (M + M.T)


def sym_eigh(M):
    """All eigenpairs of a symmetric matrix, eigenvalues non-increasing."""
    M = check_symmetric(M)
    w, V = np.linalg.eigh(M)
    return w[::-1].copy(), V[:, ::-1].copy()


def symmetric_evd(M) -> LowRankSPSD:
    """Full eigendecomposition of a symmetric PSD matrix.

    Eigenvalues in ``[-TOL_PSD * scale, 0)`` are clamped to zero, with
    ``scale = 1 + max |eigenvalue|``; anything more negative raises
    :class:`IndefiniteInput`.
    """
    w, V = sym_eigh(M)
    if w.size == 0:
        return LowRankSPSD(V, w)
    scale = 1.0 + np.abs(w).max()
    if w[-1] < -TOL_PSD * scale:
        raise IndefiniteInput(f"smallest eigenvalue {w[-1]:.3e} is below -{TOL_PSD:g}*scale")
    return LowRankSPSD(V, np.maximum(w, 0.0))


def thin_qr(A, rtol=1e-12):
    """Rank-revealing thin QR by twice-iterated classical Gram-Schmidt.

    Returns ``(Q, R, kept)``: ``Q`` holds one orthonormal column per kept
    input column, and ``Q @ R`` reproduces every column of ``A``.  Columns
    whose residual after orthogonalizing against the previous ones is below
    ``rtol * (1 + ||A||_F)`` are dropped, so ``R[:, kept]`` is upper
    triangular and the other columns of ``R`` are their projections.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {A.shape}")
    d, n = A.shape
    tol = rtol * (1.0 + np.linalg.norm(A))
    Qbuf = np.zeros((d, n))
    coeffs = np.zeros((n, n))
    kept = []
    for j in range(n):
        m = len(kept)
        Q = Qbuf[:, :m]
        v = A[:, j].copy()
        c = np.zeros(m)
        for _ in range(2):
            h = Q.T @ v
            v -= Q @ h
            c += h
        coeffs[:m, j] = c
        nv = np.linalg.norm(v)
        if nv > tol:
            coeffs[m, j] = nv
            Qbuf[:, m] = v / nv
            kept.append(j)
    m = len(kept)
    return Qbuf[:, :m].copy(), coeffs[:m, :].copy(), kept


def rsvd_spsd(M, r: int, oversample: int = 10, power_iters: int = 4, seed: int = 0) -> LowRankSPSD:
    """Rank-``r`` PSD approximation from a randomized range finder.

    Gaussian sketch of width ``r + oversample``, ``power_iters`` rounds of
    subspace iteration (each re-orthonormalized), then a symmetric
    projection ``Q^T M Q`` whose eigenpairs are lifted and truncated.
    """
    M = check_symmetric(M)
    d = M.shape[0]
    k = r + oversample
    if r < 0 or oversample < 0 or k > d:
        raise RankTooLarge(f"target rank {r} + oversampling {oversample} exceeds dimension {d}")
    if power_iters < 0:
        raise ValueError("power_iters must be >= 0")
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((d, k))
    Q, _ = np.linalg.qr(M @ omega)
    for _ in range(power_iters):
        Q, _ = np.linalg.qr(M.T @ Q)
        Q, _ = np.linalg.qr(M @ Q)
    B = Q.T @ M @ Q
    w, W = np.linalg.eigh(0.5 * (B + B.T))
    w, W = w[::-1][:r], W[:, ::-1][:, :r]
    return LowRankSPSD(Q @ W, np.maximum(w, 0.0))


def truncate(L: LowRankSPSD, r: int) -> LowRankSPSD:
    if r < 0:
        raise ValueError("truncation rank must be >= 0")
    if r >= L.rank:
        return L
    return LowRankSPSD(L.U[:, :r], L.D[:r])


def frob_norm(X) -> float:
    if isinstance(X, LowRankSPSD):
        return float(np.sqrt(np.sum(X.D**2)))
    return float(np.linalg.norm(np.asarray(X, dtype=float)))


def min_eig_check(M) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    w, _ = sym_eigh(M)
    return float(w[-1])

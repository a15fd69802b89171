"""Exact low-rank SVD/EVD updates under additive low-rank perturbations.

``brand_update`` handles a general thin SVD ``U diag(D) V^T + A B^T``;
``symmetric_brand`` is the PSD specialisation ``U diag(D) U^T + A A^T`` used
by every B-update maintainer.  Both diagonalise only a small core matrix of
side ``r + n``, so the cost is linear in the ambient dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, RankBudgetExceeded
from .linalg import LowRankSPSD, symmetric_evd, thin_qr

PRUNE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class GeneralLowRank:
    """Thin SVD ``U @ diag(D) @ V.T`` of an ``m x d`` matrix."""

    U: np.ndarray
    D: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        U, V = np.asarray(self.U, dtype=float), np.asarray(self.V, dtype=float)
        D = np.asarray(self.D, dtype=float).reshape(-1)
        if U.shape[1] != D.size or V.shape[1] != D.size:
            raise DimensionMismatch("U, D and V disagree on the rank")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "V", V)

    @property
    def rank(self) -> int:
        return self.D.size

    def dense(self) -> np.ndarray:
        return (self.U * self.D) @ self.V.T


def _project_out(U, A):
    """Split ``A`` into ``U @ C + A_perp`` with ``U^T A_perp ~ 0`` (two passes)."""
    C = U.T @ A
    A_perp = A - U @ C
    C2 = U.T @ A_perp
    return C + C2, A_perp - U @ C2


def assemble_core(UtA, VtB, R_A, R_B, D) -> np.ndarray:
    """Core matrix whose SVD gives the SVD of ``X + A B^T``.

    Builds ``[[I, U^T A], [0, R_A]] diag(D, I) [[I, V^T B], [0, R_B]]^T``.
    ``R_A`` may have fewer rows than columns when the QR of the projected
    update dropped dependent columns.
    """
    UtA, VtB = np.atleast_2d(UtA), np.atleast_2d(VtB)
    R_A, R_B = np.atleast_2d(R_A), np.atleast_2d(R_B)
    D = np.asarray(D, dtype=float).reshape(-1)
    r = D.size
    n = R_A.shape[1]
    if (
        UtA.shape != (r, n)
        or VtB.shape != (r, R_B.shape[1])
        or R_B.shape[1] != n
    ):
        raise DimensionMismatch(
            f"inconsistent core blocks: U^T A {UtA.shape}, V^T B {VtB.shape}, "
            f"R_A {R_A.shape}, R_B {R_B.shape}, rank {r}"
        )
    left = np.block([[np.eye(r), UtA], [np.zeros((R_A.shape[0], r)), R_A]])
    right = np.block([[np.eye(r), VtB], [np.zeros((R_B.shape[0], r)), R_B]])
    weights = np.concatenate([D, np.ones(n)])
    return (left * weights) @ right.T


def brand_update(X: GeneralLowRank, A, B) -> GeneralLowRank:
    """Thin SVD of ``X + A B^T`` from the thin SVD of ``X``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    m, d = X.U.shape[0], X.V.shape[0]
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != m or B.shape[0] != d or A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"A {A.shape} and B {B.shape} do not fit a {m}x{d} matrix")
    n = A.shape[1]
    if X.rank + n >= min(m, d):
        raise RankBudgetExceeded(f"rank {X.rank} + update width {n} must be < {min(m, d)}")
    UtA, A_perp = _project_out(X.U, A)
    VtB, B_perp = _project_out(X.V, B)
    Q_A, R_A, _ = thin_qr(A_perp)
    Q_B, R_B, _ = thin_qr(B_perp)
    core = assemble_core(UtA, VtB, R_A, R_B, X.D)
    Uc, s, Vct = np.linalg.svd(core)
    keep = s > PRUNE_RTOL * s[0] if s.size and s[0] > 0 else np.zeros(s.size, bool)
    U_new = np.hstack([X.U, Q_A]) @ Uc[:, keep]
    V_new = np.hstack([X.V, Q_B]) @ Vct[keep].T
    return GeneralLowRank(U_new, s[keep], V_new)


def symmetric_brand(L: LowRankSPSD, A) -> LowRankSPSD:
    """Eigendecomposition of ``L + A A^T`` (exact, no weighting).

    Callers that maintain an exponential average pass ``rho``-scaled
    eigenvalues and a ``sqrt(1 - rho)``-scaled ``A`` themselves.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2 or A.shape[0] != L.dim:
        raise DimensionMismatch(f"update of shape {A.shape} does not fit dimension {L.dim}")
    n = A.shape[1]
    if L.rank + n >= L.dim:
        raise RankBudgetExceeded(f"rank {L.rank} + update width {n} must be < {L.dim}")
    UtA, A_perp = _project_out(L.U, A)
    Q_A, R_A, _ = thin_qr(A_perp)
    core = assemble_core(UtA, UtA, R_A, R_A, L.D)
    core_evd = symmetric_evd(0.5 * (core + core.T))
    w = core_evd.D
    keep = w > PRUNE_RTOL * w[0] if w.size and w[0] > 0 else np.zeros(w.size, bool)
    U_new = np.hstack([L.U, Q_A]) @ core_evd.U[:, keep]
    return LowRankSPSD(U_new, w[keep])

"""Inverse-maintenance strategies over an EA K-factor stream.

A maintainer holds a :class:`LowRankSPSD` estimate of the current K-factor
and refreshes it on its own schedule:

* ``ExactKFAC`` - full eigendecomposition every ``T_inv`` steps.
* ``RKFAC`` - randomized rank-``r`` decomposition every ``T_inv`` steps.
* ``BKFAC`` - truncate to rank ``r`` then apply a symmetric Brand update
  with the incoming factor every ``T_brand`` steps.
* ``BRKFAC`` - as ``BKFAC``, but every ``T_rsvd`` steps the truncated
  representation is replaced by a randomized decomposition of the exact
  factor from the previous step.
* ``BKFACC`` - as ``BKFAC``, plus a light correction every ``T_corct`` steps.

Regularized inverses ``(rep + lambda I)^{-1}`` are applied without ever
forming a dense ``d x d`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .brand import symmetric_brand
from .errors import DimensionMismatch, InvalidCorrectionSize, ZeroSpectrum
from .linalg import LowRankSPSD, rsvd_spsd, sym_eigh, symmetric_evd, truncate


def _check_periods(**periods):
    for name, value in periods.items():
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be an integer >= 1, got {value}")


@dataclass(frozen=True)
class ExactKFAC:
    T_inv: int = 10

    def __post_init__(self):
        _check_periods(T_inv=self.T_inv)

    @property
    def label(self):
        return f"kfac_Tinv{self.T_inv}"


@dataclass(frozen=True)
class RKFAC:
    T_inv: int = 50
    r: int = 12
    r_o: int = 10
    n_pwr: int = 4

    def __post_init__(self):
        _check_periods(T_inv=self.T_inv, r=self.r)
        if self.r_o < 0 or self.n_pwr < 0:
            raise ValueError("r_o and n_pwr must be >= 0")

    @property
    def label(self):
        return f"rkfac_Tinv{self.T_inv}"


@dataclass(frozen=True)
class BKFAC:
    T_brand: int = 10
    r: int = 12

    def __post_init__(self):
        _check_periods(T_brand=self.T_brand, r=self.r)

    @property
    def label(self):
        return "bkfac"


@dataclass(frozen=True)
class BRKFAC:
    T_brand: int = 10
    T_rsvd: int = 50
    r: int = 12
    r_o: int = 10
    n_pwr: int = 4

    def __post_init__(self):
        _check_periods(T_brand=self.T_brand, T_rsvd=self.T_rsvd, r=self.r)
        if self.r_o < 0 or self.n_pwr < 0:
            raise ValueError("r_o and n_pwr must be >= 0")

    @property
    def label(self):
        return "brkfac"


@dataclass(frozen=True)
class BKFACC:
    T_brand: int = 10
    T_corct: int = 50
    phi_crc: float = 0.5
    r: int = 12

    def __post_init__(self):
        _check_periods(T_brand=self.T_brand, T_corct=self.T_corct, r=self.r)
        if not 0.0 < self.phi_crc <= 1.0:
            raise ValueError(f"phi_crc must lie in (0, 1], got {self.phi_crc}")

    @property
    def n_crc(self) -> int:
        # round half up, clamped to [1, r]
        return int(min(self.r, max(1, np.floor(self.phi_crc * self.r + 0.5))))

    @property
    def label(self):
        return "bkfac_c"


Strategy = Union[ExactKFAC, RKFAC, BKFAC, BRKFAC, BKFACC]
B_FAMILY = (BKFAC, BRKFAC, BKFACC)


def periods(strategy: Strategy) -> dict:
    """All schedule periods of a strategy, keyed by field name."""
    return {k: v for k, v in vars(strategy).items() if k.startswith("T_")}


def _subseed(seed: int, k: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag, k]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True, eq=False)
class MaintainerState:
    """Value-like maintainer state; ``k`` is the last processed step (-1 before start)."""

    strategy: Strategy
    rho: float
    seed: int
    k: int
    rep: LowRankSPSD

    @classmethod
    def start(cls, strategy: Strategy, dim: int, rho: float, seed: int = 0) -> "MaintainerState":
        return cls(strategy, rho, seed, -1, LowRankSPSD.empty(dim))


def _b_update(state: MaintainerState, base: LowRankSPSD, update, k: int) -> LowRankSPSD:
    if k == 0:
        # first factor enters unweighted: M_0 = M_0 M_0^T
        return symmetric_brand(LowRankSPSD.empty(base.dim), update)
    rho = state.rho
    return symmetric_brand(base.scaled(rho), np.sqrt(1.0 - rho) * np.asarray(update, dtype=float))


def maintainer_step(
    state: MaintainerState,
    update: Optional[np.ndarray],
    exact_now: Optional[np.ndarray] = None,
    exact_prev: Optional[np.ndarray] = None,
) -> MaintainerState:
    """Process step ``state.k + 1``.

    ``update`` is the factor arriving at this step (``None`` if nothing
    arrived); ``exact_now`` / ``exact_prev`` are the dense exact K-factors
    after / before this step's average update.  Strategies that do not act
    at this step only advance ``k``.
    """
    k = state.k + 1
    s = state.strategy
    rep = state.rep

    def need(x, what):
        if x is None:
            raise ValueError(f"{type(s).__name__} needs {what} at step {k}")
        return x

    if isinstance(s, ExactKFAC):
        if k % s.T_inv == 0:
            rep = symmetric_evd(need(exact_now, "the exact factor"))
    elif isinstance(s, RKFAC):
        if k % s.T_inv == 0:
            rep = rsvd_spsd(need(exact_now, "the exact factor"), s.r, s.r_o, s.n_pwr, _subseed(state.seed, k, 1))
    elif isinstance(s, BKFAC):
        if k % s.T_brand == 0:
            rep = _b_update(state, truncate(rep, s.r), need(update, "an incoming factor"), k)
    elif isinstance(s, BRKFAC):
        if k % s.T_brand == 0 or (k > 0 and k % s.T_rsvd == 0):
            if k > 0 and k % s.T_rsvd == 0:
                base = rsvd_spsd(need(exact_prev, "the previous exact factor"), s.r, s.r_o, s.n_pwr,
                                 _subseed(state.seed, k, 1))
            else:
                base = truncate(rep, s.r)
            rep = _b_update(state, base, need(update, "an incoming factor"), k)
    elif isinstance(s, BKFACC):
        if k % s.T_brand == 0:
            rep = _b_update(state, truncate(rep, s.r), need(update, "an incoming factor"), k)
        if k % s.T_corct == 0 and rep.rank > 0:
            n_crc = min(s.n_crc, rep.rank)
            rep = light_correction(rep, need(exact_now, "the exact factor"), n_crc, _subseed(state.seed, k, 2))
    else:
        raise TypeError(f"unknown strategy {s!r}")
    return replace(state, k=k, rep=rep)


def light_correction(rep: LowRankSPSD, M_exact, n_crc: int, rng=None) -> LowRankSPSD:
    """Make ``rep`` exact on a random ``n_crc``-dimensional subspace of its basis.

    ``rng`` is a seed or ``numpy.random.Generator``.  The selected columns
    are rotated to diagonalise the projected exact factor and their
    eigenvalues replaced; the spectrum is then re-sorted.
    """
    if not 1 <= n_crc <= rep.rank:
        raise InvalidCorrectionSize(f"n_crc={n_crc} must lie in [1, {rep.rank}]")
    M_exact = np.asarray(M_exact, dtype=float)
    if M_exact.shape != (rep.dim, rep.dim):
        raise DimensionMismatch(f"exact factor {M_exact.shape} vs dimension {rep.dim}")
    rng = np.random.default_rng(rng)
    idx = np.sort(rng.choice(rep.rank, size=n_crc, replace=False))
    U_S = rep.U[:, idx]
    core = U_S.T @ M_exact @ U_S
    w, W = sym_eigh(0.5 * (core + core.T))
    U = rep.U.copy()
    D = rep.D.copy()
    U[:, idx] = U_S @ W
    D[idx] = np.maximum(w, 0.0)
    return LowRankSPSD.from_unsorted(U, D)


@dataclass(frozen=True, eq=False)
class RegularizedInverse:
    """``(rep + lam I)^{-1}``; with continuation, ``shift = min(rep.D)``."""

    rep: LowRankSPSD
    lam: float
    shift: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.shift < 0:
            raise ValueError("shift must be nonnegative")

    @property
    def eff_D(self) -> np.ndarray:
        return self.rep.D - self.shift

    @property
    def eff_lam(self) -> float:
        return self.lam + self.shift

    def dense(self) -> np.ndarray:
        """Dense inverse matrix; for tests and small-dimension metrics only."""
        return apply_inverse(self, np.eye(self.rep.dim), "left")


def make_reg_inverse(rep: LowRankSPSD, lam=None, phi=None, continuation=True) -> RegularizedInverse:
    """Regularized inverse with a fixed ``lam`` or a relative ``phi * max(D)``."""
    if (lam is None) == (phi is None):
        raise ValueError("give exactly one of lam (fixed) or phi (relative)")
    if phi is not None:
        top = rep.D[0] if rep.rank else 0.0
        if top <= 0:
            raise ZeroSpectrum("relative lambda needs a nonzero spectrum")
        lam = top * phi
    shift = float(rep.D[-1]) if continuation and rep.rank else 0.0
    return RegularizedInverse(rep, float(lam), shift)


def apply_inverse(inv: RegularizedInverse, J, side="left") -> np.ndarray:
    """``inv @ J`` (``side="left"``) or ``J @ inv`` (``side="right"``)."""
    J = np.asarray(J, dtype=float)
    U = inv.rep.U
    lam = inv.eff_lam
    coef = 1.0 / (inv.eff_D + lam) - 1.0 / lam
    if side == "left":
        if J.shape[0] != inv.rep.dim:
            raise DimensionMismatch(f"cannot left-apply a {inv.rep.dim}-dim inverse to {J.shape}")
        UtJ = U.T @ J
        return U @ (coef[:, None] * UtJ if J.ndim == 2 else coef * UtJ) + J / lam
    if side == "right":
        if J.ndim != 2 or J.shape[1] != inv.rep.dim:
            raise DimensionMismatch(f"cannot right-apply a {inv.rep.dim}-dim inverse to {J.shape}")
        return ((J @ U) * coef) @ U.T + J / lam
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def apply_inverse_linear(inv_gamma: RegularizedInverse, inv_a: RegularizedInverse, G, A) -> np.ndarray:
    """Preconditioned step ``Gamma^{-1} (G A^T) A^{-1}`` without forming ``G A^T``
    until the final, already-preconditioned product."""
    G = np.asarray(G, dtype=float)
    A = np.asarray(A, dtype=float)
    if G.ndim != 2 or A.ndim != 2 or G.shape[1] != A.shape[1]:
        raise DimensionMismatch(f"G {G.shape} and A {A.shape} must share their column count")
    G_pre = apply_inverse(inv_gamma, G, "left")
    At_pre = apply_inverse(inv_a, A.T, "right")
    return G_pre @ At_pre

"""Error metrics against an exact benchmark, and dense proposition oracles.

The oracles simulate the exact K-factor process and the B-update process
densely (``d <= 32`` is intended) using ``numpy.linalg.eigh`` directly, so
they stay independent of the library path they are compared with.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import KFOError, RankBudgetExceeded, ZeroReference
from .linalg import rsvd_spsd, symmetric_evd, truncate
from .maintainers import (
    B_FAMILY,
    BKFAC,
    ExactKFAC,
    MaintainerState,
    RegularizedInverse,
    apply_inverse_linear,
    maintainer_step,
    make_reg_inverse,
    periods,
)
from .stream import ExactFactorState, StreamConfig, ea_step, gen_update


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorRecord:
    step: int
    m1: float
    m2: float
    m3: float
    m4: float

    def metrics(self):
        return (self.m1, self.m2, self.m3, self.m4)


def _rel_inverse_error(approx: RegularizedInverse, ref: RegularizedInverse) -> float:
    R = ref.dense()
    return float(np.linalg.norm(approx.dense() - R) / np.linalg.norm(R))


def step_errors(s_approx, s_ref):
    """Relative norm error and ``1 - cos`` of the angle between two steps."""
    nr = np.linalg.norm(s_ref)
    if nr == 0:
        raise ZeroReference("reference step is zero")
    na = np.linalg.norm(s_approx)
    m3 = np.linalg.norm(s_approx - s_ref) / nr
    # 1 - cos = |a/|a| - b/|b||^2 / 2 avoids cancellation for small angles
    m4 = 0.5 * np.linalg.norm(s_approx / na - s_ref / nr) ** 2 if na > 0 else 1.0
    return float(m3), float(min(2.0, max(0.0, m4)))


def compute_metrics(approx_a, approx_g, ref_a, ref_g, G, A, step: int = 0) -> ErrorRecord:
    """All four metrics for one step; ``G A^T`` is the gradient in matrix form."""
    s_ref = apply_inverse_linear(ref_g, ref_a, G, A)
    s_approx = apply_inverse_linear(approx_g, approx_a, G, A)
    m3, m4 = step_errors(s_approx, s_ref)
    return ErrorRecord(step, _rel_inverse_error(approx_a, ref_a), _rel_inverse_error(approx_g, ref_g), m3, m4)


# --------------------------------------------------------------------------
# proposition reports
# --------------------------------------------------------------------------


@dataclass
class Assertion:
    max_residual: float = 0.0
    tol: float = 0.0
    passed: bool = True


@dataclass
class PropositionReport:
    """Per-assertion worst residuals plus the per-step traces they came from.

    Every assertion is phrased so that it passes iff its residual is at most
    its tolerance (inequalities record their violation, clipped at zero).
    """

    prop: str
    assertions: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=lambda: defaultdict(list))
    min_eigs: dict = field(default_factory=lambda: defaultdict(list))

    def record(self, name: str, residual: float, tol: float) -> None:
        residual = float(residual)
        if not math.isfinite(residual):
            residual = math.inf
        self.residuals[name].append(residual)
        a = self.assertions.setdefault(name, Assertion(0.0, tol, True))
        a.max_residual = float(max(a.max_residual, residual))
        a.passed = bool(a.max_residual <= a.tol)

    def record_psd(self, name: str, M, scale: float, tol: float = 1e-9) -> None:
        lo = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
        self.min_eigs[name].append(lo)
        self.record(name, max(0.0, -lo) / max(scale, 1e-300), tol)

    def merge(self, other: "PropositionReport") -> "PropositionReport":
        for name, a in other.assertions.items():
            for res in other.residuals.get(name, [a.max_residual]):
                self.record(name, res, a.tol)
        for name, vals in other.min_eigs.items():
            self.min_eigs[name].extend(vals)
        return self

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions.values())

    def to_json(self) -> dict:
        return {
            "prop": self.prop,
            "assertions": [
                {"name": n, "max_residual": a.max_residual, "pass": a.passed}
                for n, a in self.assertions.items()
            ],
        }


# --------------------------------------------------------------------------
# dense oracles
# --------------------------------------------------------------------------


def _updates(stream, count: int):
    if isinstance(stream, StreamConfig):
        return [gen_update(stream, k) for k in range(count)]
    ups = [np.asarray(m, dtype=float) for m in stream]
    if len(ups) < count:
        raise ValueError(f"stream has {len(ups)} updates, {count} needed")
    return ups[:count]


def _rho(stream, rho):
    if rho is not None:
        return rho
    if isinstance(stream, StreamConfig):
        return stream.rho
    raise ValueError("rho is required when the stream is a plain sequence")


def _gram(M):
    G = M @ M.T
    return 0.5 * (G + G.T)


def dense_truncation(M, r: int):
    """Optimal rank-``r`` PSD truncation of a symmetric matrix (dense oracle)."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if r <= 0:
        return np.zeros_like(M)
    w, V = w[::-1][:r], V[:, ::-1][:, :r]
    T = (V * w) @ V.T
    return 0.5 * (T + T.T)


def exact_process(updates, rho):
    out = [_gram(updates[0])]
    for M in updates[1:]:
        out.append(rho * out[-1] + (1 - rho) * _gram(M))
    return out


def b_process(updates, rho, r, start=0, init=None):
    """Dense B-update process: returns ``(Mtilde, B)`` lists indexed from ``start``.

    ``Mtilde[0]`` is ``init`` (default ``M_0 M_0^T``), ``B[j]`` its rank-``r``
    truncation, and ``Mtilde[j+1] = rho B[j] + (1 - rho) M M^T``.
    """
    Mt = [_gram(updates[0]) if init is None else init]
    Bs = [dense_truncation(Mt[0], r)]
    for M in updates[start + 1:]:
        Mt.append(rho * Bs[-1] + (1 - rho) * _gram(M))
        Bs.append(dense_truncation(Mt[-1], r))
    return Mt, Bs


def _spec(M):
    return float(np.linalg.norm(M, 2))


def _library_bkfac(updates, rho, r, state=None):
    """Densified B-KFAC maintainer trace (T_brand=1), or None if inapplicable."""
    d = updates[0].shape[0]
    if r + updates[0].shape[1] >= d:
        return None
    st = state or MaintainerState.start(BKFAC(T_brand=1, r=r), d, rho)
    out = []
    for M in updates[st.k + 1:]:
        st = maintainer_step(st, M)
        out.append(st.rep.dense())
    return out


def _library_check(report, name, run, oracle, tol=1e-9):
    """Compare a library trace with the dense oracle; library errors count as failures."""
    try:
        library = run()
    except KFOError:
        report.record(name, math.inf, tol)
        return
    if library is None:
        return
    for L, O in zip(library, oracle):
        report.record(name, np.linalg.norm(L - O) / max(np.linalg.norm(O), 1e-300), tol)


def check_prop_3_1(stream, r: int, steps: int = 40, rho=None) -> PropositionReport:
    """B-KFAC errors versus optimal truncations of the exact factor."""
    rho = _rho(stream, rho)
    ups = _updates(stream, steps + 1)
    n = ups[0].shape[1]
    exact = exact_process(ups, rho)
    Mt, Bs = b_process(ups, rho, r)
    report = PropositionReport("3.1")
    _library_check(report, "library_matches_dense", lambda: _library_bkfac(ups, rho, r), Mt)
    for Mk, Mtk, Bk in zip(exact, Mt, Bs):
        scale = np.linalg.norm(Mk)
        opt_r = Mk - dense_truncation(Mk, r)
        opt_rn = Mk - dense_truncation(Mk, r + n)
        for norm, fn in (("fro", np.linalg.norm), ("spec", _spec)):
            report.record(f"truncated_vs_optimal_r_{norm}", max(0.0, fn(opt_r) - fn(Mk - Bk)) / scale, 1e-9)
            report.record(f"full_vs_optimal_r_plus_n_{norm}", max(0.0, fn(opt_rn) - fn(Mk - Mtk)) / scale, 1e-9)
        gap = np.linalg.norm(Mk - Mtk) - np.linalg.norm(Mk - Bk)
        report.record("truncated_worse_than_full_fro", max(0.0, gap), 1e-10 * max(1.0, scale))
    return report


def check_prop_3_2(stream, r: int, horizon: int = 12, overwrite_at=(0, 1, 4), rho=None) -> PropositionReport:
    """Pure B process versus the process overwritten once with the optimal truncation."""
    rho = _rho(stream, rho)
    last = max(overwrite_at) + horizon
    ups = _updates(stream, last + 1)
    exact = exact_process(ups, rho)
    Mt, Bs = b_process(ups, rho, r)
    scale = max(np.linalg.norm(M) for M in exact)
    report = PropositionReport("3.2")
    d = exact[0].shape[0]
    for i in overwrite_at:
        R_i = dense_truncation(exact[i], r)
        Mt_R, Bs_R = b_process(ups[: i + horizon + 1], rho, r, start=i, init=R_i)
        # parenthesised terms of both identities
        report.record_psd("psd_exact_minus_optimal", exact[i] - R_i, scale)
        report.record_psd("psd_exact_minus_truncated", exact[i] - Bs[i], scale)
        for j in range(1, horizon):
            report.record_psd("psd_truncation_error_pure", Mt[i + j] - Bs[i + j], scale)
            report.record_psd("psd_truncation_error_overwritten", Mt_R[j] - Bs_R[j], scale)
        for q in range(1, horizon + 1):
            E_R = exact[i + q] - Mt_R[q]
            E_P = exact[i + q] - Mt[i + q]
            rhs_R = rho**q * (exact[i] - R_i) + sum(rho ** (q - j) * (Mt_R[j] - Bs_R[j]) for j in range(1, q))
            rhs_P = rho**q * (exact[i] - Bs[i]) + sum(rho ** (q - j) * (Mt[i + j] - Bs[i + j]) for j in range(1, q))
            report.record("identity_overwritten", np.abs(E_R - rhs_R).max(), 1e-8)
            report.record("identity_pure", np.abs(E_P - rhs_P).max(), 1e-8)
            report.record_psd("psd_error_overwritten", E_R, scale)
            report.record_psd("psd_error_pure", E_P, scale)
        E_R1 = exact[i + 1] - Mt_R[1]
        E_P1 = exact[i + 1] - Mt[i + 1]
        for norm, fn in (("fro", np.linalg.norm), ("spec", _spec)):
            report.record(f"one_step_overwrite_not_worse_{norm}", max(0.0, fn(E_R1) - fn(E_P1)), 1e-9 * scale)
        if r + ups[0].shape[1] < d:
            _library_check(
                report, "library_matches_dense",
                lambda: _library_bkfac(ups[: i + horizon + 1], rho, r, _state_from_dense(exact[i], r, rho, i)),
                Mt_R[1:],
            )
        oversample = min(10, d - r)
        if 0 < r and oversample >= 0:
            # the randomized path only approximates the optimal truncation
            _library_check(
                report, "rsvd_close_to_truncation",
                lambda: [rsvd_spsd(exact[i], r, oversample, 4, seed=i).dense()],
                [R_i], tol=1e-6,
            )
    _library_check(report, "library_matches_dense", lambda: _library_bkfac(ups, rho, r), Mt)
    return report


def _state_from_dense(M, r, rho, k):
    rep = truncate(symmetric_evd(M), r)
    return MaintainerState(BKFAC(T_brand=1, r=r), rho, 0, k, rep)


def _kappa(i, rho):
    return 1.0 if i == 0 else 1.0 - rho


def check_prop_4_1(stream, r: int, horizon: int = 12, rho=None) -> PropositionReport:
    """EA-weighted error decompositions for 'no update' and 'B-updates' after a
    rank-``r`` refresh at step 0."""
    rho = _rho(stream, rho)
    ups = _updates(stream, horizon + 1)
    exact = exact_process(ups, rho)
    scale = max(np.linalg.norm(M) for M in exact)
    report = PropositionReport("4.1")
    R0 = dense_truncation(exact[0], r)
    E0 = exact[0] - R0

    E_none = [E0] + [_gram(M) - R0 for M in ups[1:]]
    for k in range(horizon + 1):
        total = sum(_kappa(i, rho) * rho ** (k - i) * E_none[i] for i in range(k + 1))
        report.record("decomposition_no_update", np.abs((exact[k] - R0) - total).max(), 1e-8)

    Mt, Bs = b_process(ups, rho, r, init=exact[0])
    # both regimes start from the same rank-r refresh, so they share E_0
    report.record("initial_errors_agree", np.abs((exact[0] - Bs[0]) - E0).max(), 1e-8)
    E_b = [E0] + [(Mt[i] - Bs[i]) / (1 - rho) for i in range(1, horizon + 1)]
    for k in range(1, horizon + 1):
        direct = exact[k] - Mt[k]
        partial = sum(_kappa(i, rho) * rho ** (k - i) * E_b[i] for i in range(k))
        report.record("decomposition_b_update", np.abs(direct - partial).max(), 1e-8)
        E_k = (direct - partial) / _kappa(k, rho)
        report.record("current_term_vanishes", np.linalg.norm(E_k) / scale, 1e-10)
    _library_check(report, "library_matches_dense", lambda: _library_bkfac(ups, rho, r), Mt)
    return report


def check_prop_4_2(stream, r: int, horizon: int = 12, rho=None) -> PropositionReport:
    """Per-step error bound under B-updates and the orthogonal worst case without updates."""
    rho = _rho(stream, rho)
    ups = _updates(stream, horizon + 1)
    exact = exact_process(ups, rho)
    report = PropositionReport("4.2")
    Mt, Bs = b_process(ups, rho, r, init=exact[0])
    for j in range(1, horizon):
        E_j = (Mt[j] - Bs[j]) / (1 - rho)
        bound = np.linalg.norm(_gram(ups[j]))
        report.record("b_update_bound", max(0.0, np.linalg.norm(E_j) - bound), 1e-9)

    d = exact[0].shape[0]
    w, V = np.linalg.eigh(exact[0])
    U0 = V[:, ::-1][:, : max(r, 0)]
    R0 = dense_truncation(exact[0], r)
    if r + ups[0].shape[1] < d:
        for j in range(1, horizon + 1):
            M_orth = ups[j] - U0 @ (U0.T @ ups[j])
            E_j = _gram(M_orth) - R0
            predicted = math.hypot(np.linalg.norm(_gram(M_orth)), np.linalg.norm(R0))
            report.record(
                "worst_case_pythagoras",
                abs(np.linalg.norm(E_j) - predicted) / max(predicted, 1e-300),
                1e-8,
            )
    return report


# --------------------------------------------------------------------------
# error experiment
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Stream statistics plus the measurement protocol.

    Updates arrive every ``t_updt`` iterations.  All maintainers run from
    iteration 0; metrics are recorded over ``[warmup, warmup + steps)``.
    ``gamma_decay`` / ``gamma_drift`` optionally give the Gamma factor
    different statistics from the A factor.
    """

    stream: StreamConfig
    t_updt: int = 10
    warmup: int = 900
    phi_lambda: float = 0.1
    lam: Optional[float] = None
    continuation: bool = True
    gamma_decay: Optional[float] = None
    gamma_drift: Optional[float] = None

    def streams(self, seed: int):
        base = replace(self.stream, seed=seed)
        a = base.child(0)
        g = base.child(1)
        g = replace(
            g,
            decay=self.gamma_decay if self.gamma_decay is not None else g.decay,
            drift=self.gamma_drift if self.gamma_drift is not None else g.drift,
        )
        return a, g


def validate_strategy(cfg: ExperimentConfig, strategy) -> None:
    for name, T in periods(strategy).items():
        if T % cfg.t_updt:
            raise ValueError(f"{name}={T} must be a multiple of t_updt={cfg.t_updt}")
    d, n = cfg.stream.dim, cfg.stream.update_cols
    if isinstance(strategy, B_FAMILY) and strategy.r + n >= d:
        raise RankBudgetExceeded(f"r + update_cols = {strategy.r + n} must be < dim = {d}")
    r_o = getattr(strategy, "r_o", None)
    if r_o is not None and strategy.r + r_o > d:
        raise ValueError(f"r + r_o = {strategy.r + r_o} exceeds dim = {d}")


def _window_mean(records, t_updt):
    """Average m3/m4 over each inter-arrival window (step metrics change every
    iteration while the factors change only on arrivals)."""
    out = []
    for start in range(0, len(records), t_updt):
        win = records[start : start + t_updt]
        m3 = float(np.mean([x.m3 for x in win]))
        m4 = float(np.mean([x.m4 for x in win]))
        out.extend(replace(x, m3=m3, m4=m4) for x in win)
    return out


def run_cell(cfg: ExperimentConfig, strategy, steps: int, seed: int) -> list[ErrorRecord]:
    """Metric trace of one strategy on one seed."""
    validate_strategy(cfg, strategy)
    cfg_a, cfg_g = cfg.streams(seed)
    d_a, d_g = cfg_a.dim, cfg_g.dim
    rho = cfg.stream.rho
    ref_strategy = ExactKFAC(T_inv=cfg.t_updt)
    states = {
        "ref_a": MaintainerState.start(ref_strategy, d_a, rho, seed),
        "ref_g": MaintainerState.start(ref_strategy, d_g, rho, seed),
        "a": MaintainerState.start(strategy, d_a, rho, seed),
        "g": MaintainerState.start(strategy, d_g, rho, seed + 1),
    }
    exact = {"a": None, "g": None}
    cache = {}
    records = []

    def inverse(key, ref_key):
        rep, ref_rep = states[key].rep, states[ref_key].rep
        hit = cache.get(key)
        if hit is not None and hit[0] is rep and hit[1] is ref_rep:
            return hit[2]
        lam = cfg.lam if cfg.lam is not None else cfg.phi_lambda * ref_rep.D[0]
        inv = make_reg_inverse(rep, lam=lam, continuation=cfg.continuation)
        cache[key] = (rep, ref_rep, inv)
        return inv

    for k in range(cfg.warmup + steps):
        A_k = gen_update(cfg_a, k)
        G_k = gen_update(cfg_g, k)
        arrived = k % cfg.t_updt == 0
        prev = {}
        if arrived:
            for f, M in (("a", A_k), ("g", G_k)):
                prev[f] = None if exact[f] is None else exact[f].M_exact
                exact[f] = ExactFactorState.start(M) if exact[f] is None else ea_step(exact[f], M, rho)
        for key in states:
            f = key[-1]
            upd = (A_k if f == "a" else G_k) if arrived else None
            now = exact[f].M_exact if arrived else None
            states[key] = maintainer_step(states[key], upd, now, prev.get(f))
        if k >= cfg.warmup:
            records.append(
                compute_metrics(
                    inverse("a", "ref_a"), inverse("g", "ref_g"),
                    inverse("ref_a", "ref_a"), inverse("ref_g", "ref_g"),
                    G_k, A_k, step=k - cfg.warmup,
                )
            )
    return _window_mean(records, cfg.t_updt)


@dataclass
class ExperimentResult:
    labels: list
    seeds: list
    records: dict  # (seed, label) -> list[ErrorRecord]

    def averages(self) -> dict:
        """Per strategy: mean over steps, then over seeds."""
        out = {}
        for label in self.labels:
            per_seed = [np.mean([r.metrics() for r in self.records[(s, label)]], axis=0) for s in self.seeds]
            out[label] = tuple(float(x) for x in np.mean(per_seed, axis=0))
        return out

    def series(self, label, seed, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.records[(seed, label)]])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "strategy", "step", "m1", "m2", "m3", "m4"])
            for seed in self.seeds:
                for label in self.labels:
                    for r in self.records[(seed, label)]:
                        w.writerow([seed, label, r.step] + [format(x, ".17g") for x in r.metrics()])


def _run_cell_args(args):
    return run_cell(*args)


def run_error_experiment(cfg: ExperimentConfig, strategies: Sequence, steps: int, seeds: Sequence[int],
                         workers: int = 1, labels: Optional[Sequence[str]] = None,
                         initializer=None) -> ExperimentResult:
    """Run every (strategy, seed) cell; results do not depend on ``workers``."""
    labels = list(labels) if labels is not None else [s.label for s in strategies]
    if len(set(labels)) != len(labels):
        raise ValueError(f"strategy labels must be unique: {labels}")
    for s in strategies:
        validate_strategy(cfg, s)
    cells = [(cfg, s, steps, seed) for seed in seeds for s in strategies]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=initializer) as pool:
            traces = list(pool.map(_run_cell_args, cells))
    else:
        traces = [_run_cell_args(c) for c in cells]
    keys = [(seed, label) for seed in seeds for label in labels]
    return ExperimentResult(labels, list(seeds), dict(zip(keys, traces)))


def reset_fraction(m1, period: int) -> float:
    """Fraction of complete periods whose first value is <= their last value."""
    m1 = np.asarray(m1)
    hits = [m1[p] <= m1[p + period - 1] for p in range(0, len(m1) - period + 1, period)]
    return float(np.mean(hits)) if hits else math.nan


def trend_slope(values) -> float:
    """Least-squares slope of a trace against its step index."""
    values = np.asarray(values, dtype=float)
    return float(np.polyfit(np.arange(values.size), values, 1)[0])


def write_reports_json(reports, path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_json() for r in reports], fh, indent=2)

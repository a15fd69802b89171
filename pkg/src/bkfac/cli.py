"""Command-line entry point: ``kfo simulate | verify | bench | apply``.

Every failure ends with a single machine-readable line on stderr::

    ERROR code=<CODE> [field=<name>] <message>
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
from threadpoolctl import threadpool_limits

from .error_analysis import (
    ExperimentConfig,
    check_prop_3_1,
    check_prop_3_2,
    check_prop_4_1,
    check_prop_4_2,
    run_error_experiment,
    validate_strategy,
    write_reports_json,
)
from .errors import ConfigError, KFOError, MalformedFile
from .linalg import LowRankSPSD, rsvd_spsd
from .maintainers import (
    BKFAC,
    BKFACC,
    BRKFAC,
    ExactKFAC,
    MaintainerState,
    RKFAC,
    RegularizedInverse,
    apply_inverse,
    apply_inverse_linear,
    maintainer_step,
)
from .stream import StreamConfig, load_stream, write_stream

EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MALFORMED = 4
EXIT_OTHER = 5

STRATEGY_KINDS = {
    "kfac": ExactKFAC,
    "rkfac": RKFAC,
    "bkfac": BKFAC,
    "brkfac": BRKFAC,
    "bkfac_c": BKFACC,
}


class IoError(KFOError, OSError):
    code = "IO_ERROR"


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategySpec:
    label: str
    strategy: object


@dataclass(frozen=True)
class RunConfig:
    d: int = 64
    n_bs: int = 8
    rho: float = 0.95
    decay: float = 8.0
    drift: float = 0.001
    seeds: tuple = (0,)
    gamma_decay: Optional[float] = None
    gamma_drift: Optional[float] = None
    T_updt: int = 10
    steps: int = 300
    warmup: int = 900
    lambda_mode: str = "relative"
    phi_lambda: float = 0.1
    lam: Optional[float] = None
    continuation: bool = True
    out: str = "out"
    strategies: tuple = field(default_factory=tuple)

    def stream(self) -> StreamConfig:
        return StreamConfig(self.d, self.n_bs, self.rho, self.decay, self.drift, 0)

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            self.stream(),
            t_updt=self.T_updt,
            warmup=self.warmup,
            phi_lambda=self.phi_lambda,
            lam=self.lam if self.lambda_mode == "fixed" else None,
            continuation=self.continuation,
            gamma_decay=self.gamma_decay,
            gamma_drift=self.gamma_drift,
        )


_STREAM_KEYS = {"d", "n_bs", "rho", "decay", "drift", "seeds", "gamma_decay", "gamma_drift"}
_RUN_KEYS = {"T_updt", "steps", "warmup", "lambda_mode", "phi_lambda", "lambda", "continuation", "out"}


def _typed(section, key, value, kind):
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"expected an integer, got {value!r}", f"{section}.{key}")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"expected a number, got {value!r}", f"{section}.{key}")
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"expected true/false, got {value!r}", f"{section}.{key}")
    if kind is str and not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", f"{section}.{key}")
    return float(value) if kind is float else value


def _unknown(section, table, allowed):
    extra = sorted(set(table) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) {extra}", f"{section}.{extra[0]}")


def _parse_strategy(i, table) -> StrategySpec:
    where = f"strategy[{i}]"
    if not isinstance(table, dict):
        raise ConfigError("each strategy must be a table", where)
    table = dict(table)
    kind = table.pop("kind", None)
    if kind not in STRATEGY_KINDS:
        raise ConfigError(f"kind must be one of {sorted(STRATEGY_KINDS)}, got {kind!r}", f"{where}.kind")
    cls = STRATEGY_KINDS[kind]
    label = table.pop("label", None)
    allowed = {f.name: f.type for f in fields(cls)}
    _unknown(where, table, allowed)
    kwargs = {}
    for key, value in table.items():
        kwargs[key] = _typed(where, key, value, float if key == "phi_crc" else int)
    try:
        strategy = cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc), where) from None
    if label is not None and not isinstance(label, str):
        raise ConfigError("label must be a string", f"{where}.label")
    return StrategySpec(label or strategy.label, strategy)


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded config document; see ``docs/config.md``."""
    _unknown("", data, {"stream", "run", "strategy", "bench"})
    stream = data.get("stream", {})
    run = data.get("run", {})
    _unknown("stream", stream, _STREAM_KEYS)
    _unknown("run", run, _RUN_KEYS)
    kw = {}
    for key, kind in (("d", int), ("n_bs", int), ("rho", float), ("decay", float), ("drift", float),
                      ("gamma_decay", float), ("gamma_drift", float)):
        if key in stream:
            kw[key] = _typed("stream", key, stream[key], kind)
    if "seeds" in stream:
        seeds = stream["seeds"]
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("expected a non-empty list of integers", "stream.seeds")
        kw["seeds"] = tuple(_typed("stream", "seeds", s, int) for s in seeds)
    for key, kind in (("T_updt", int), ("steps", int), ("warmup", int), ("lambda_mode", str),
                      ("phi_lambda", float), ("continuation", bool), ("out", str)):
        if key in run:
            kw[key] = _typed("run", key, run[key], kind)
    if "lambda" in run:
        kw["lam"] = _typed("run", "lambda", run["lambda"], float)

    strategies = data.get("strategy", [])
    if not isinstance(strategies, list) or not strategies:
        raise ConfigError("at least one [[strategy]] table is required", "strategy")
    kw["strategies"] = tuple(_parse_strategy(i, t) for i, t in enumerate(strategies))
    cfg = RunConfig(**kw)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    checks = [
        ("stream.rho", 0.0 < cfg.rho < 1.0, f"must lie in (0, 1), got {cfg.rho}"),
        ("stream.n_bs", cfg.n_bs >= 1, "must be >= 1"),
        ("stream.d", cfg.d > cfg.n_bs, f"must exceed n_bs={cfg.n_bs}"),
        ("stream.decay", cfg.decay > 0, "must be positive"),
        ("stream.drift", cfg.drift >= 0, "must be nonnegative"),
        ("stream.gamma_decay", cfg.gamma_decay is None or cfg.gamma_decay > 0, "must be positive"),
        ("stream.gamma_drift", cfg.gamma_drift is None or cfg.gamma_drift >= 0, "must be nonnegative"),
        ("run.T_updt", cfg.T_updt >= 1, "must be >= 1"),
        ("run.steps", cfg.steps >= 1, "must be >= 1"),
        ("run.warmup", cfg.warmup >= 0 and cfg.warmup % cfg.T_updt == 0,
         f"must be a nonnegative multiple of T_updt={cfg.T_updt}"),
        ("run.lambda_mode", cfg.lambda_mode in ("relative", "fixed"), "must be 'relative' or 'fixed'"),
        ("run.phi_lambda", cfg.phi_lambda > 0, "must be positive"),
        ("run.lambda", cfg.lambda_mode != "fixed" or (cfg.lam is not None and cfg.lam > 0),
         "a positive lambda is required when lambda_mode = 'fixed'"),
    ]
    for name, ok, msg in checks:
        if not ok:
            raise ConfigError(msg, name)
    labels = [s.label for s in cfg.strategies]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"strategy labels must be unique, got {labels}", "strategy.label")
    exp = cfg.experiment()
    for i, spec in enumerate(cfg.strategies):
        try:
            validate_strategy(exp, spec.strategy)
        except ValueError as exc:
            raise ConfigError(str(exc), f"strategy[{i}]") from None


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc.strerror}") from None
    except tomli.TOMLDecodeError as exc:
        # message carries "(at line L, column C)"
        raise ConfigError(str(exc), "syntax") from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("KFO_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"expected an integer, got {env!r}", "KFO_THREADS") from None
    if n < 1:
        raise ConfigError("must be >= 1", "threads")
    return n


def _outdir(args, default) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _pin_blas():
    threadpool_limits(1)


def cmd_simulate(args) -> int:
    if not args.config:
        raise ConfigError("simulate needs --config", "config")
    cfg = parse_config(load_config(args.config))
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    out = _outdir(args, cfg.out)
    with threadpool_limits(1):
        result = run_error_experiment(
            cfg.experiment(),
            [s.strategy for s in cfg.strategies],
            cfg.steps,
            seeds,
            workers=_threads(args),
            labels=[s.label for s in cfg.strategies],
            initializer=_pin_blas,
        )
    result.write_csv(out / "metrics.csv")
    averages = result.averages()
    lam_note = f"lambda={cfg.lam}" if cfg.lambda_mode == "fixed" else f"lambda={cfg.phi_lambda}*max_eig(reference)"
    with open(out / "averages.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "m1", "m2", "m3", "m4"])
        for label, vals in averages.items():
            w.writerow([label] + [format(v, ".17g") for v in vals])
    print(f"# shared {lam_note} for reference and approximations, continuation={cfg.continuation}")
    for label, vals in averages.items():
        print(f"{label:>16s}  " + "  ".join(f"m{i + 1}={v:.4e}" for i, v in enumerate(vals)))
    print(f"wrote {out / 'metrics.csv'}")
    return 0


# proposition grid presets: (prop, d, r, n, rho, seeds, horizon)
_GRID_D, _GRID_R, _GRID_N, _GRID_RHO = (12, 16, 24, 32), (2, 4, 8), (1, 2, 4), (0.5, 0.95)


def verify_cases(preset: str):
    """Yield ``(check, stream, kwargs)`` for a verification preset."""
    if preset not in ("small", "standard"):
        raise ConfigError(f"unknown preset {preset!r}", "preset")
    small = preset == "small"
    n_streams = {"3.1": 20, "3.2": 10, "4.1": 10, "4.2": 10}
    if small:
        n_streams = {k: 3 for k in n_streams}
    base = {
        "3.1": (check_prop_3_1, 24, 5, 2, {"steps": 40}),
        "3.2": (check_prop_3_2, 16, 4, 2, {"horizon": 12}),
        "4.1": (check_prop_4_1, 20, 5, 2, {"horizon": 12}),
        "4.2": (check_prop_4_2, 24, 6, 3, {"horizon": 12}),
    }
    for prop, (check, d, r, n, kw) in base.items():
        for s in range(n_streams[prop]):
            yield prop, check, StreamConfig(d, n, 0.95, seed=1000 + s), dict(kw, r=r)
    grid_seeds = range(1) if small else range(10)
    dims = _GRID_D[:2] if small else _GRID_D
    for d in dims:
        for r in _GRID_R:
            for n in _GRID_N:
                for rho in _GRID_RHO:
                    for s in grid_seeds:
                        stream = StreamConfig(d, n, rho, seed=s)
                        yield "3.1", check_prop_3_1, stream, {"r": r, "steps": 12}
                        yield "3.2", check_prop_3_2, stream, {"r": r, "horizon": 6, "overwrite_at": (0, 2)}
                        yield "4.1", check_prop_4_1, stream, {"r": r, "horizon": 8}
                        yield "4.2", check_prop_4_2, stream, {"r": r, "horizon": 8}


def run_verify(preset: str):
    merged = {}
    for prop, check, stream, kw in verify_cases(preset):
        report = check(stream, **kw)
        merged[prop] = merged[prop].merge(report) if prop in merged else report
    return [merged[p] for p in sorted(merged)]


def cmd_verify(args) -> int:
    out = _outdir(args, "out")
    t0 = time.perf_counter()
    with threadpool_limits(1):
        reports = run_verify(args.preset)
    write_reports_json(reports, out / "propositions.json")
    failed = []
    for rep in reports:
        for name, a in rep.assertions.items():
            status = "PASS" if a.passed else "FAIL"
            print(f"[{status}] prop {rep.prop} {name}: max residual {a.max_residual:.3e} (tol {a.tol:.0e})")
            if not a.passed:
                failed.append(f"{rep.prop}:{name}")
    print(f"verify preset={args.preset} finished in {time.perf_counter() - t0:.1f}s; wrote {out / 'propositions.json'}")
    if failed:
        print(f"ERROR code=VERIFY_FAILED {len(failed)} assertion(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    return 0


def _random_spd(d, rank, rng):
    X = rng.standard_normal((d, rank)) * np.exp(-4.0 * np.arange(rank) / rank)
    return X @ X.T


def _time_ns(fn, reps):
    fn()  # warm-up
    samples = []
    for _ in range(reps):
        t = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t)
    return float(np.median(samples))


def run_bench(dims, r, n_bs, reps, seed=0, strategies=("bkfac", "rkfac")):
    """Median wall time per maintainer step; returns rows and log-log slopes."""
    if not dims:
        raise ConfigError("dims must be a non-empty list", "bench.dims")
    if any(d <= r + n_bs for d in dims):
        raise ConfigError(f"every d must exceed r + n_bs = {r + n_bs}", "bench.dims")
    if reps < 1:
        raise ConfigError("must be >= 1", "bench.reps")
    rng = np.random.default_rng(seed)
    rows = []
    for d in dims:
        M = rng.standard_normal((d, n_bs))
        if "bkfac" in strategies:
            U, _ = np.linalg.qr(rng.standard_normal((d, r + n_bs)))
            D = np.sort(rng.random(r + n_bs))[::-1]
            state = MaintainerState(BKFAC(T_brand=1, r=r), 0.95, seed, 0, LowRankSPSD(U, D))
            rows.append(("bkfac", d, _time_ns(lambda: maintainer_step(state, M), reps)))
        if "rkfac" in strategies:
            exact = _random_spd(d, 2 * (r + 10), rng)
            rows.append(("rkfac", d, _time_ns(lambda: rsvd_spsd(exact, r, 10, 4, seed), reps)))
    slopes = {}
    for name in strategies:
        ds = [d for s, d, _ in rows if s == name]
        ts = [t for s, _, t in rows if s == name]
        slopes[name] = float(np.polyfit(np.log(ds), np.log(ts), 1)[0]) if len(ds) > 1 else float("nan")
    return rows, slopes


BENCH_BOUNDS = {"bkfac": (0.7, 1.4), "rkfac": (1.7, float("inf"))}


def cmd_bench(args) -> int:
    cfg = {}
    if args.config:
        data = load_config(args.config)
        cfg = data.get("bench", {})
        _unknown("bench", cfg, {"dims", "r", "n_bs", "reps"})
    dims = args.dims if args.dims is not None else cfg.get("dims", [512, 1024, 2048, 4096])
    r = args.r if args.r is not None else cfg.get("r", 64)
    n_bs = args.n_bs if args.n_bs is not None else cfg.get("n_bs", 32)
    reps = args.reps if args.reps is not None else cfg.get("reps", 5)
    out = _outdir(args, "out")
    t0 = time.perf_counter()
    with threadpool_limits(1):
        rows, slopes = run_bench(list(dims), r, n_bs, reps, seed=args.seed or 0)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "d", "median_ns_per_step"])
        for name, d, t in rows:
            w.writerow([name, d, f"{t:.0f}"])
    report = {}
    for name, slope in slopes.items():
        lo, hi = BENCH_BOUNDS[name]
        ok = bool(lo <= slope <= hi)
        report[name] = {"slope": slope, "lo": lo, "hi": hi, "pass": ok}
        print(f"{name}: log-log slope {slope:.3f} (expected [{lo}, {hi}]) {'ok' if ok else 'WARNING'}")
        if not ok:
            warnings.warn(f"{name} timing slope {slope:.3f} outside [{lo}, {hi}]; constants are machine dependent")
    report["runtime_s"] = time.perf_counter() - t0
    with open(out / "bench_slopes.json", "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"bench finished in {report['runtime_s']:.1f}s; wrote {out / 'bench.csv'}")
    return 0


def load_inverse_spec(path):
    """Read an ``.npz`` with ``{gamma,a}_{U,D,lambda,shift}`` arrays."""
    try:
        data = np.load(path)
    except OSError as exc:
        raise IoError(f"cannot read inverse spec {path}: {exc}") from None
    except ValueError as exc:
        raise MalformedFile(f"not an npz archive: {exc}", 0) from None
    out = {}
    with data:
        for side in ("gamma", "a"):
            try:
                U, D = data[f"{side}_U"], data[f"{side}_D"]
                lam = float(data[f"{side}_lambda"])
                shift = float(data[f"{side}_shift"]) if f"{side}_shift" in data else 0.0
            except KeyError as exc:
                raise ConfigError(f"missing array {exc}", "inverse") from None
            out[side] = RegularizedInverse(LowRankSPSD(U, D), lam, shift)
    return out["gamma"], out["a"]


def _load(path):
    try:
        return load_stream(path)
    except OSError as exc:
        raise IoError(f"cannot read stream {path}: {exc.strerror}") from None


def cmd_apply(args) -> int:
    if not args.inverse:
        raise ConfigError("apply needs --inverse", "inverse")
    inv_g, inv_a = load_inverse_spec(args.inverse)
    if args.grad is not None:
        if args.grad_g or args.grad_a:
            raise ConfigError("give either --grad or --grad-g/--grad-a", "grad")
        steps = [apply_inverse(inv_g, apply_inverse(inv_a, J, "right"), "left") for J in _load(args.grad)]
        shape = (inv_g.rep.dim, inv_a.rep.dim)
    else:
        if not (args.grad_g and args.grad_a):
            raise ConfigError("linear path needs both --grad-g and --grad-a", "grad")
        Gs, As = _load(args.grad_g), _load(args.grad_a)
        if len(Gs) != len(As):
            raise ConfigError(f"{len(Gs)} G records vs {len(As)} A records", "grad")
        steps = [apply_inverse_linear(inv_g, inv_a, G, A) for G, A in zip(Gs, As)]
        shape = (inv_g.rep.dim, inv_a.rep.dim)
    out = _outdir(args, "out")
    try:
        write_stream(out / "steps.kfst", steps, shape=shape)
    except OSError as exc:
        raise IoError(f"cannot write steps: {exc.strerror}") from None
    print(f"wrote {len(steps)} step(s) to {out / 'steps.kfst'}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, "args")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kfo", description="Low-rank EA K-factor maintenance experiments.")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the seed list with one seed")
    common.add_argument("--threads", type=int, help="worker processes (default: $KFO_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="run the error-metric experiment")

    v = sub.add_parser("verify", parents=[common], help="check the proposition identities densely")
    v.add_argument("--preset", choices=("small", "standard"), default="small")

    b = sub.add_parser("bench", parents=[common], help="time maintainer steps against dimension")
    b.add_argument("--dims", type=_int_list)
    b.add_argument("--r", type=int)
    b.add_argument("--n-bs", type=int)
    b.add_argument("--reps", type=int)

    a = sub.add_parser("apply", parents=[common], help="precondition gradients from stream files")
    a.add_argument("--inverse", help=".npz inverse spec")
    a.add_argument("--grad", help="stream of dense gradient matrices (dense path)")
    a.add_argument("--grad-g", help="stream of G factors (linear path)")
    a.add_argument("--grad-a", help="stream of A factors (linear path)")
    return p


COMMANDS = {"simulate": cmd_simulate, "verify": cmd_verify, "bench": cmd_bench, "apply": cmd_apply}


def _fail(exc: KFOError) -> int:
    field_ = getattr(exc, "field", None)
    extra = f" field={field_}" if field_ else ""
    offset = getattr(exc, "offset", None)
    if offset is not None:
        extra += f" offset={offset}"
    sys.stdout.flush()
    print(f"ERROR code={exc.code}{extra} {exc}", file=sys.stderr)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, IoError):
        return EXIT_IO
    if isinstance(exc, MalformedFile):
        return EXIT_MALFORMED
    return EXIT_OTHER


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except KFOError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())

"""Run the error-metric experiment and print per-seed ordering statistics.

Usage: python scripts/run_error_experiment.py [CONFIG] [OUT]
"""

import sys
from pathlib import Path

import numpy as np

from bkfac.cli import load_config, parse_config
from bkfac.error_analysis import reset_fraction, run_error_experiment, trend_slope


def main():
    here = Path(__file__).parent
    cfg = parse_config(load_config(sys.argv[1] if len(sys.argv) > 1 else here / "error_experiment.toml"))
    out = Path(sys.argv[2] if len(sys.argv) > 2 else "out/error_experiment")
    out.mkdir(parents=True, exist_ok=True)
    labels = [s.label for s in cfg.strategies]
    res = run_error_experiment(cfg.experiment(), [s.strategy for s in cfg.strategies], cfg.steps,
                               cfg.seeds, labels=labels)
    res.write_csv(out / "metrics.csv")
    for label, avg in res.averages().items():
        print(f"{label:>12s} " + "  ".join(f"m{i + 1}={v:.3e}" for i, v in enumerate(avg)))
    periods = {s.label: s.strategy.T_rsvd for s in cfg.strategies if hasattr(s.strategy, "T_rsvd")}
    for seed in cfg.seeds:
        line = [f"seed {seed}:"]
        if "no_update" in labels and "bkfac" in labels:
            nu = res.series("no_update", seed, "m2")
            hit = np.nonzero(nu > res.series("bkfac", seed, "m2").mean())[0]
            line.append(f"no-update overtakes at step {hit[0] if hit.size else None}, slope {trend_slope(nu):.2e}")
        for label, period in periods.items():
            line.append(f"{label} reset fraction {reset_fraction(res.series(label, seed, 'm1'), period):.2f}")
        print(" ".join(line))


if __name__ == "__main__":
    main()

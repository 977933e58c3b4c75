"""Coverage table for the replicate, naive and bootstrap bands on M1 fields.

Example (desk scale, about 10 minutes)::

    python scripts/coverage_table.py --methods replicate naive --trials 300

The bootstrap method costs about 15 s per trial at 40x40 and is best run
with ``--nrows 40 --ncols 40 --trials 50`` or on a bigger machine.
"""

import argparse
import csv
import dataclasses
import sys
import time
from dataclasses import dataclass, field

from topohazard.inference import METHODS, coverage_experiment
from topohazard.randfield import FieldModel, MaternParams


@dataclass
class CoverageConfig:
    methods: list = field(default_factory=lambda: ["replicate", "naive"])
    params: list = field(default_factory=lambda: [(5.0, 1.0), (10.0, 1.0)])
    nrows: int = 60
    ncols: int = 60
    trials: int = 300
    N: int = 40
    B: int = 200
    alpha: float = 0.05
    seed: int = 0
    workers: int = 1
    out: str | None = None


def run(cfg: CoverageConfig):
    rows = []
    for method in cfg.methods:
        for eta, nu in cfg.params:
            t0 = time.perf_counter()
            tab = coverage_experiment(
                FieldModel("M1", MaternParams(eta, nu)), cfg.nrows, cfg.ncols, method,
                trials=cfg.trials, seed=cfg.seed, N=cfg.N, B=cfg.B, alpha=cfg.alpha,
                workers=cfg.workers,
            )
            row = {"method": method, "eta": eta, "nu": nu, **tab.row(),
                   "trials": cfg.trials, "seconds": round(time.perf_counter() - t0, 1)}
            print(", ".join(f"{k}={v:.1f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
            rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--methods", nargs="+", choices=METHODS, default=["replicate", "naive"])
    ap.add_argument("--params", nargs="+", default=["5,1", "10,1"], help="eta,nu pairs")
    for f in dataclasses.fields(CoverageConfig):
        if f.name in ("methods", "params"):
            continue
        ap.add_argument(f"--{f.name}", type=float if f.name == "alpha" else (str if f.name == "out" else int),
                        default=f.default)
    ns = vars(ap.parse_args(argv))
    ns["params"] = [tuple(float(x) for x in p.split(",")) for p in ns["params"]]
    cfg = CoverageConfig(**ns)
    rows = run(cfg)
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())

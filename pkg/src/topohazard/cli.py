"""Command-line entry point: ``topohazard <subcommand> [options]``.

Every run writes its outputs plus ``<out>.manifest.json`` recording the
parameters, seed, package version, input digests and a timestamp.  A
manifest (or any JSON object of flag values) can be passed back through
``--config``; explicit flags win over config values.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__

CSV_FLOAT = repr


# --- output plumbing --------------------------------------------------------


class Outputs:
    """Collect output files in temporaries; publish all or none."""

    def __init__(self):
        self._pending = []

    def path(self, final) -> Path:
        final = Path(final)
        final.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{final.name}.", dir=final.parent)
        os.close(fd)
        self._pending.append((Path(tmp), final))
        return Path(tmp)

    def commit(self):
        mask = os.umask(0)
        os.umask(mask)
        for tmp, final in self._pending:
            os.chmod(tmp, 0o666 & ~mask)
            os.replace(tmp, final)
        self._pending.clear()

    def discard(self):
        for tmp, _ in self._pending:
            with contextlib.suppress(FileNotFoundError):
                tmp.unlink()
        self._pending.clear()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return CSV_FLOAT(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])


def read_table(path) -> dict:
    """Read a header CSV into a dict of float arrays (non-numeric columns kept as str)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    out = {}
    for j, name in enumerate(header):
        col = []
        for i, r in enumerate(body, start=2):
            if len(r) != len(header):
                raise ValueError(f"{path}: line {i}: expected {len(header)} fields, got {len(r)}")
            col.append(r[j])
        try:
            out[name] = np.array([float(x) for x in col])
        except ValueError:
            out[name] = np.array(col, dtype=object)
    return out


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


# --- shared options -----------------------------------------------------------


def _model_args(p, with_kind=True):
    if with_kind:
        p.add_argument("--model", default="M1", choices=["M1", "M2", "M3"])
    p.add_argument("--eta", type=float, default=5.0, help="Matérn range")
    p.add_argument("--nu", type=float, default=1.0, help="Matérn smoothness")
    p.add_argument("--nrows", type=int, default=60)
    p.add_argument("--ncols", type=int, default=60)


def _seed_arg(p):
    p.add_argument("--seed", type=int, default=None, help="master seed (drawn and recorded if omitted)")


def _lattice_args(p):
    p.add_argument("--boundary", default="open", choices=["open", "torus"])
    p.add_argument("--neighborhood", default="edge4", choices=["edge4", "vertex8"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="topohazard", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of flag values (a run manifest works)")
        p.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
        return p

    ap.subcommands = sub.choices

    p = add("simulate-field", "simulate one lattice field to CSV")
    _model_args(p)
    _seed_arg(p)
    p.add_argument("--index", type=int, default=0, help="replicate index within the seed's stream")
    p.add_argument("--match", action="store_true",
                   help="for M2/M3, treat eta/nu as the M1 correlation to match")
    p.add_argument("--no-mean-correct", action="store_true")
    p.add_argument("--out")

    p = add("na-field", "Nelson-Aalen curve of a field file")
    p.add_argument("--in", dest="input")
    _lattice_args(p)
    p.add_argument("--direction", default="sublevel", choices=["sublevel", "superlevel"])
    p.add_argument("--convention", default="left", choices=["left", "strict"])
    p.add_argument("--out")

    p = add("limit", "limiting cumulative hazard for a Gaussian model")
    p.add_argument("--iid", action="store_true", help="independent cells (closed form)")
    _model_args(p, with_kind=False)
    _lattice_args(p)
    p.add_argument("--lo", type=float, default=None)
    p.add_argument("--hi", type=float, default=None)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--mean-corrected", action="store_true")
    p.add_argument("--mc-samples", type=int, default=2**14)
    _seed_arg(p)
    p.add_argument("--out")

    p = add("band-replicates", "simultaneous band from replicate fields")
    _model_args(p)
    _seed_arg(p)
    p.add_argument("--in", dest="inputs", nargs="*", default=None, help="field files (else simulate)")
    p.add_argument("--N", type=int, default=40)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--mc-draws", type=int, default=10_000)
    p.add_argument("--out")

    p = add("band-bootstrap", "parametric bootstrap band for one field")
    p.add_argument("--in", dest="input")
    _seed_arg(p)
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--out")

    p = add("coverage", "coverage experiment")
    _model_args(p, with_kind=False)
    _seed_arg(p)
    p.add_argument("--method", default="replicate", choices=["replicate", "bootstrap", "naive"])
    p.add_argument("--trials", type=int, default=300)
    p.add_argument("--N", type=int, default=40)
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--mc-draws", type=int, default=10_000)
    p.add_argument("--out")

    p = add("tree-events", "event table of tree JSON")
    p.add_argument("--in", dest="input")
    p.add_argument("--proximity", type=float, default=200.0)
    p.add_argument("--out")

    p = add("cox-fit", "Cox model on an event table (CSV) or trees (JSON)")
    p.add_argument("--in", dest="input")
    p.add_argument("--event", default="leaf", choices=["leaf", "branch"])
    p.add_argument("--covariates", nargs="*", default=["width"])
    p.add_argument("--group", action="append", default=[], metavar="NAME=COL,COL",
                   help="columns tested jointly (repeatable)")
    p.add_argument("--factor", default=None)
    p.add_argument("--ties", default="breslow", choices=["breslow", "efron"])
    p.add_argument("--out")

    p = add("plot", "render curve/band CSVs to SVG")
    p.add_argument("--in", dest="inputs", nargs="+")
    p.add_argument("--reference", default=None, help="limit-curve CSV drawn dashed")
    p.add_argument("--xlabel", default="level")
    p.add_argument("--ylabel", default="cumulative hazard")
    p.add_argument("--out")
    return ap


# --- subcommands ----------------------------------------------------------------


def _model(a):
    from .randfield import FieldModel, MaternParams, match_correlation

    params = MaternParams(a.eta, a.nu)
    if a.model != "M1" and getattr(a, "match", False):
        params = match_correlation(params, a.model, seed=a.seed).params
    return FieldModel(a.model, params)


def cmd_simulate_field(a, out: Outputs):
    from .lattice import write_csv_grid
    from .randfield import simulate_values

    model = _model(a)
    vals = simulate_values(model, a.nrows, a.ncols, 1, a.seed, start=a.index,
                           mean_correct=not a.no_mean_correct)[0]
    write_csv_grid(vals, out.path(a.out))
    return {"inner_params": [model.matern.eta, model.matern.nu]}


def _read_field(path, a):
    from .lattice import read_grid

    kw = {}
    if hasattr(a, "boundary"):
        kw = dict(boundary=a.boundary, neighborhood=a.neighborhood)
    return read_grid(path, **kw)


def cmd_na_field(a, out: Outputs):
    from .filtration import birth_process
    from .nelson_aalen import naive_variance, nelson_aalen

    bp = birth_process(_read_field(a.input, a), a.direction, a.convention)
    est, var = nelson_aalen(bp), naive_variance(bp)
    write_table(out.path(a.out), ["level", "value", "naive_variance", "at_risk"],
                [bp.field_levels, est.values, var.values, bp.at_risk_at_births])
    return {"births": int(bp.levels.size)}


def cmd_limit(a, out: Outputs):
    from .limiting import LimitSpec, iid_limit, limit_curve, model_percentile_levels
    from .randfield import MaternParams

    spec = LimitSpec(None if a.iid else MaternParams(a.eta, a.nu), a.nrows, a.ncols,
                     a.boundary, a.neighborhood, mc_samples=a.mc_samples, seed=a.seed,
                     mean_corrected=a.mean_corrected)
    lo, hi = a.lo, a.hi
    if lo is None or hi is None:
        _, grid = model_percentile_levels(spec, [0.5], 2)
        lo = grid[0] if lo is None else lo
        hi = grid[-1] if hi is None else hi
    spec.grid = np.linspace(lo, hi, a.points)
    curve = limit_curve(spec)
    se = curve.se if curve.se is not None else np.zeros(len(curve))
    cols = [curve.levels, curve.values, se]
    header = ["level", "value", "se"]
    if a.iid:
        header.append("closed_form")
        cols.append(iid_limit(curve.levels))
    write_table(out.path(a.out), header, cols)
    return {"lo": lo, "hi": hi}


def _write_band(path, band):
    write_table(path, ["level", "center", "lower", "upper"],
                [band.levels, band.center, band.lower, band.upper])


def cmd_band_replicates(a, out: Outputs):
    from .inference import replicate_band
    from .lattice import neighbor_table
    from .nelson_aalen import at_risk_percentile_grid, na_on_grid
    from .randfield import simulate_values

    if a.inputs:
        fields = [_read_field(p, a) for p in a.inputs]
        shapes = {f.values.shape for f in fields}
        if len(shapes) != 1:
            raise ValueError("replicate fields differ in shape")
        table = fields[0].neighbor_table
        vals = np.vstack([f.values.ravel() for f in fields])
        _, grid = at_risk_percentile_grid(fields, M=a.M)
    else:
        from .lattice import LatticeField

        model = _model(a)
        vals = simulate_values(model, a.nrows, a.ncols, a.N, a.seed).reshape(a.N, -1)
        table = neighbor_table(a.nrows, a.ncols)
        fields = [LatticeField(v.reshape(a.nrows, a.ncols), perturb_ties=False) for v in vals]
        _, grid = at_risk_percentile_grid(fields, M=a.M)
    curves = na_on_grid(vals, table, grid)
    band = replicate_band(curves, a.alpha, a.mc_draws, a.seed, levels=grid)
    _write_band(out.path(a.out), band)
    return {"threshold": band.threshold, "N": int(vals.shape[0])}


def cmd_band_bootstrap(a, out: Outputs):
    from .inference import bootstrap_band

    field = _read_field(a.input, a)
    band = bootstrap_band(field, a.B, a.alpha, seed=a.seed, M=a.M)
    _write_band(out.path(a.out), band)
    p = band.extra["params"]
    return {"threshold": band.threshold, "mle": [p.eta, p.nu]}


def cmd_coverage(a, out: Outputs):
    from .inference import coverage_experiment
    from .randfield import FieldModel, MaternParams

    tab = coverage_experiment(FieldModel("M1", MaternParams(a.eta, a.nu)), a.nrows, a.ncols,
                              a.method, a.trials, a.seed, N=a.N, B=a.B, alpha=a.alpha, M=a.M,
                              mc_draws=a.mc_draws, workers=a.threads)
    row = tab.row()
    write_table(out.path(a.out), ["method", *row], [[a.method], *[[v] for v in row.values()]])
    return {"coverage": row}


def cmd_tree_events(a, out: Outputs):
    from .trees import build_event_table, read_trees

    table = build_event_table(read_trees(a.input), a.proximity, workers=a.threads)
    df = table.df
    write_table(out.path(a.out), list(df.columns), [df[c].tolist() for c in df.columns])
    return {"rows": len(df), "excluded": 0 if table.excluded is None else len(table.excluded)}


def _load_event_table(path):
    import pandas as pd

    from .trees import EventTable, build_event_table, read_trees

    if str(path).lower().endswith(".json"):
        return build_event_table(read_trees(path))
    return EventTable(pd.read_csv(path, dtype={"tree_id": str}))


def cmd_cox_fit(a, out: Outputs):
    from .cox import cox_fit

    groups = {}
    for g in a.group:
        name, _, cols = g.partition("=")
        if not cols:
            raise ValueError(f"--group expects NAME=COL,COL, got {g!r}")
        groups[name] = cols.split(",")
    fit = cox_fit(_load_event_table(a.input), a.event, a.covariates, a.factor, groups, a.ties)
    with open(out.path(a.out), "w") as fh:
        json.dump(_jsonable(fit.to_dict()), fh, indent=1)
    return {"log_partial_likelihood": fit.log_partial_likelihood}


def cmd_plot(a, out: Outputs):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # stable element ids and no date stamp, so reruns are byte-identical
    matplotlib.rcParams["svg.hashsalt"] = "topohazard"

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for path in a.inputs:
        t = read_table(path)
        x = t.get("level", np.empty(0))
        label = Path(path).stem
        if x.size == 0:
            continue
        if "lower" in t and "upper" in t:
            ax.fill_between(x, t["lower"], t["upper"], step=None, alpha=0.25, lw=0)
            ax.plot(x, t["center"], lw=1.2, label=label)
        elif "value" in t:
            ax.step(x, t["value"], where="post", lw=1.2, label=label)
    if a.reference:
        r = read_table(a.reference)
        if r.get("level", np.empty(0)).size:
            ax.plot(r["level"], r["value"], "k--", lw=1, label="limit")
    ax.set_xlabel(a.xlabel)
    ax.set_ylabel(a.ylabel)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(out.path(a.out), format="svg", metadata={"Date": None})
    plt.close(fig)
    return {}


# required options may also come from --config, so they are checked after parsing
REQUIRED = {
    "simulate-field": ("out",),
    "na-field": ("input", "out"),
    "limit": ("out",),
    "band-replicates": ("out",),
    "band-bootstrap": ("input", "out"),
    "coverage": ("out",),
    "tree-events": ("input", "out"),
    "cox-fit": ("input", "out"),
    "plot": ("inputs", "out"),
}

COMMANDS = {
    "simulate-field": cmd_simulate_field,
    "na-field": cmd_na_field,
    "limit": cmd_limit,
    "band-replicates": cmd_band_replicates,
    "band-bootstrap": cmd_band_bootstrap,
    "coverage": cmd_coverage,
    "tree-events": cmd_tree_events,
    "cox-fit": cmd_cox_fit,
    "plot": cmd_plot,
}


def _config_defaults(argv) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    data = json.loads(Path(known.config).read_text())
    if isinstance(data.get("params"), dict):
        data = data["params"]
    return {k.replace("-", "_"): v for k, v in data.items() if k not in ("command", "config")}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        defaults = _config_defaults(argv)
    except (OSError, ValueError, AttributeError) as exc:
        print(f"topohazard: bad config: {exc}", file=sys.stderr)
        return 2
    command = next((t for t in argv if t in COMMANDS), None)
    if defaults and command:
        sp = parser.subcommands[command]
        known = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    try:
        args = parser.parse_args(argv)
        missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k) in (None, [])]
        if missing:
            flags = ", ".join("--in" if k.startswith("input") else f"--{k}" for k in missing)
            parser.error(f"{args.command}: missing required option(s) {flags}")
    except SystemExit as exc:
        return int(exc.code or 0)
    if hasattr(args, "seed") and args.seed is None:
        args.seed = int(np.random.SeedSequence().entropy % (2**63))
    out = Outputs()
    inputs = []
    for k in ("input", "inputs", "reference"):
        v = getattr(args, k, None)
        inputs += [v] if isinstance(v, str) else list(v or [])
    try:
        digests = {p: sha256(p) for p in inputs}
        extra = COMMANDS[args.command](args, out)
        params = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        manifest = {
            "subcommand": args.command,
            "params": _jsonable(params),
            "seed": getattr(args, "seed", None),
            "version": __version__,
            "inputs": digests,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "results": _jsonable(extra or {}),
        }
        with open(out.path(str(args.out) + ".manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)
        out.commit()
    except Exception as exc:  # noqa: BLE001 - report and clean up
        out.discard()
        print(f"topohazard {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Pointwise intervals and simultaneous bands for Nelson-Aalen curves.

Three routes to uncertainty are provided:

``replicate``
    ``N`` independent fields; pointwise mean and standard deviation, with a
    simultaneous threshold simulated from the estimated correlation of the
    discretised curves.
``bootstrap``
    One field; Matérn parameters fitted by maximum likelihood, ``B`` fields
    simulated from the fit, and a max-|t| threshold taken from the bootstrap
    curves themselves.
``naive``
    One field with the counting-process variance, treated as a process with
    independent increments (equal-precision band).  Kept as a reference: it
    ignores spatial dependence and under-covers.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .filtration import _oriented
from .lattice import LatticeField, neighbor_table
from .limiting import LimitSpec, limit_curve, model_percentile_levels
from .nelson_aalen import StepCurve, na_on_grid, percentile_levels, exit_levels
from .randfield import FieldModel, MaternParams, fit_matern_mle, simulate_values

log = logging.getLogger(__name__)

METHODS = ("replicate", "bootstrap", "naive")
PERCENTILES = (0.9, 0.7, 0.5, 0.3, 0.1)
PSD_FLOOR = 1e-10


class DegenerateBandWarning(UserWarning):
    pass


@dataclass
class BandResult:
    levels: np.ndarray
    center: np.ndarray
    half_width: np.ndarray
    threshold: float
    alpha: float
    method: str
    sd: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def lower(self):
        return self.center - self.half_width

    @property
    def upper(self):
        return self.center + self.half_width

    def covers(self, truth) -> bool:
        truth = np.asarray(truth, dtype=float)
        return bool(np.all((self.lower <= truth) & (truth <= self.upper)))


def _as_matrix(curves) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(curves, np.ndarray):
        return np.atleast_2d(curves).astype(float), None
    curves = list(curves)
    if not curves:
        raise ValueError("no curves given")
    if isinstance(curves[0], StepCurve):
        levels = curves[0].levels
        for c in curves[1:]:
            if c.levels.shape != levels.shape or not np.array_equal(c.levels, levels):
                raise ValueError("curves are not on a common grid")
        return np.vstack([c.values for c in curves]), levels
    return np.atleast_2d(np.asarray(curves, dtype=float)), None


def _zcrit(alpha):
    return float(special.ndtri(1 - alpha / 2))


def replicate_pointwise(curves, alpha: float = 0.05, levels=None) -> BandResult:
    """Normal-theory pointwise intervals ``mean +- z sd / sqrt(N)``."""
    A, grid = _as_matrix(curves)
    if A.shape[0] < 2:
        raise ValueError("need at least two replicate curves")
    levels = grid if levels is None else np.asarray(levels, dtype=float)
    if levels is None:
        levels = np.arange(A.shape[1], dtype=float)
    z = _zcrit(alpha)
    sd = A.std(axis=0, ddof=1)
    return BandResult(levels, A.mean(axis=0), z * sd / np.sqrt(A.shape[0]), z, alpha,
                      "replicate", sd)


def psd_sqrt(cor: np.ndarray) -> np.ndarray:
    """Square root factor of a correlation estimate after eigenvalue clipping."""
    w, v = np.linalg.eigh(cor)
    if w.min() < -1e-8:
        warnings.warn(
            f"correlation estimate not PSD (min eigenvalue {w.min():.3g}); clipped",
            DegenerateBandWarning,
            stacklevel=3,
        )
    clipped = np.clip(w, PSD_FLOOR, None)
    log.debug("PSD repair magnitude %.3g", float(np.abs(clipped - w).max()))
    return v * np.sqrt(clipped)


def max_abs_quantile(root: np.ndarray, alpha: float, draws: int, rng) -> float:
    """Upper-``alpha`` quantile of ``max_j |G_j|`` for ``G = root @ Z``."""
    g = root @ rng.standard_normal((root.shape[1], draws))
    return float(np.quantile(np.abs(g).max(axis=0), 1 - alpha))


def replicate_band(
    curves, alpha: float = 0.05, mc_draws: int = 10_000, seed=0, levels=None
) -> BandResult:
    """Simultaneous band ``mean +- c sd / sqrt(N)`` from replicate curves.

    ``c`` is the upper-``alpha`` quantile of the maximum absolute value of a
    Gaussian vector with standard margins and the replicates' correlation,
    found by direct simulation.  Grid points with zero spread (typically
    below every replicate's first birth) are left out of the maximum.
    """
    A, grid = _as_matrix(curves)
    if A.shape[0] < 3:
        raise ValueError("need at least three replicate curves")
    levels = grid if levels is None else np.asarray(levels, dtype=float)
    if levels is None:
        levels = np.arange(A.shape[1], dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    N = A.shape[0]
    mean = A.mean(axis=0)
    live = A.max(axis=0) > A.min(axis=0)
    sd = np.where(live, A.std(axis=0, ddof=1), 0.0)
    if not live.any():
        raise ValueError("all replicate curves identical; no band can be formed")
    cor = np.atleast_2d(np.corrcoef(A[:, live], rowvar=False))
    c = max_abs_quantile(psd_sqrt(cor), alpha, mc_draws, rng)
    return BandResult(levels, mean, c * sd / np.sqrt(N), c, alpha, "replicate", sd)


def naive_band(
    est: np.ndarray, var: np.ndarray, levels, alpha: float = 0.05, mc_draws: int = 10_000, seed=0
) -> BandResult:
    """Equal-precision band from the counting-process variance of one field.

    Treats the estimate as a Gaussian process with independent increments
    and variance ``var``; the threshold is the upper-``alpha`` quantile of
    ``max_j |W_j| / sd_j`` over grid points with positive variance.
    ``extra["pointwise_half_width"]`` holds ``z sd``.
    """
    est = np.asarray(est, dtype=float)
    var = np.asarray(var, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sd = np.sqrt(var)
    live = sd > 0
    if not live.any():
        raise ValueError("zero naive variance everywhere on the grid")
    v = var[live]
    steps = np.sqrt(np.diff(np.concatenate([[0.0], v])).clip(min=0))
    w = np.cumsum(steps[:, None] * rng.standard_normal((v.size, mc_draws)), axis=0)
    c = float(np.quantile(np.abs(w / np.sqrt(v)[:, None]).max(axis=0), 1 - alpha))
    return BandResult(np.asarray(levels, float), est, c * sd, c, alpha, "naive", sd,
                      {"pointwise_half_width": _zcrit(alpha) * sd})


# --- parametric bootstrap ---------------------------------------------------


def _default_simulator(field: LatticeField):
    def simulate(params: MaternParams, B: int, seed) -> np.ndarray:
        vals = simulate_values(FieldModel("M1", params), field.nrows, field.ncols, B, seed)
        return vals.reshape(B, -1)

    return simulate


def bootstrap_curves(field: LatticeField, B: int, levels, seed=0, simulator=None,
                     params: MaternParams | None = None, direction="sublevel",
                     convention="left"):
    """Original and bootstrap Nelson-Aalen curves on ``levels``.

    Returns ``(original (M,), bootstrap (B, M), params, sims)``; ``params`` are
    the Matérn MLE of ``field`` unless supplied.
    """
    if params is None:
        params = fit_matern_mle(field).params
    simulator = simulator or _default_simulator(field)
    table = field.neighbor_table
    sims = np.asarray(simulator(params, B, seed), dtype=float).reshape(B, -1)
    if direction == "superlevel":
        sims = -sims
    orig = na_on_grid(_oriented(field, direction)[None, :], table, levels, convention)[0]
    boot = na_on_grid(sims, table, levels, convention)
    return orig, boot, params, sims


def bootstrap_threshold(boot: np.ndarray, alpha: float):
    """``(d_alpha, mean, sd, G)`` for bootstrap curves ``boot`` of shape ``(B, M)``."""
    mean = boot.mean(axis=0)
    # exact comparison: a rounding-level std of identical curves is still zero spread
    live = boot.max(axis=0) > boot.min(axis=0)
    sd = np.where(live, boot.std(axis=0, ddof=1), 0.0)
    if not live.any():
        raise ValueError("bootstrap curves have zero spread at every grid point")
    if not live.all():
        warnings.warn(
            f"{int((~live).sum())} grid point(s) with zero bootstrap spread dropped from max",
            DegenerateBandWarning,
            stacklevel=3,
        )
    G = (np.abs(boot[:, live] - mean[live]) / sd[live]).max(axis=1)
    return float(np.quantile(G, 1 - alpha)), mean, sd, G


def bootstrap_band(
    field: LatticeField,
    B: int = 200,
    alpha: float = 0.05,
    grid=None,
    seed=0,
    simulator=None,
    params: MaternParams | None = None,
    M: int = 200,
) -> BandResult:
    """Parametric-bootstrap simultaneous band around the observed curve.

    Bands are ``A_hat_j +- d_alpha sd_j`` where ``A_hat`` is the curve of
    the observed field, ``sd`` the bootstrap standard deviation and
    ``d_alpha`` the upper-``alpha`` quantile of
    ``G_b = max_j |A_bj - mean_j| / sd_j``.  Without a ``grid`` the central
    90% of the pooled bootstrap at-risk distribution is used.
    """
    if B < 100:
        raise ValueError("B must be at least 100")
    if params is None:
        params = fit_matern_mle(field).params
    simulator = simulator or _default_simulator(field)
    sims = np.asarray(simulator(params, B, seed), dtype=float).reshape(B, -1)
    table = field.neighbor_table
    if grid is None:
        _, grid = percentile_levels(exit_levels(sims, table).ravel(), [0.5], M)
    grid = np.asarray(grid, dtype=float)
    orig = na_on_grid(field.values.ravel()[None, :], table, grid)[0]
    boot = na_on_grid(sims, table, grid)
    d, mean, sd, G = bootstrap_threshold(boot, alpha)
    return BandResult(grid, orig, d * sd, d, alpha, "bootstrap", sd,
                      {"params": params, "boot_mean": mean, "G": G,
                       "pointwise_half_width": _zcrit(alpha) * sd})


# --- coverage experiment ----------------------------------------------------


@dataclass
class CoverageTable:
    method: str
    probs: tuple
    pointwise: dict
    simultaneous: float | None
    trials: int
    levels: np.ndarray
    grid: np.ndarray
    config: dict

    def row(self) -> dict:
        out = {f"{p:g}": self.pointwise[p] for p in self.probs}
        out["SCB"] = self.simultaneous
        return out


def _trial_seed(seed, trial, stream):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial, stream)))


def coverage_experiment(
    model: FieldModel,
    nrows: int,
    ncols: int,
    method: str,
    trials: int,
    seed: int = 0,
    N: int = 40,
    B: int = 200,
    alpha: float = 0.05,
    probs=PERCENTILES,
    M: int = 200,
    mc_draws: int = 10_000,
    fit_params: bool = True,
    workers: int = 1,
    truth_spec: LimitSpec | None = None,
) -> CoverageTable:
    """Coverage (%) of nominal ``1 - alpha`` intervals for the limiting curve.

    Pointwise coverage is scored at the levels where the expected at-risk
    fraction equals each of ``probs``; the simultaneous band is scored on
    ``M`` levels spanning the central 90% of the at-risk distribution.  The
    target is the limit curve of the (mean-corrected) Gaussian model, so
    only ``M1`` is supported.  With ``fit_params=False`` the bootstrap
    simulates from the true parameters instead of the MLE.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if model.kind != "M1":
        raise ValueError("coverage targets need a Gaussian (M1) model")
    probs = tuple(probs)
    config = dict(model=model.kind, eta=model.matern.eta, nu=model.matern.nu, nrows=nrows,
                  ncols=ncols, method=method, trials=trials, seed=seed, N=N, B=B,
                  alpha=alpha, M=M, mc_draws=mc_draws)
    if trials == 0:
        empty = np.empty(0)
        return CoverageTable(method, probs, {p: float("nan") for p in probs}, None, 0,
                             empty, empty, config)
    spec = truth_spec or LimitSpec(model.matern, nrows, ncols, mean_corrected=True)
    levels, grid = model_percentile_levels(spec, probs, M)
    spec.grid = np.union1d(grid, levels)
    truth_curve = limit_curve(spec)
    truth_pts = truth_curve(levels)
    truth_grid = truth_curve(grid)
    table = neighbor_table(nrows, ncols)
    eval_at = np.concatenate([levels, grid])
    P = len(probs)
    z = _zcrit(alpha)

    def run(t):
        if method == "replicate":
            vals = simulate_values(model, nrows, ncols, N, seed, start=t * N).reshape(N, -1)
            A = na_on_grid(vals, table, eval_at)
            pw = replicate_pointwise(A[:, :P], alpha)
            band = replicate_band(A[:, P:], alpha, mc_draws, _trial_seed(seed, t, 1))
            return (np.abs(pw.center - truth_pts) <= pw.half_width,
                    band.covers(truth_grid))
        vals = simulate_values(model, nrows, ncols, 1, seed, start=t).reshape(1, -1)
        if method == "naive":
            est, var = na_on_grid(vals, table, eval_at, with_variance=True)
            band = naive_band(est[0, P:], var[0, P:], grid, alpha, mc_draws,
                              _trial_seed(seed, t, 1))
            pw_ok = np.abs(est[0, :P] - truth_pts) <= z * np.sqrt(var[0, :P])
            return pw_ok, band.covers(truth_grid)
        field_ = LatticeField(vals.reshape(nrows, ncols))
        params = None if fit_params else model.matern
        orig, boot, _, _ = bootstrap_curves(field_, B, eval_at, seed=(seed, t, 2),
                                            params=params)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateBandWarning)
            d, _, sd, _ = bootstrap_threshold(boot[:, P:], alpha)
        boot_sd = boot[:, :P].std(axis=0, ddof=1)
        pw_ok = np.abs(orig[:P] - truth_pts) <= z * boot_sd
        lo, hi = orig[P:] - d * sd, orig[P:] + d * sd
        return pw_ok, bool(np.all((lo <= truth_grid) & (truth_grid <= hi)))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(trials)))
    else:
        results = [run(t) for t in range(trials)]
    pw = np.array([r[0] for r in results])
    scb = np.array([r[1] for r in results])
    pointwise = {p: 100.0 * float(pw[:, i].mean()) for i, p in enumerate(probs)}
    return CoverageTable(method, probs, pointwise, 100.0 * float(scb.mean()), trials,
                         levels, grid, config)

"""Limiting cumulative hazard of component births for Gaussian lattice fields.

For a stationary Gaussian field the replicate mean of the Nelson-Aalen
curve converges to

    A(t) = int_{-inf}^t  sum_x P(nbrs(x) > u | z_x = u) phi(u)
                         / sum_x P(z_x > u, nbrs(x) > u)  du.

Both sums only depend on a cell's neighbour displacement pattern (interior,
edge, corner, ...), so each level needs one pair of orthant probabilities
per pattern rather than one per cell.  Orthant probabilities come from a
randomised quasi-Monte Carlo version of Genz's sequential conditioning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, signal, special
from scipy.stats import qmc

from .lattice import neighbor_offsets
from .nelson_aalen import StepCurve
from .randfield import FactorizationError, MaternParams, matern_cor

MIN_SAMPLES = 10_000
_TAIL_START = -6.0


class TruncationWarning(UserWarning):
    pass


def _chol_psd(cor: np.ndarray) -> np.ndarray:
    cor = np.asarray(cor, dtype=float)
    if cor.ndim != 2 or cor.shape[0] != cor.shape[1] or not np.allclose(cor, cor.T):
        raise ValueError("correlation matrix must be square and symmetric")
    d = cor.shape[0]
    for jitter in (0.0, 1e-10):
        try:
            return np.linalg.cholesky(cor + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError("correlation matrix is not positive semi-definite after jitter")


def _qmc_points(dim: int, n: int, n_rand: int, seed):
    """``n_rand`` independently scrambled Sobol sets, shape ``(n_rand, n, dim)``."""
    if dim == 0:
        return np.empty((n_rand, n, 0))
    ss = np.random.SeedSequence(seed)
    return np.stack(
        [qmc.Sobol(dim, scramble=True, seed=np.random.default_rng(s)).random(n)
         for s in ss.spawn(n_rand)]
    )


def _genz_upper(lower: np.ndarray, chol: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Integrand values of ``P(Y > lower)`` with ``Y = chol @ e``.

    ``lower`` is ``(K, d)``; ``w`` is ``(S, d-1)`` uniforms.  Returns
    ``(K, S)``; the mean over ``S`` estimates each orthant probability.
    """
    K, d = lower.shape
    S = w.shape[0]
    f = np.ones((K, S))
    e = np.zeros((K, S, d))
    for i in range(d):
        shift = e[:, :, :i] @ chol[i, :i] if i else 0.0
        li = (lower[:, i : i + 1] - shift) / chol[i, i]
        q = special.ndtr(-li)
        f *= q
        if i < d - 1:
            # truncated-normal draw above li, via the upper tail for precision
            v = np.clip(w[:, i] * q, 1e-300, None)
            e[:, :, i] = np.where(q > 0, -special.ndtri(v), li)
    return f


def _orthant_batch(lower, cor, samples, seed, n_rand=8):
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    d = lower.shape[1]
    if d == 1:
        p = special.ndtr(-lower[:, 0])
        return p, np.zeros_like(p)
    # most restrictive coordinates first, judged on the batch-average limit
    perm = np.argsort(-lower.mean(axis=0), kind="stable")
    chol = _chol_psd(np.asarray(cor)[np.ix_(perm, perm)])
    lower = lower[:, perm]
    n = max(2, int(2 ** np.ceil(np.log2(max(samples // n_rand, 2)))))
    pts = _qmc_points(d - 1, n, n_rand, seed)
    est = np.stack([_genz_upper(lower, chol, pts[r]).mean(axis=1) for r in range(n_rand)])
    return est.mean(axis=0), est.std(axis=0, ddof=1) / np.sqrt(n_rand)


def mvn_upper_orthant(mean, cor, threshold: float = 0.0, samples: int = 2**15, seed=0):
    """``P(X_i > threshold for all i)`` for ``X ~ N(mean, cor)``.

    ``cor`` must be a correlation matrix (unit diagonal) of dimension at
    most 9.  Returns ``(estimate, standard_error)``; the error comes from
    independent scramblings of the quasi-random point set.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cor = np.atleast_2d(np.asarray(cor, dtype=float))
    if cor.shape != (mean.size, mean.size):
        raise ValueError("mean and correlation dimensions differ")
    if mean.size > 9:
        raise ValueError("dimension must be at most 9")
    if not np.allclose(np.diag(cor), 1.0):
        raise ValueError("cor must have unit diagonal")
    p, se = _orthant_batch((threshold - mean)[None, :], cor, samples, seed)
    return float(p[0]), float(se[0])


# --- limit curve ------------------------------------------------------------


@dataclass
class LimitSpec:
    """Inputs to :func:`limit_curve`.

    ``matern=None`` means independent cells.  ``mean_corrected`` evaluates
    the limit for fields whose lattice sample mean has been subtracted,
    as :mod:`topohazard.randfield` simulations are.
    """

    matern: MaternParams | None
    nrows: int
    ncols: int
    boundary: str = "open"
    neighborhood: str = "edge4"
    grid: np.ndarray | None = None
    mc_samples: int = 2**14
    seed: int = 0
    integration_points: int = 400
    mean_corrected: bool = False

    def __post_init__(self):
        if self.mc_samples < MIN_SAMPLES:
            raise ValueError(f"mc_samples must be at least {MIN_SAMPLES}")
        if self.grid is not None:
            self.grid = np.asarray(self.grid, dtype=float)
            if np.any(np.diff(self.grid) < 0):
                raise ValueError("grid must be sorted")


def _cor_fn(matern):
    if matern is None:
        return lambda u: (np.asarray(u) == 0).astype(float)
    return lambda u: matern_cor(u, matern)


def local_correlation(offsets, matern: MaternParams | None) -> np.ndarray:
    """Correlation of ``[centre, neighbours...]`` for a displacement pattern."""
    pts = np.vstack([[0, 0], np.asarray(offsets, dtype=float).reshape(-1, 2)])
    dist = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
    return _cor_fn(matern)(dist)


def conditional_neighbor_law(cov: np.ndarray):
    """Law of the neighbours given the centre value.

    ``cov`` is the covariance of ``[centre, neighbours...]``.  Given
    ``z_x = u`` the neighbours are Gaussian with mean ``beta * u`` and
    covariance ``S_nn - S_nx S_xn / v`` (``beta = S_nx / v``,
    ``v = var(z_x)``); for unit variance ``beta`` is the centre-neighbour
    correlation vector.  Returns ``(beta, cond_cov)``.
    """
    cov = np.asarray(cov, dtype=float)
    v = cov[0, 0]
    cross = cov[1:, 0]
    return cross / v, cov[1:, 1:] - np.outer(cross, cross) / v


def _row_means(spec: LimitSpec) -> tuple[np.ndarray, float]:
    """Row means ``s`` of the lattice covariance and their grand mean."""
    nr, nc = spec.nrows, spec.ncols
    if spec.matern is None:
        s = np.full(nr * nc, 1.0 / (nr * nc))
        return s, 1.0 / (nr * nc)
    di = np.arange(-(nr - 1), nr)
    dj = np.arange(-(nc - 1), nc)
    kernel = matern_cor(np.hypot(*np.meshgrid(di, dj, indexing="ij")), spec.matern)
    s = signal.fftconvolve(kernel, np.ones((nr, nc)), mode="valid").ravel() / (nr * nc)
    return s, float(s.mean())


def _symmetries(square: bool):
    maps = [lambda a, b: (a, b), lambda a, b: (-a, b), lambda a, b: (a, -b), lambda a, b: (-a, -b)]
    if square:
        maps += [lambda a, b, g=g: g(b, a) for g in maps]
    return maps


def local_classes(spec: LimitSpec):
    """``(count, covariance)`` of ``[centre, neighbours...]`` per cell class.

    Cells are grouped by neighbour displacement pattern up to the lattice's
    reflections, which leave an isotropic correlation unchanged.  For a
    mean-corrected field the covariance is ``P Sigma P`` with
    ``P = I - 11'/n``; each cell's block then depends on its position
    through the covariance row means, and the class covariance is the
    average block over its members.
    """
    nr, nc = spec.nrows, spec.ncols
    maps = _symmetries(nr == nc)
    groups: dict[tuple, list] = {}
    for idx, off in enumerate(neighbor_offsets(nr, nc, spec.boundary, spec.neighborhood)):
        candidates = []
        for g in maps:
            moved = [g(*o) for o in off]
            order = sorted(range(len(off)), key=moved.__getitem__)
            candidates.append((tuple(moved[i] for i in order), order))
        key, order = min(candidates)
        groups.setdefault(key, []).append((idx, [off[i] for i in order]))
    if spec.mean_corrected:
        s, grand = _row_means(spec)
    out = []
    for key, members in sorted(groups.items()):
        cov = local_correlation(key, spec.matern)
        if spec.mean_corrected:
            idx = np.array([m[0] for m in members])
            loc = np.array([[(0, 0)] + m[1] for m in members], dtype=int).reshape(len(members), -1, 2)
            rr = (idx[:, None] // nc + loc[:, :, 0]) % nr
            cc = (idx[:, None] % nc + loc[:, :, 1]) % nc
            sl = s[rr * nc + cc]  # (members, k+1)
            cov = cov - (sl[:, :, None] + sl[:, None, :]).mean(axis=0) + grand
        out.append((len(members), cov))
    return out


def _class_probabilities(cov, levels, samples, seed, numerator=True):
    """Per-class numerator ``P(nbrs > u | z_x = u) f_x(u)`` and denominator
    ``P(z_x > u, nbrs > u)``, with Monte Carlo standard errors."""
    levels = np.asarray(levels, dtype=float)
    k = cov.shape[0] - 1
    sd_all = np.sqrt(np.diag(cov))
    zeros = np.zeros_like(levels)
    dens = np.exp(-0.5 * (levels / sd_all[0]) ** 2) / (sd_all[0] * np.sqrt(2 * np.pi))
    if k == 0:
        return dens, zeros, special.ndtr(-levels / sd_all[0]), zeros
    num, num_se = zeros, zeros
    if numerator:
        beta, ccov = conditional_neighbor_law(cov)
        sd = np.sqrt(np.clip(np.diag(ccov), 1e-300, None))
        ccor = ccov / np.outer(sd, sd)
        np.fill_diagonal(ccor, 1.0)
        lower_num = levels[:, None] * (1.0 - beta)[None, :] / sd[None, :]
        p, se = _orthant_batch(lower_num, ccor, samples, seed)
        num, num_se = p * dens, se * dens
    cor = cov / np.outer(sd_all, sd_all)
    np.fill_diagonal(cor, 1.0)
    lower_den = levels[:, None] / sd_all[None, :]
    den, den_se = _orthant_batch(lower_den, cor, samples, seed + 1)
    return num, num_se, den, den_se


def _hazard_terms(spec: LimitSpec, levels, numerator=True):
    levels = np.asarray(levels, dtype=float)
    num = np.zeros_like(levels)
    den = np.zeros_like(levels)
    num_var = np.zeros_like(levels)
    den_var = np.zeros_like(levels)
    for j, (count, cov) in enumerate(local_classes(spec)):
        pn, sn, pd, sd = _class_probabilities(
            cov, levels, spec.mc_samples, spec.seed + 2 * j, numerator
        )
        num += count * pn
        den += count * pd
        num_var += (count * sn) ** 2
        den_var += (count * sd) ** 2
    return num, np.sqrt(num_var), den, np.sqrt(den_var)


def expected_at_risk_fraction(spec: LimitSpec, levels) -> np.ndarray:
    """``E{Y(t)} / |X|`` -- the mean share of cells still at risk at ``t``."""
    _, _, den, _ = _hazard_terms(spec, levels, numerator=False)
    return den / (spec.nrows * spec.ncols)


def model_percentile_levels(spec: LimitSpec, probs, M: int = 200, span=(0.95, 0.05)):
    """Levels where the expected at-risk fraction equals each ``p``, and an
    ``M``-point grid spanning the ``span`` fractions."""
    probe = np.linspace(-5.0, 5.0, 401)
    frac = expected_at_risk_fraction(spec, probe)

    def lv(p):
        # frac decreases in t; interpolate on the negated arrays
        return float(np.interp(-p, -frac, probe))

    levels = np.array([lv(p) for p in probs])
    return levels, np.linspace(lv(span[0]), lv(span[1]), M)


def limit_curve(spec: LimitSpec) -> StepCurve:
    """Limiting curve ``A(t)`` on ``spec.grid`` (trapezoid rule).

    The integrand is evaluated on ``integration_points`` levels from far in
    the lower tail up to the top of the grid, merged with the grid itself.
    The returned curve's ``se`` is a conservative Monte Carlo error bound
    (per-level errors summed, not added in quadrature).  Levels past the
    point where the expected risk set underflows are dropped with a
    :class:`TruncationWarning`.
    """
    grid = spec.grid
    if grid is None:
        _, grid = model_percentile_levels(spec, [0.5])
    grid = np.asarray(grid, dtype=float)
    lo = min(_TAIL_START, grid[0])
    nodes = np.union1d(np.linspace(lo, grid[-1], spec.integration_points), grid)
    num, num_se, den, den_se = _hazard_terms(spec, nodes)
    ok = den > 1e-280
    if not ok.all():
        cut = int(np.argmin(ok))
        warnings.warn(
            f"expected risk set underflows above level {nodes[cut]:.4g}; curve truncated",
            TruncationWarning,
            stacklevel=2,
        )
        nodes, num, num_se, den, den_se = (a[:cut] for a in (nodes, num, num_se, den, den_se))
        grid = grid[grid <= nodes[-1]] if nodes.size else grid[:0]
    h = num / den
    rel = np.sqrt((num_se / np.where(num > 0, num, 1)) ** 2 + (den_se / den) ** 2)
    h_se = np.abs(h) * rel
    A = integrate.cumulative_trapezoid(h, nodes, initial=0.0)
    A_se = integrate.cumulative_trapezoid(h_se, nodes, initial=0.0)
    idx = np.searchsorted(nodes, grid)
    return StepCurve(grid, A[idx], kind="grid", se=A_se[idx])


def iid_limit(t):
    """Closed form ``-log(1 - Phi(t))`` for independent cells."""
    return -special.log_ndtr(-np.asarray(t, dtype=float))

"""Cox proportional hazards for edge events with delayed entry.

An edge with interval ``(entry, exit]`` is at risk at radius ``r`` when
``entry < r <= exit``.  Ties are handled by Breslow's approximation by
default (Efron optional).  Fixed effects (e.g. one per tree) enter as
dummy columns with the first sorted level as reference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .nelson_aalen import StepCurve
from .trees import EventTable

TIES = ("breslow", "efron")
MAX_ITER = 50
REL_TOL = 1e-9
GRAD_TOL = 1e-6
# |beta * sd(x)| beyond this means a hazard ratio per sd of e^30: treat as infinite
DIVERGENCE = 30.0


class ConvergenceError(RuntimeError):
    pass


class RankDeficiencyError(ValueError):
    pass


class MonotoneLikelihoodError(RuntimeError):
    def __init__(self, msg, columns=()):
        super().__init__(msg)
        self.columns = tuple(columns)


class ConstantCovariateWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Design:
    """Canonically ordered model inputs.

    ``terms`` maps a term name to the design columns it owns; single
    covariates own one column, groups and factors several.
    """

    X: np.ndarray
    columns: tuple
    terms: dict
    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    ties: str = "breslow"
    factor: str | None = None
    factor_levels: tuple = ()

    @property
    def p(self) -> int:
        return self.X.shape[1]


def design_matrix(
    table: EventTable,
    event: str = "leaf",
    covariates=(),
    factor: str | None = None,
    groups: dict | None = None,
    ties: str = "breslow",
) -> Design:
    """Build a :class:`Design` from an event table.

    ``covariates`` name single columns; ``groups`` maps a term name to a list
    of columns analysed jointly (e.g. a basis expansion); ``factor`` names a
    column expanded into dummies.  Rows are sorted by a key over all inputs,
    so permuting the table does not change any result.
    """
    if event not in ("leaf", "branch"):
        raise ValueError("event must be 'leaf' or 'branch'")
    if ties not in TIES:
        raise ValueError(f"ties must be one of {TIES}")
    df = table.df
    groups = dict(groups or {})
    cols, terms, blocks = [], {}, []
    for name in covariates:
        terms[name] = [len(cols)]
        cols.append(name)
        blocks.append(df[[name]].to_numpy(float))
    for name, members in groups.items():
        terms[name] = list(range(len(cols), len(cols) + len(members)))
        cols.extend(members)
        blocks.append(df[list(members)].to_numpy(float))
    levels = ()
    if factor is not None:
        labels = df[factor].astype(str).to_numpy()
        levels = tuple(sorted(set(labels)))
        dummies = [f"{factor}[{lv}]" for lv in levels[1:]]
        if dummies:
            terms[factor] = list(range(len(cols), len(cols) + len(dummies)))
            cols.extend(dummies)
            blocks.append(np.column_stack([(labels == lv).astype(float) for lv in levels[1:]]))
    if len(set(cols)) != len(cols):
        raise ValueError("a column appears in more than one term")
    X = np.hstack(blocks) if blocks else np.empty((len(df), 0))
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite covariate values")
    entry = df["entry"].to_numpy(float)
    exit_ = df["exit"].to_numpy(float)
    ev = (df["status"] == event).to_numpy()
    keys = [X[:, j] for j in range(X.shape[1] - 1, -1, -1)] + [ev, entry, exit_]
    order = np.lexsort(keys)
    X = np.ascontiguousarray(X[order])
    _check_rank(X, cols)
    return Design(X, tuple(cols), terms, entry[order], exit_[order], ev[order], ties, factor, levels)


def _check_rank(X: np.ndarray, cols) -> None:
    if X.shape[1] == 0:
        return
    Xc = X - X.mean(axis=0)
    scale = np.linalg.norm(Xc, axis=0)
    const = scale == 0
    if const.any():
        names = [cols[j] for j in np.flatnonzero(const)]
        raise RankDeficiencyError(f"constant (aliased with baseline) columns: {names}")
    Xs = Xc / scale
    _, R, piv = linalg.qr(Xs, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(Xs.shape) * np.finfo(float).eps * 1e3 * d[0]
    bad = piv[d <= tol] if d.size else []
    if len(bad):
        raise RankDeficiencyError(f"aliased columns: {[cols[j] for j in sorted(bad)]}")


def _event_times(d: Design):
    t = d.exit[d.event]
    return np.unique(t)


def partial_loglik(d: Design, beta, chunk: int = 512):
    """Log partial likelihood, gradient and Hessian at ``beta``.

    Risk-set sums are formed by masked matrix products over blocks of
    event times.  Covariates are centred internally, which changes none of
    the three outputs.
    """
    beta = np.asarray(beta, dtype=float).reshape(-1)
    p = d.p
    X = d.X - d.X.mean(axis=0) if p else d.X
    eta = X @ beta if p else np.zeros(len(d.exit))
    c = eta.max() if eta.size else 0.0
    w = np.exp(eta - c)
    xx = (X[:, :, None] * X[:, None, :]).reshape(len(w), p * p)
    W = np.column_stack([w, w[:, None] * X, w[:, None] * xx])
    times = _event_times(d)
    ll, g, H = 0.0, np.zeros(p), np.zeros((p, p))
    for s in range(0, times.size, chunk):
        t = times[s : s + chunk, None]
        at_risk = ((d.entry < t) & (t <= d.exit)).astype(float)
        hit = ((d.exit == t) & d.event).astype(float)
        R = at_risk @ W
        D = hit @ W
        nd = hit.sum(axis=1).astype(int)
        ll += float((hit @ eta).sum())
        if p:
            g += (hit @ X).sum(axis=0)
        # one row per (time, tie index) with Efron weight phi (0 for Breslow)
        k = np.repeat(np.arange(t.shape[0]), nd)
        r = np.concatenate([np.arange(n) for n in nd])
        phi = r / nd[k] if d.ties == "efron" else np.zeros(k.size)
        S = R[k] - phi[:, None] * D[k]
        S0 = S[:, 0]
        ll -= float(np.sum(np.log(S0) + c))
        if p:
            m1 = S[:, 1 : 1 + p] / S0[:, None]
            m2 = (S[:, 1 + p :] / S0[:, None]).reshape(-1, p, p)
            g -= m1.sum(axis=0)
            H -= (m2 - m1[:, :, None] * m1[:, None, :]).sum(axis=0)
    return ll, g, H


def _sd(X):
    return X.std(axis=0) if X.shape[0] else np.ones(X.shape[1])


def newton(d: Design, init=None, max_iter: int = MAX_ITER):
    """Maximise the partial likelihood.  Returns ``(beta, ll, g, H, n_iter, trace)``."""
    p = d.p
    beta = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    ll, g, H = partial_loglik(d, beta)
    trace = [ll]
    if p == 0:
        return beta, ll, g, H, 0, trace
    sd = _sd(d.X)
    for it in range(1, max_iter + 1):
        try:
            step = linalg.solve(-H, g, assume_a="sym")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(-H, g, rcond=None)[0]
        for _ in range(40):
            new = beta + step
            ll_new, g_new, H_new = partial_loglik(d, new)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        else:
            raise ConvergenceError(
                f"step-halving failed at iteration {it}; max |gradient| {np.abs(g).max():.3g}"
            )
        dl = ll_new - ll
        beta, ll, g, H = new, max(ll_new, ll), g_new, H_new
        trace.append(ll)
        big = np.abs(beta * sd) > DIVERGENCE
        if big.any():
            names = [d.columns[j] for j in np.flatnonzero(big)]
            raise MonotoneLikelihoodError(
                f"monotone likelihood: coefficient(s) {names} diverging (|beta|={np.abs(beta[big])})",
                names,
            )
        if abs(dl) <= REL_TOL * max(abs(ll), 1e-300) and np.abs(g).max() < GRAD_TOL:
            return beta, ll, g, H, it, trace
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations; max |gradient| {np.abs(g).max():.3g}"
    )


@dataclass
class CoxFit:
    coefficients: pd.Series
    covariance: pd.DataFrame
    log_partial_likelihood: float
    null_log_partial_likelihood: float
    terms: pd.DataFrame
    baseline: StepCurve
    hr_20_80: pd.Series
    n_events: int
    n_iter: int
    design: Design = field(repr=False)
    trace: list = field(default_factory=list, repr=False)

    @property
    def se(self) -> pd.Series:
        return pd.Series(np.sqrt(np.diag(self.covariance.to_numpy())), index=self.coefficients.index)

    def summary(self) -> pd.DataFrame:
        """Per-term table: coefficient (single-column terms), SE, chi-square, df, p, hr."""
        out = self.terms.copy()
        coef = [self.coefficients.iloc[idx[0]] if len(idx) == 1 else np.nan
                for idx in self.design.terms.values()]
        se = self.se
        out.insert(0, "coef", coef)
        out.insert(1, "se", [se.iloc[idx[0]] if len(idx) == 1 else np.nan
                             for idx in self.design.terms.values()])
        out["hr"] = self.hr_20_80.reindex(out.index)
        return out

    def to_dict(self) -> dict:
        s = self.summary()
        return {
            "log_partial_likelihood": self.log_partial_likelihood,
            "null_log_partial_likelihood": self.null_log_partial_likelihood,
            "n_events": self.n_events,
            "n_iter": self.n_iter,
            "coefficients": self.coefficients.to_dict(),
            "se": self.se.to_dict(),
            "terms": {k: {c: (None if pd.isna(v) else float(v)) for c, v in row.items()}
                      for k, row in s.iterrows()},
        }


def wald_terms(d: Design, beta, cov) -> pd.DataFrame:
    rows = {}
    for name, idx in d.terms.items():
        b = beta[idx]
        V = cov[np.ix_(idx, idx)]
        chi2 = float(b @ linalg.solve(V, b, assume_a="pos"))
        rows[name] = {"chi2": chi2, "df": len(idx), "p": float(stats.chi2.sf(chi2, len(idx)))}
    return pd.DataFrame.from_dict(rows, orient="index", columns=["chi2", "df", "p"])


def breslow_baseline(d: Design, beta) -> StepCurve:
    """Breslow cumulative baseline hazard at the covariate means."""
    X = d.X - d.X.mean(axis=0) if d.p else d.X
    w = np.exp(X @ beta) if d.p else np.ones(len(d.exit))
    times = _event_times(d)
    if times.size == 0:
        return StepCurve(np.empty(0), np.empty(0))
    t = times[:, None]
    at_risk = ((d.entry < t) & (t <= d.exit)) @ w
    nd = ((d.exit == t) & d.event).sum(axis=1)
    return StepCurve(times, np.cumsum(nd / at_risk))


def hazard_ratio_20_80(fit: CoxFit, table: EventTable | None = None) -> pd.Series:
    """Hazard ratio between the 20% and 80% points of each term.

    Single covariates: ``exp(beta (q80 - q20))`` over table rows.  Groups:
    ``exp`` of the 20-80 quantile range of the row-level linear predictor
    of the group.  Factors: ``exp`` of the 20-80 quantile range of the
    level effects, the reference level counting as 0.
    """
    d = fit.design
    beta = fit.coefficients.to_numpy()
    X = d.X
    if table is not None:
        X = _rebuild(table, d)
    out = {}
    for name, idx in d.terms.items():
        if name == d.factor:
            effects = np.concatenate([[0.0], beta[idx]])
            q20, q80 = np.quantile(effects, [0.2, 0.8])
            out[name] = float(np.exp(q80 - q20))
            continue
        lp = X[:, idx] @ beta[idx]
        q20, q80 = np.quantile(X[:, idx] if len(idx) == 1 else lp, [0.2, 0.8])
        if len(idx) == 1:
            q20, q80 = float(q20), float(q80)
            if q20 == q80:
                warnings.warn(f"covariate {name!r} has equal 20% and 80% points; hr set to 1",
                              ConstantCovariateWarning, stacklevel=2)
                out[name] = 1.0
                continue
            out[name] = float(np.exp(beta[idx[0]] * (q80 - q20)))
        else:
            out[name] = float(np.exp(q80 - q20))
    return pd.Series(out, dtype=float)


def _rebuild(table: EventTable, d: Design) -> np.ndarray:
    df = table.df
    cols = []
    for c in d.columns:
        if d.factor is not None and c.startswith(f"{d.factor}["):
            lv = c[len(d.factor) + 1 : -1]
            cols.append((df[d.factor].astype(str) == lv).to_numpy(float))
        else:
            cols.append(df[c].to_numpy(float))
    return np.column_stack(cols) if cols else np.empty((len(df), 0))


def cox_fit(
    table: EventTable,
    event: str = "leaf",
    covariates=(),
    factor: str | None = None,
    groups: dict | None = None,
    ties: str = "breslow",
    init=None,
    max_iter: int = MAX_ITER,
) -> CoxFit:
    """Fit a Cox model for ``leaf`` or ``branch`` events.

    Newton-Raphson with step-halving; standard errors from the inverse
    observed information; Wald chi-squares per term (jointly for groups and
    factors).

    Raises
    ------
    RankDeficiencyError
        Aliased or constant columns (named in the message).
    MonotoneLikelihoodError
        A coefficient diverges because events separate perfectly on it.
    ConvergenceError
        No convergence within ``max_iter`` iterations.
    """
    d = design_matrix(table, event, covariates, factor, groups, ties)
    n_events = int(d.event.sum())
    if n_events == 0:
        raise ValueError(f"no {event} events in table")
    null_ll = partial_loglik(d, np.zeros(d.p))[0]
    beta, ll, g, H, n_iter, trace = newton(d, init, max_iter)
    info = -H
    if d.p:
        try:
            cov = linalg.inv(info, check_finite=True)
        except linalg.LinAlgError:
            raise MonotoneLikelihoodError("singular information at the optimum") from None
        cov = (cov + cov.T) / 2
    else:
        cov = np.empty((0, 0))
    names = list(d.columns)
    fit = CoxFit(
        coefficients=pd.Series(beta, index=names, dtype=float),
        covariance=pd.DataFrame(cov, index=names, columns=names),
        log_partial_likelihood=ll,
        null_log_partial_likelihood=null_ll,
        terms=wald_terms(d, beta, cov),
        baseline=breslow_baseline(d, beta),
        hr_20_80=pd.Series(dtype=float),
        n_events=n_events,
        n_iter=n_iter,
        design=d,
        trace=trace,
    )
    fit.hr_20_80 = hazard_ratio_20_80(fit)
    return fit


def gradient_check(
    table: EventTable,
    event: str = "leaf",
    beta=None,
    covariates=(),
    factor: str | None = None,
    groups: dict | None = None,
    ties: str = "breslow",
    step: float = 1e-5,
) -> float:
    """Max relative discrepancy of analytic gradient/Hessian vs central differences.

    Discrepancies are scaled by ``max(1, |finite difference|)``.
    """
    d = design_matrix(table, event, covariates, factor, groups, ties)
    p = d.p
    if p == 0:
        return 0.0
    beta = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    _, g, H = partial_loglik(d, beta)
    fd_g = np.empty(p)
    fd_H = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = step
        lp, gp, _ = partial_loglik(d, beta + e)
        lm, gm, _ = partial_loglik(d, beta - e)
        fd_g[j] = (lp - lm) / (2 * step)
        fd_H[:, j] = (gp - gm) / (2 * step)
    rel_g = np.abs(g - fd_g) / np.maximum(1.0, np.abs(fd_g))
    rel_H = np.abs(H - fd_H) / np.maximum(1.0, np.abs(fd_H))
    return float(max(rel_g.max(), rel_H.max()))

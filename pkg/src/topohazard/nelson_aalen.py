"""Nelson-Aalen estimates of the cumulative birth hazard."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filtration import BirthProcess, _oriented, birth_levels_and_risk, birth_process
from .lattice import LatticeField, neighbor_min

DEFAULT_GRID_POINTS = 200


@dataclass(frozen=True)
class StepCurve:
    """A right-continuous step function (``kind="step"``) or grid samples.

    For step curves ``values[i]`` holds on ``[levels[i], levels[i+1])`` and
    ``start`` holds before ``levels[0]``.
    """

    levels: np.ndarray
    values: np.ndarray
    kind: str = "step"
    start: float = 0.0
    note: str = ""
    se: np.ndarray | None = None

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if levels.shape != values.shape or levels.ndim != 1:
            raise ValueError("levels and values must be 1-d arrays of equal length")
        if levels.size > 1 and np.any(np.diff(levels) <= 0):
            raise ValueError("levels must be strictly increasing")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "grid":
            return np.interp(t, self.levels, self.values)
        idx = np.searchsorted(self.levels, t, side="right") - 1
        padded = np.concatenate([[self.start], self.values])
        out = padded[idx + 1]
        return out if out.ndim else float(out)

    def __len__(self):
        return self.levels.size


def _check_risk(bp: BirthProcess):
    y = bp.at_risk_at_births
    if np.any(y <= 0):
        # cannot happen for the left convention: the birthing cell is at risk
        raise RuntimeError(f"zero at-risk count at a birth level ({bp.convention} convention)")
    return y.astype(float)


def nelson_aalen(bp: BirthProcess) -> StepCurve:
    """Cumulative hazard ``sum_{u <= t} 1 / Y(u)`` over birth levels ``u``."""
    y = _check_risk(bp)
    return StepCurve(bp.levels, np.cumsum(1.0 / y))


def naive_variance(bp: BirthProcess) -> StepCurve:
    """Counting-process variance ``sum_{u <= t} 1 / Y(u)^2``.

    Treats births as a martingale with independent increments, which lattice
    fields do not satisfy; intervals built from it under-cover.
    """
    y = _check_risk(bp)
    return StepCurve(
        bp.levels,
        np.cumsum((1.0 / y) ** 2),
        note="anti-conservative: assumes independent counting-process increments",
    )


def discretize(curve: StepCurve, grid) -> StepCurve:
    grid = np.asarray(grid, dtype=float)
    if grid.size > 1 and np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted")
    return StepCurve(grid, np.atleast_1d(curve(grid)), kind="grid", note=curve.note)


def exp_scale(curve: StepCurve) -> StepCurve:
    """Relabel levels ``t`` as ``exp(t)`` for display on a positive axis."""
    return StepCurve(np.exp(curve.levels), curve.values, curve.kind, curve.start, curve.note, curve.se)


# --- batches ----------------------------------------------------------------


def na_on_grid(
    values: np.ndarray,
    table: np.ndarray,
    grid,
    convention: str = "left",
    with_variance: bool = False,
):
    """Nelson-Aalen curves of many fields sampled on a common grid.

    ``values`` is ``(B, n)`` flat fields (already oriented) sharing the
    neighbour ``table``.  Returns ``(B, M)`` estimates, plus naive variances
    when ``with_variance``.
    """
    values = np.atleast_2d(values)
    grid = np.asarray(grid, dtype=float)
    mn = neighbor_min(values, table)
    est = np.empty((values.shape[0], grid.size))
    var = np.empty_like(est) if with_variance else None
    for b in range(values.shape[0]):
        births, y, _ = birth_levels_and_risk(values[b], mn[b], convention)
        k = np.searchsorted(births, grid, side="right")
        inv = 1.0 / y
        est[b] = np.concatenate([[0.0], np.cumsum(inv)])[k]
        if with_variance:
            var[b] = np.concatenate([[0.0], np.cumsum(inv**2)])[k]
    return (est, var) if with_variance else est


def exit_levels(values: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Per-cell level ``min(z, neighbour minimum)`` at which a cell leaves the risk set."""
    return np.minimum(values, neighbor_min(values, table))


def at_risk_percentile_grid(
    fields,
    probs=(0.9, 0.7, 0.5, 0.3, 0.1),
    M: int = DEFAULT_GRID_POINTS,
    span=(0.95, 0.05),
    direction: str = "sublevel",
):
    """Levels where the pooled at-risk fraction equals each ``p``, and a grid.

    ``fields`` is a sequence of :class:`LatticeField`.  The at-risk fraction
    at ``t`` is the pooled share of cells with exit level ``>= t``, so the
    level for ``p`` is the ``1 - p`` quantile of pooled exit levels.  The
    second return value is ``M`` equally spaced levels between the
    ``span`` fractions (default: the central 90%).
    """
    fields = list(fields)
    if not fields:
        raise ValueError("at least one field is required")
    pooled = np.concatenate(
        [exit_levels(_oriented(f, direction), f.neighbor_table) for f in fields]
    )
    return percentile_levels(pooled, probs, M, span)


def percentile_levels(pooled_exit, probs, M=DEFAULT_GRID_POINTS, span=(0.95, 0.05)):
    probs = np.asarray(probs, dtype=float)
    if np.any((probs <= 0) | (probs >= 1)):
        raise ValueError("probabilities must lie in (0, 1)")
    levels = np.quantile(pooled_exit, 1.0 - probs)
    lo, hi = np.quantile(pooled_exit, [1.0 - span[0], 1.0 - span[1]])
    return levels, np.linspace(lo, hi, M)


def field_na_curves(field: LatticeField, direction="sublevel", convention="left"):
    """Convenience: ``(A_hat, var_naive)`` step curves for one field."""
    bp = birth_process(field, direction, convention)
    return nelson_aalen(bp), naive_variance(bp)

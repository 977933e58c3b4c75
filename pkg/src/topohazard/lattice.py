"""Rectangular lattice fields with configurable neighbourhoods.

A :class:`LatticeField` owns a grid of real values together with the
boundary rule (``open`` or ``torus``) and the neighbourhood rule (``edge4``
or ``vertex8``) used to decide which cells touch.  All the filtration code
works off the flat neighbour index table built here.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

BOUNDARIES = ("open", "torus")
NEIGHBORHOODS = ("edge4", "vertex8")

_OFFSETS = {
    "edge4": ((-1, 0), (0, -1), (0, 1), (1, 0)),
    "vertex8": ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


class ParseError(ValueError):
    """Malformed field file; the message names the offending line/field."""


class TieWarning(UserWarning):
    pass


def break_ties(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Make all entries distinct by nudging repeated values upward.

    The k-th repeat of a value (k = 0, 1, ..., row-major order) gets
    ``k * eps`` added, with ``eps = 1e-9 * (max - min)``.  Returns the new
    array and the number of cells that were moved.
    """
    flat = np.array(values, dtype=float).ravel()
    span = float(flat.max() - flat.min()) if flat.size else 0.0
    eps = 1e-9 * span if span > 0 else 1e-9
    moved = np.zeros(flat.size, dtype=bool)
    while True:
        order = np.argsort(flat, kind="stable")
        s = flat[order]
        dup = np.flatnonzero(s[1:] == s[:-1]) + 1
        if dup.size == 0:
            break
        # rank within each run of equal values, in row-major order (stable sort)
        starts = np.r_[0, np.flatnonzero(s[1:] != s[:-1]) + 1]
        run_id = np.searchsorted(starts, np.arange(s.size), side="right") - 1
        rank = np.arange(s.size) - starts[run_id]
        bump = order[rank > 0]
        flat[bump] += rank[rank > 0] * eps
        moved[bump] = True
    return flat.reshape(np.shape(values)), int(moved.sum())


@dataclass(frozen=True)
class LatticeField:
    """Real values on an ``nrows x ncols`` grid.

    Values are copied, checked for finiteness and made pairwise distinct on
    construction (see :func:`break_ties`); the stored array is read-only.
    """

    values: np.ndarray
    boundary: str = "open"
    neighborhood: str = "edge4"
    perturb_ties: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")
        if self.neighborhood not in NEIGHBORHOODS:
            raise ValueError(
                f"neighborhood must be one of {NEIGHBORHOODS}, got {self.neighborhood!r}"
            )
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[None, :]
        if vals.ndim != 2 or vals.size == 0:
            raise ValueError("values must be a non-empty 2-d array")
        if not np.all(np.isfinite(vals)):
            raise ValueError("values contain non-finite entries")
        if self.perturb_ties:
            vals, moved = break_ties(vals)
            if moved:
                warnings.warn(
                    f"{moved} tied value(s) perturbed to make field values distinct",
                    TieWarning,
                    stacklevel=3,
                )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def size(self) -> int:
        return self.values.size

    def neighbors(self, index: tuple[int, int]) -> list[tuple[int, int]]:
        return neighbors(self, index)

    def sublevel_mask(self, t: float) -> np.ndarray:
        return sublevel_mask(self, t)

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """Flat neighbour indices, shape ``(size, k)``, padded with ``size``."""
        return neighbor_table(self.nrows, self.ncols, self.boundary, self.neighborhood)

    def with_values(self, values: np.ndarray) -> "LatticeField":
        return LatticeField(values, boundary=self.boundary, neighborhood=self.neighborhood)


def _cell_neighbors(r, c, nrows, ncols, boundary, neighborhood):
    out = []
    for dr, dc in _OFFSETS[neighborhood]:
        rr, cc = r + dr, c + dc
        if boundary == "torus":
            rr %= nrows
            cc %= ncols
        elif not (0 <= rr < nrows and 0 <= cc < ncols):
            continue
        if (rr, cc) != (r, c) and (rr, cc) not in out:
            out.append((rr, cc))
    return out


def neighbors(field: LatticeField, index: tuple[int, int]) -> list[tuple[int, int]]:
    """Grid neighbours of ``index`` under the field's boundary/neighbourhood rules.

    On a torus narrower than 3 cells a wrapped neighbour can coincide with
    another neighbour or with the cell itself; duplicates and self-loops are
    dropped so neighbour lists stay symmetric.
    """
    r, c = index
    if not (0 <= r < field.nrows and 0 <= c < field.ncols):
        raise IndexError(f"index {index} out of bounds for {field.nrows}x{field.ncols} lattice")
    return _cell_neighbors(r, c, field.nrows, field.ncols, field.boundary, field.neighborhood)


def neighbor_table(nrows: int, ncols: int, boundary: str = "open", neighborhood: str = "edge4"):
    n = nrows * ncols
    k = len(_OFFSETS[neighborhood])
    table = np.full((n, k), n, dtype=np.intp)
    for r in range(nrows):
        for c in range(ncols):
            nb = _cell_neighbors(r, c, nrows, ncols, boundary, neighborhood)
            table[r * ncols + c, : len(nb)] = [rr * ncols + cc for rr, cc in nb]
    table.setflags(write=False)
    return table


def neighbor_offsets(nrows: int, ncols: int, boundary: str = "open", neighborhood: str = "edge4"):
    """Per-cell tuple of neighbour displacement vectors (unwrapped).

    Two cells with the same tuple see the same local correlation structure
    in a stationary field, which is what the limiting-curve code groups on.
    """
    out = []
    for r in range(nrows):
        for c in range(ncols):
            offs, seen = [], set()
            for dr, dc in _OFFSETS[neighborhood]:
                rr, cc = r + dr, c + dc
                if boundary == "open" and not (0 <= rr < nrows and 0 <= cc < ncols):
                    continue
                target = (rr % nrows, cc % ncols)
                if target == (r, c) or target in seen:
                    continue
                seen.add(target)
                offs.append((dr, dc))
            out.append(tuple(offs))
    return out


def neighbor_min(values: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Minimum over neighbours for every cell.

    ``values`` has shape ``(..., n)`` (flat cells, optionally batched);
    cells without neighbours get ``+inf``.
    """
    padded = np.concatenate([values, np.full(values.shape[:-1] + (1,), np.inf)], axis=-1)
    return padded[..., table].min(axis=-1)


def sublevel_mask(field: LatticeField, t: float) -> np.ndarray:
    """Boolean grid of cells with value ``<= t``."""
    return field.values <= t


# --- ingestion --------------------------------------------------------------


def read_csv_grid(path, **kwargs) -> LatticeField:
    """Read a grid stored as rows of comma-separated reals."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = []
            for col, tok in enumerate(line.split(","), start=1):
                try:
                    row.append(float(tok))
                except ValueError:
                    raise ParseError(f"{path}: line {lineno}, field {col}: cannot parse {tok!r}")
            if rows and len(row) != len(rows[0]):
                raise ParseError(
                    f"{path}: line {lineno}: expected {len(rows[0])} fields, got {len(row)}"
                )
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: empty grid")
    values = np.array(rows)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise ParseError(f"{path}: line {bad[0] + 1}, field {bad[1] + 1}: non-finite value")
    return LatticeField(values, **kwargs)


def write_csv_grid(values: np.ndarray, path) -> None:
    values = np.atleast_2d(values)
    with open(path, "w") as fh:
        for row in values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_raw_grid(path, sidecar=None, **kwargs) -> LatticeField:
    """Read little-endian float64 cells with a JSON sidecar ``{nrows, ncols}``.

    The sidecar defaults to ``<path>.json``.
    """
    path = Path(path)
    sidecar = Path(sidecar) if sidecar is not None else path.with_name(path.name + ".json")
    try:
        meta = json.loads(sidecar.read_text())
        nrows, ncols = int(meta["nrows"]), int(meta["ncols"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{sidecar}: bad sidecar ({exc})")
    data = np.fromfile(path, dtype="<f8")
    if data.size != nrows * ncols:
        raise ParseError(f"{path}: expected {nrows * ncols} float64 values, found {data.size}")
    return LatticeField(data.reshape(nrows, ncols), **kwargs)


def read_grid(path, **kwargs) -> LatticeField:
    """Dispatch on extension: ``.csv`` text grid, anything else raw float64."""
    if str(path).lower().endswith(".csv"):
        return read_csv_grid(path, **kwargs)
    return read_raw_grid(path, **kwargs)

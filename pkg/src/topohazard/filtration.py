"""Component births along the sublevel filtration of a lattice field.

A cell gives birth to a component at level ``z_x`` exactly when it is a
strict local minimum.  It stays *at risk* of doing so while its own value
and all its neighbours' values are still above the current level, i.e.
until level ``m_x = min(z_x, min_{x'} z_{x'})``.  That single number per
cell is enough for the Nelson-Aalen path, so births and risk sets come
out of one sort; the union-find barcode is a separate, optional pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import LatticeField, neighbor_min

DIRECTIONS = ("sublevel", "superlevel")
CONVENTIONS = ("left", "strict")


def _oriented(field: LatticeField, direction: str) -> np.ndarray:
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    z = field.values.ravel()
    return z if direction == "sublevel" else -z


def birth_levels_and_risk(z: np.ndarray, mn: np.ndarray, convention: str = "left"):
    """Birth levels and at-risk counts for one flat field.

    ``z`` are cell values and ``mn`` the neighbour minima.  Returns sorted
    birth levels, the at-risk count at each birth, and the sorted exit
    levels ``m`` (``Y(t-) = #{m >= t}``).

    ``left`` uses ``Y(u-)``: cells with ``z >= u`` and all neighbours
    ``>= u``.  ``strict`` uses the literal ``z >= u`` and neighbours ``> u``,
    which additionally drops the birthing cell's at-risk neighbours.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    is_min = z < mn
    births = np.sort(z[is_min])
    m = np.sort(np.minimum(z, mn))
    y = m.size - np.searchsorted(m, births, side="left")
    if convention == "strict":
        # cells whose neighbour minimum is exactly the birth level
        touched = np.sort(mn[~is_min])
        y = y - (np.searchsorted(touched, births, side="right")
                 - np.searchsorted(touched, births, side="left"))
    return births, y, m


@dataclass(frozen=True)
class BirthProcess:
    """Birth events ``N`` and at-risk counts ``Y`` of one field.

    ``levels`` are on the filtration scale: raw values for ``sublevel``,
    negated values for ``superlevel``.
    """

    levels: np.ndarray
    locations: np.ndarray
    at_risk_at_births: np.ndarray
    exit_levels: np.ndarray
    direction: str
    convention: str
    shape: tuple
    _z: np.ndarray
    _mn: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.exit_levels.size

    @property
    def field_levels(self) -> np.ndarray:
        """Birth levels in the field's own units."""
        return self.levels if self.direction == "sublevel" else -self.levels

    def at_risk(self, t, convention: str | None = None):
        """``Y(t-)`` (left) or ``Y(t)`` (strict) at arbitrary levels."""
        convention = convention or self.convention
        t = np.asarray(t, dtype=float)
        if convention == "left":
            return self.exit_levels.size - np.searchsorted(self.exit_levels, t, side="left")
        if convention == "strict":
            tt = t.reshape(-1, 1)
            out = ((self._z >= tt) & (self._mn > tt)).sum(axis=1)
            return out.reshape(t.shape)
        raise ValueError(f"unknown convention {convention!r}")


def birth_process(
    field: LatticeField, direction: str = "sublevel", convention: str = "left"
) -> BirthProcess:
    z = _oriented(field, direction)
    mn = neighbor_min(z, field.neighbor_table)
    births, y, m = birth_levels_and_risk(z, mn, convention)
    idx = np.flatnonzero(z < mn)
    idx = idx[np.argsort(z[idx])]
    locs = np.column_stack(np.unravel_index(idx, field.values.shape))
    return BirthProcess(
        levels=births,
        locations=locs,
        at_risk_at_births=y,
        exit_levels=m,
        direction=direction,
        convention=convention,
        shape=field.values.shape,
        _z=z,
        _mn=mn,
    )


def local_minima(field: LatticeField) -> list[tuple[tuple[int, int], float]]:
    """Strict local minima as ``((row, col), level)``, ascending by level."""
    bp = birth_process(field)
    return [((int(r), int(c)), float(v)) for (r, c), v in zip(bp.locations, bp.levels)]


def local_maxima(field: LatticeField) -> list[tuple[tuple[int, int], float]]:
    bp = birth_process(field, direction="superlevel")
    return [((int(r), int(c)), float(v)) for (r, c), v in zip(bp.locations, bp.field_levels)]


# --- barcode ----------------------------------------------------------------


class UnionFind:
    """Disjoint sets over ``0..n-1`` with path compression and union by rank."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> int:
        a, b = self.find(a), self.find(b)
        if a == b:
            return a
        if self.rank[a] < self.rank[b]:
            a, b = b, a
        self.parent[b] = a
        if self.rank[a] == self.rank[b]:
            self.rank[a] += 1
        return a


@dataclass(frozen=True)
class Barcode:
    """Component lifetimes; ``death == inf`` marks components that never merge."""

    births: np.ndarray
    deaths: np.ndarray
    locations: np.ndarray
    direction: str = "sublevel"

    def __len__(self):
        return self.births.size

    def alive(self, t: float) -> int:
        """Number of components of the level set at ``t``."""
        return int(np.count_nonzero((self.births <= t) & (t < self.deaths)))


def barcode(field: LatticeField, direction: str = "sublevel") -> Barcode:
    """Elder-rule barcode of 0-dimensional features.

    Cells enter in increasing filtration level.  When a cell joins several
    components, the one born first survives and the others die at the
    cell's level.
    """
    z = _oriented(field, direction)
    table = field.neighbor_table
    n = z.size
    order = np.argsort(z, kind="stable")
    uf = UnionFind(n)
    active = np.zeros(n, dtype=bool)
    birth = np.empty(n)
    birth_cell = np.empty(n, dtype=np.intp)
    out_b, out_d, out_c = [], [], []
    for i in order.tolist():
        active[i] = True
        level = z[i]
        roots = {uf.find(j) for j in table[i].tolist() if j < n and active[j]}
        if not roots:
            birth[i], birth_cell[i] = level, i
            continue
        elder = min(roots, key=lambda r: birth[r])
        b_keep, c_keep = birth[elder], birth_cell[elder]
        for r in roots:
            if r != elder:
                out_b.append(birth[r])
                out_d.append(level)
                out_c.append(birth_cell[r])
        root = elder
        for r in roots:
            root = uf.union(root, r)
        root = uf.union(root, i)
        birth[root], birth_cell[root] = b_keep, c_keep
    for r in sorted({uf.find(i) for i in range(n)}, key=lambda r: birth[r]):
        out_b.append(birth[r])
        out_d.append(np.inf)
        out_c.append(birth_cell[r])
    births = np.array(out_b)
    deaths = np.array(out_d)
    cells = np.array(out_c, dtype=np.intp)
    srt = np.argsort(births, kind="stable")
    locs = np.column_stack(np.unravel_index(cells[srt], field.values.shape))
    return Barcode(births[srt], deaths[srt], locs, direction)

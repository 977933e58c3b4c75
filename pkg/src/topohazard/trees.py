"""Embedded metric trees filtered by radial distance from the root.

Each edge is a subject in an event-history sense: it enters the risk set
at the radius of its parent node and leaves at the radius of its child,
where it either ends in a leaf, splits (branch) or runs out of the
observation window (censored).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .lattice import ParseError
from .nelson_aalen import StepCurve

KINDS = ("root", "branch", "leaf", "censored", "pass-through")
STATUSES = ("leaf", "branch", "censored")
DEFAULT_PROXIMITY = 200.0
COVARIATES = ("width", "euclid", "path_ratio", "nodes_within", "order", "azimuth", "n_children")


class TreeError(ValueError):
    pass


class InwardEdgeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Edge:
    parent: str
    child: str
    polyline: np.ndarray
    width: float = 1.0

    @property
    def id(self) -> str:
        return f"{self.parent}-{self.child}"

    @property
    def arclength(self) -> float:
        return float(np.linalg.norm(np.diff(self.polyline, axis=0), axis=1).sum())


@dataclass
class MetricTree:
    """Rooted tree with node coordinates, node kinds and polyline edges.

    ``nodes`` maps id to ``(coords, kind)``.  Kinds may be ``None`` and are
    then inferred from the number of children (0 leaf, 1 pass-through,
    otherwise branch).
    """

    nodes: dict
    edges: list
    tree_id: str = "tree"
    _children: dict = field(init=False, repr=False)
    _parent: dict = field(init=False, repr=False)

    def __post_init__(self):
        nodes = {}
        for k, (xyz, kind) in self.nodes.items():
            xyz = np.asarray(xyz, dtype=float)
            if xyz.ndim != 1 or xyz.size not in (2, 3):
                raise TreeError(f"node {k!r}: coordinates must be a 2- or 3-vector")
            nodes[str(k)] = (xyz, kind)
        dims = {v[0].size for v in nodes.values()}
        if len(dims) > 1:
            raise TreeError("mixed 2-d and 3-d node coordinates")
        self.nodes = nodes
        self._children = {k: [] for k in nodes}
        self._parent = {}
        edges = []
        for e in self.edges:
            p, c = str(e.parent), str(e.child)
            for n in (p, c):
                if n not in nodes:
                    raise TreeError(f"edge {p}-{c} references unknown node {n!r}")
            if c in self._parent:
                raise TreeError(f"node {c!r} has more than one parent")
            poly = (np.vstack([nodes[p][0], nodes[c][0]]) if e.polyline is None
                    else np.asarray(e.polyline, dtype=float))
            if poly.ndim != 2 or poly.shape[0] < 2 or poly.shape[1] != nodes[p][0].size:
                raise TreeError(f"edge {p}-{c}: malformed polyline")
            if not (np.allclose(poly[0], nodes[p][0]) and np.allclose(poly[-1], nodes[c][0])):
                raise TreeError(f"edge {p}-{c}: polyline must run from parent to child")
            if not e.width > 0:
                raise TreeError(f"edge {p}-{c}: width must be positive")
            self._parent[c] = p
            self._children[p].append(c)
            edges.append(Edge(p, c, poly, float(e.width)))
        self.edges = edges
        roots = [k for k in nodes if k not in self._parent]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one root, found {len(roots)}")
        self.root = roots[0]
        if nodes[self.root][1] not in (None, "root"):
            raise TreeError(f"root node {self.root!r} has kind {nodes[self.root][1]!r}")
        seen, stack = set(), [self.root]
        while stack:
            k = stack.pop()
            if k in seen:
                raise TreeError("cycle detected")
            seen.add(k)
            stack.extend(self._children[k])
        if len(seen) != len(nodes):
            raise TreeError("tree is not connected (cycle or detached nodes)")
        for k, (_, kind) in nodes.items():
            nch = len(self._children[k])
            if kind is None:
                kind = "root" if k == self.root else ("leaf" if nch == 0 else
                                                      "pass-through" if nch == 1 else "branch")
                nodes[k] = (nodes[k][0], kind)
            if kind not in KINDS:
                raise TreeError(f"node {k!r}: unknown kind {kind!r}")
            if kind == "root" and k != self.root:
                raise TreeError(f"node {k!r} is marked root but has a parent")
            if kind in ("leaf", "censored") and nch:
                raise TreeError(f"{kind} node {k!r} has children")
            if kind == "branch" and nch == 0:
                raise TreeError(f"branch node {k!r} has no children")
            if kind == "pass-through" and nch != 1:
                raise TreeError(f"pass-through node {k!r} must have exactly one child")

    # -- structure ----------------------------------------------------------

    def coords(self, node) -> np.ndarray:
        return self.nodes[node][0]

    def kind(self, node) -> str:
        return self.nodes[node][1]

    def children(self, node) -> list:
        return list(self._children[node])

    def parent(self, node):
        return self._parent.get(node)

    def radius(self, node) -> float:
        return float(np.linalg.norm(self.coords(node) - self.coords(self.root)))

    def depth(self, node) -> int:
        d = 0
        while node != self.root:
            node = self._parent[node]
            d += 1
        return d

    def edge(self, child) -> Edge:
        for e in self.edges:
            if e.child == child:
                return e
        raise KeyError(child)

    def contract(self) -> "MetricTree":
        """Merge every pass-through node into a single edge from its parent to its child.

        Polylines are concatenated; the merged width is the arclength-weighted
        mean of the pieces.
        """
        by_child = {e.child: e for e in self.edges}
        keep = {k for k, (_, kind) in self.nodes.items() if kind != "pass-through"}
        new_edges = []
        for k in keep:
            if k == self.root:
                continue
            pieces = [by_child[k]]
            while pieces[-1].parent not in keep:
                pieces.append(by_child[pieces[-1].parent])
            pieces.reverse()
            poly = np.vstack([pieces[0].polyline] + [p.polyline[1:] for p in pieces[1:]])
            lengths = np.array([p.arclength for p in pieces])
            widths = np.array([p.width for p in pieces])
            w = float(widths @ lengths / lengths.sum()) if lengths.sum() > 0 else float(widths.mean())
            new_edges.append(Edge(pieces[0].parent, k, poly, w))
        order = {k: i for i, k in enumerate(self.nodes)}
        new_edges.sort(key=lambda e: order[e.child])
        return MetricTree({k: self.nodes[k] for k in self.nodes if k in keep}, new_edges,
                          self.tree_id)

    # -- io -----------------------------------------------------------------

    def to_dict(self) -> dict:
        def xyz(v):
            keys = ("x", "y", "z")
            return {keys[i]: float(v[i]) for i in range(v.size)}

        return {
            "tree_id": self.tree_id,
            "nodes": [{"id": k, **xyz(v), "kind": kind} for k, (v, kind) in self.nodes.items()],
            "edges": [{"parent": e.parent, "child": e.child, "width": e.width,
                       "polyline": e.polyline.tolist()} for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricTree":
        try:
            nodes = {}
            for i, n in enumerate(data["nodes"]):
                xyz = [n["x"], n["y"]] + ([n["z"]] if n.get("z") is not None else [])
                nodes[str(n["id"])] = (xyz, n.get("kind"))
            edges = [Edge(str(e["parent"]), str(e["child"]), e.get("polyline"),
                          float(e.get("width", 1.0))) for e in data["edges"]]
            return cls(nodes, edges, str(data.get("tree_id", "tree")))
        except KeyError as exc:
            raise ParseError(f"tree JSON missing field {exc.args[0]!r}") from None


def read_trees(path) -> list[MetricTree]:
    """Load one tree object or a list of them from a JSON file."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if isinstance(data, dict) and "trees" in data:
        data = data["trees"]
    items = data if isinstance(data, list) else [data]
    return [MetricTree.from_dict(d) for d in items]


def write_trees(trees, path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in trees], indent=1))


# --- radial filtration ------------------------------------------------------


def _segment_hits_sphere(a: np.ndarray, b: np.ndarray, r: float) -> np.ndarray:
    """Whether each segment ``a[i] -> b[i]`` meets the sphere ``|p| = r``."""
    d = b - a
    dd = np.einsum("ij,ij->i", d, d)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(dd > 0, -np.einsum("ij,ij->i", a, d) / dd, 0.0)
    s = np.clip(s, 0.0, 1.0)
    near = np.linalg.norm(a + s[:, None] * d, axis=1)
    far = np.maximum(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))
    return (near <= r) & (r <= far)


def radial_risk_set(tree: MetricTree, r: float) -> set:
    """Ids of edges whose polyline crosses or touches the sphere of radius ``r`` about the root."""
    if not r > 0:
        raise ValueError("radius must be positive")
    t = tree.contract()
    origin = t.coords(t.root)
    out = set()
    for e in t.edges:
        p = e.polyline - origin
        if _segment_hits_sphere(p[:-1], p[1:], r).any():
            out.add(e.id)
    return out


# --- event tables -----------------------------------------------------------


@dataclass
class EventTable:
    """One row per edge: ``tree_id, edge, entry, exit, status`` plus covariates."""

    df: pd.DataFrame
    excluded: pd.DataFrame | None = None

    def __post_init__(self):
        need = {"tree_id", "edge", "entry", "exit", "status"}
        missing = need - set(self.df.columns)
        if missing:
            raise ValueError(f"event table missing columns {sorted(missing)}")
        if len(self.df) and not (self.df["entry"] < self.df["exit"]).all():
            raise ValueError("every row needs entry < exit")
        bad = set(self.df["status"]) - set(STATUSES)
        if bad:
            raise ValueError(f"unknown status values {sorted(bad)}")

    def __len__(self):
        return len(self.df)

    @property
    def covariate_names(self) -> list:
        fixed = {"tree_id", "edge", "parent", "child", "entry", "exit", "status"}
        return [c for c in self.df.columns if c not in fixed]

    def n_events(self, event: str) -> int:
        return int((self.df["status"] == event).sum())

    def at_risk(self, r) -> np.ndarray:
        """Interval risk-set size ``#{entry < r <= exit}``."""
        r = np.asarray(r, dtype=float)
        entry = np.sort(self.df["entry"].to_numpy())
        exit_ = np.sort(self.df["exit"].to_numpy())
        return np.searchsorted(entry, r, side="left") - np.searchsorted(exit_, r, side="left")

    def with_status(self, edge, status, tree_id=None) -> "EventTable":
        """Copy with the status of one edge replaced."""
        df = self.df.copy()
        sel = df["edge"] == edge
        if tree_id is not None:
            sel &= df["tree_id"] == tree_id
        if not sel.any():
            raise KeyError(edge)
        df.loc[sel, "status"] = status
        return EventTable(df, self.excluded)

    def to_csv(self, path) -> None:
        self.df.to_csv(path, index=False, float_format=None)


def _azimuth(v: np.ndarray) -> float:
    """Absolute angle between ``v`` and the +y axis, in ``[0, pi]``."""
    n = np.linalg.norm(v)
    if n == 0:
        return 0.0
    return float(np.arccos(np.clip(v[1] / n, -1.0, 1.0)))


def _path_ratio(e: Edge, euclid: float) -> float:
    if euclid == 0:
        return np.nan
    if e.polyline.shape[0] == 2:
        return 1.0
    # the arclength can round just below the chord on nearly straight polylines
    return max(e.arclength / euclid, 1.0)


def tree_rows(tree: MetricTree, proximity_radius: float = DEFAULT_PROXIMITY) -> list[dict]:
    t = tree.contract()
    origin = t.coords(t.root)
    ids = list(t.nodes)
    pts = np.vstack([t.coords(k) for k in ids])
    # count includes the node itself; subtract it
    counts = cKDTree(pts).query_ball_point(pts, proximity_radius, return_length=True) - 1
    within = dict(zip(ids, counts.tolist()))
    rows = []
    for e in t.edges:
        a, b = t.coords(e.parent), t.coords(e.child)
        euclid = float(np.linalg.norm(b - a))
        kind = t.kind(e.child)
        rows.append({
            "tree_id": t.tree_id,
            "edge": e.id,
            "parent": e.parent,
            "child": e.child,
            "entry": t.radius(e.parent),
            "exit": t.radius(e.child),
            "status": kind,
            "width": e.width,
            "euclid": euclid,
            "path_ratio": _path_ratio(e, euclid),
            "nodes_within": int(within[e.child]),
            "order": t.depth(e.child),
            "azimuth": _azimuth(b - origin),
            "n_children": len(t.children(e.child)),
        })
    return rows


def build_event_table(trees, proximity_radius: float = DEFAULT_PROXIMITY, workers: int = 1) -> EventTable:
    """Event/covariate table for a collection of trees.

    Edges that do not move outwards (child radius not above parent radius)
    cannot be placed on the radial time axis; they are moved to
    ``EventTable.excluded`` with a warning.
    """
    trees = list(trees)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda t: tree_rows(t, proximity_radius), trees))
    else:
        parts = [tree_rows(t, proximity_radius) for t in trees]
    rows = [r for p in parts for r in p]
    cols = ["tree_id", "edge", "parent", "child", "entry", "exit", "status", *COVARIATES]
    df = pd.DataFrame(rows, columns=cols)
    bad = ~(df["entry"] < df["exit"])
    excluded = None
    if bad.any():
        warnings.warn(
            f"{int(bad.sum())} inward-growing edge(s) excluded: "
            + ", ".join(f"{t}:{e}" for t, e in df.loc[bad, ["tree_id", "edge"]].itertuples(index=False)),
            InwardEdgeWarning,
            stacklevel=2,
        )
        excluded = df[bad].reset_index(drop=True)
        df = df[~bad].reset_index(drop=True)
    return EventTable(df, excluded)


def tree_nelson_aalen(table: EventTable, event: str = "leaf") -> StepCurve:
    """Nelson-Aalen estimate over radius for ``leaf`` or ``branch`` events."""
    if event not in ("leaf", "branch"):
        raise ValueError("event must be 'leaf' or 'branch'")
    if len(table) == 0:
        raise ValueError("empty event table")
    times = np.sort(table.df.loc[table.df["status"] == event, "exit"].to_numpy(float))
    if times.size == 0:
        return StepCurve(np.empty(0), np.empty(0), note="no events")
    levels, d = np.unique(times, return_counts=True)
    y = table.at_risk(levels)
    return StepCurve(levels, np.cumsum(d / y))


# --- simulation ---------------------------------------------------------------


def simulate_tree(
    rng,
    beta: float = 0.7,
    leaf_rate: float = 1.0,
    branch_rate: float = 0.8,
    censor_radius: float = 3.0,
    width_range=(0.0, 1.0),
    tree_id: str = "sim",
    max_edges: int = 10_000,
) -> MetricTree:
    """Random outward-growing tree with a known leaf-hazard effect of width.

    Each edge draws ``width ~ U(width_range)`` and competing constant hazards
    over radius: leaf ``leaf_rate * exp(beta * width)`` and branch
    ``branch_rate``.  A branch spawns two children.  Edges still alive at
    ``censor_radius`` end in a censored node there.  Nodes sit on rays from
    the root, so edges are radially monotone.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    nodes = {"0": ((0.0, 0.0), "root")}
    edges = []
    pending = [("0", 0.0, 0.0)]  # parent id, radius, angle
    first = True
    while pending:
        parent, r0, theta0 = pending.pop(0)
        for _ in range(1 if first else 2):
            if len(edges) >= max_edges:
                raise RuntimeError("simulated tree exceeded max_edges")
            width = rng.uniform(*width_range)
            lam_leaf = leaf_rate * np.exp(beta * width)
            total = lam_leaf + branch_rate
            r1 = r0 + rng.exponential(1.0 / total)
            if r1 >= censor_radius:
                r1, kind = censor_radius, "censored"
            else:
                kind = "leaf" if rng.uniform() < lam_leaf / total else "branch"
            # |dtheta| <= arccos(r0 / r1) keeps the chord radially monotone
            spread = 0.5 if r0 == 0 else min(0.5, float(np.arccos(min(r0 / r1, 1.0))))
            theta = theta0 + spread * rng.uniform(-1.0, 1.0)
            k = str(len(nodes))
            nodes[k] = ((r1 * np.sin(theta), r1 * np.cos(theta)), kind)
            edges.append(Edge(parent, k, None, max(width, 1e-12)))
            if kind == "branch":
                pending.append((k, r1, theta))
        first = False
    return MetricTree(nodes, edges, tree_id)


def simulate_forest(n_edges: int, rng, **kwargs) -> list[MetricTree]:
    """Trees from :func:`simulate_tree` until at least ``n_edges`` edges in total."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    trees, total = [], 0
    while total < n_edges:
        t = simulate_tree(rng, tree_id=f"sim{len(trees)}", **kwargs)
        trees.append(t)
        total += len(t.edges)
    return trees

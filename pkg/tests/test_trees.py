import json
import warnings

import numpy as np
import pytest

from helpers import toy_tree
from topohazard.trees import (
    Edge,
    InwardEdgeWarning,
    MetricTree,
    TreeError,
    build_event_table,
    radial_risk_set,
    read_trees,
    simulate_forest,
    tree_nelson_aalen,
    write_trees,
)


def test_toy_risk_sets():
    t = toy_tree()
    assert radial_risk_set(t, 1.5) == {"A-B", "A-C"}
    assert radial_risk_set(t, 0.5) == {"root-A"}
    assert radial_risk_set(t, 3.0) == set()
    with pytest.raises(ValueError):
        radial_risk_set(t, 0.0)


def test_bulging_polyline_in_risk_set():
    nodes = {"r": ((0.0, 0.0), "root"), "a": ((0.0, 1.0), "branch"), "b": ((0.5, 1.0), "leaf")}
    bulge = [[0.0, 1.0], [0.3, 3.0], [0.5, 1.0]]
    t = MetricTree(nodes, [Edge("r", "a", None), Edge("a", "b", bulge)])
    assert "a-b" in radial_risk_set(t, 2.0)
    straight = MetricTree(nodes, [Edge("r", "a", None), Edge("a", "b", None)])
    assert radial_risk_set(straight, 2.0) == set()


def test_toy_event_table():
    df = build_event_table([toy_tree()]).df.set_index("edge")
    assert df.loc["root-A", "status"] == "branch"
    assert df.loc["root-A", "exit"] == 1.0
    assert df.loc["A-B", "status"] == "leaf"
    assert df.loc["A-B", "exit"] == pytest.approx(np.sqrt(5), abs=1e-15)
    assert df.loc["A-C", "exit"] == pytest.approx(np.sqrt(4.24), abs=1e-15)
    assert (df["path_ratio"] == 1.0).all()
    assert df.loc["A-B", "order"] == 2 and df.loc["root-A", "order"] == 1
    assert df.loc["root-A", "n_children"] == 2
    assert df.loc["A-B", "azimuth"] == pytest.approx(np.arctan2(1, 2))
    assert df.loc["A-B", "nodes_within"] == 3
    assert build_event_table([toy_tree()], proximity_radius=1.5).df.set_index("edge").loc["A-B", "nodes_within"] == 1


def test_toy_nelson_aalen():
    c = tree_nelson_aalen(build_event_table([toy_tree()]), "leaf")
    assert c.levels.tolist() == [np.sqrt(4.24), np.sqrt(5)]
    assert c.values.tolist() == [0.5, 1.5]
    assert len(tree_nelson_aalen(build_event_table([toy_tree()]), "branch")) == 1


def test_no_events_zero_curve():
    t = MetricTree({"r": ((0, 0), "root"), "a": ((0, 1), "censored")}, [Edge("r", "a", None)])
    table = build_event_table([t])
    assert table.df["status"].tolist() == ["censored"]
    c = tree_nelson_aalen(table, "leaf")
    assert len(c) == 0 and c(5.0) == 0.0


def test_censoring_below_events_shrinks_risk_sets():
    late = build_event_table([toy_tree([("D", (0.0, 2.5), "censored")])])
    c = tree_nelson_aalen(late, "leaf")
    assert np.allclose(np.diff(np.concatenate([[0], c.values])), [1 / 3, 1 / 2])
    early = build_event_table([toy_tree([("D", (0.0, 1.5), "censored")])])
    c = tree_nelson_aalen(early, "leaf")
    assert np.allclose(np.diff(np.concatenate([[0], c.values])), [1 / 2, 1 / 1])


def test_pass_through_contracted():
    nodes = {"r": ((0, 0), "root"), "m": ((0, 1), "pass-through"), "a": ((1, 2), "leaf")}
    t = MetricTree(nodes, [Edge("r", "m", None, 1.0), Edge("m", "a", None, 3.0)])
    df = build_event_table([t]).df
    assert df["edge"].tolist() == ["r-a"]
    assert df["path_ratio"].iloc[0] == pytest.approx((1 + np.sqrt(2)) / np.sqrt(5))
    assert df["width"].iloc[0] == pytest.approx((1 + 3 * np.sqrt(2)) / (1 + np.sqrt(2)))
    assert radial_risk_set(t, 1.0) == {"r-a"}


def test_inferred_kinds():
    nodes = {"r": ((0, 0), None), "m": ((0, 1), None), "a": ((1, 2), None), "b": ((-1, 2), None)}
    t = MetricTree(nodes, [Edge("r", "m", None), Edge("m", "a", None), Edge("m", "b", None)])
    assert t.kind("m") == "branch" and t.kind("a") == "leaf" and t.kind("r") == "root"


def test_inward_edge_excluded():
    nodes = {"r": ((0, 0), "root"), "a": ((0, 2), "branch"), "b": ((0, 1), "leaf")}
    t = MetricTree(nodes, [Edge("r", "a", None), Edge("a", "b", None)])
    with pytest.warns(InwardEdgeWarning):
        table = build_event_table([t])
    assert len(table) == 1 and len(table.excluded) == 1


@pytest.mark.parametrize(
    "nodes,edges",
    [
        ({"r": ((0, 0), "root"), "a": ((0, 1), "censored"), "b": ((0, 2), "leaf")},
         [("r", "a"), ("a", "b")]),
        ({"r": ((0, 0), "root"), "a": ((0, 1), "leaf")}, [("r", "a"), ("a", "r")]),
        ({"r": ((0, 0), "root"), "a": ((0, 1), "leaf"), "b": ((1, 1), "leaf")}, [("r", "a")]),
        ({"r": ((0, 0), "root"), "a": ((0, 1), "branch")}, [("r", "a")]),
    ],
)
def test_invalid_trees(nodes, edges):
    with pytest.raises(TreeError):
        MetricTree(nodes, [Edge(p, c, None) for p, c in edges])


def test_polyline_must_join_nodes():
    with pytest.raises(TreeError):
        MetricTree({"r": ((0, 0), "root"), "a": ((0, 1), "leaf")}, [Edge("r", "a", [[0, 0], [0, 2]])])


def test_json_roundtrip(tmp_path):
    p = tmp_path / "t.json"
    write_trees([toy_tree()], p)
    (t,) = read_trees(p)
    assert build_event_table([t]).df.equals(build_event_table([toy_tree()]).df)
    data = json.loads(p.read_text())
    del data[0]["nodes"][0]["x"]
    p.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="'x'"):
        read_trees(p)


def test_three_d_coordinates():
    nodes = {"r": ((0, 0, 0), "root"), "a": ((0, 1, 1), "leaf")}
    df = build_event_table([MetricTree(nodes, [Edge("r", "a", None)])]).df
    assert df["exit"].iloc[0] == pytest.approx(np.sqrt(2))


def test_interval_and_geometric_risk_sets_agree_on_monotone_trees():
    trees = simulate_forest(150, np.random.default_rng(4))
    table = build_event_table(trees)
    for r in np.linspace(0.05, 2.95, 25):
        geometric = sum(len(radial_risk_set(t, r)) for t in trees)
        interval = int(table.at_risk(r))
        # radial_risk_set is closed at both ends, the interval encoding is (entry, exit]
        touching = int(((table.df["entry"] == r) | (table.df["exit"] == r)).sum())
        assert abs(geometric - interval) <= touching


def test_every_terminal_node_in_one_row():
    trees = simulate_forest(200, np.random.default_rng(5))
    df = build_event_table(trees).df
    for t in trees:
        for k, (_, kind) in t.nodes.items():
            if kind == "root":
                continue
            rows = df[(df["tree_id"] == t.tree_id) & (df["child"] == k)]
            assert len(rows) == 1 and rows["status"].iloc[0] == kind
    assert (df["path_ratio"] >= 1.0).all()


def test_parallel_table_identical():
    trees = simulate_forest(100, np.random.default_rng(6))
    assert build_event_table(trees).df.equals(build_event_table(trees, workers=3).df)

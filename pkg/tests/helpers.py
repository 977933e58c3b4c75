import numpy as np

from topohazard.trees import Edge, MetricTree


def toy_tree(extra=None):
    """root(0,0) - A(0,1) - {B(-1,2), C(1,1.8)}, optionally with more children of A."""
    nodes = {
        "root": ((0.0, 0.0), "root"),
        "A": ((0.0, 1.0), "branch"),
        "B": ((-1.0, 2.0), "leaf"),
        "C": ((1.0, 1.8), "leaf"),
    }
    edges = [Edge("root", "A", None), Edge("A", "B", None, 2.0), Edge("A", "C", None, 3.0)]
    for name, xy, kind in extra or []:
        nodes[name] = (xy, kind)
        edges.append(Edge("A", name, None))
    return MetricTree(nodes, edges, "toy")


def random_table(rng, n=60, p=3):
    import pandas as pd

    from topohazard.trees import EventTable

    entry = rng.uniform(0, 1, n)
    exit_ = entry + rng.exponential(1.0, n)
    status = rng.choice(["leaf", "branch", "censored"], n, p=[0.5, 0.3, 0.2])
    df = pd.DataFrame({"tree_id": rng.choice(["a", "b", "c"], n), "edge": [f"e{i}" for i in range(n)],
                       "entry": entry, "exit": exit_, "status": status})
    for j in range(p):
        df[f"x{j}"] = rng.standard_normal(n)
    return EventTable(df)

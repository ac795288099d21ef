"""Convert public benchmark dumps into the text formats read by :mod:`geniepath.data`.

``python -m geniepath.convert planetoid --root DIR --name pubmed --out OUT``
``python -m geniepath.convert graphsage --prefix DIR/ppi --out OUT``

Planetoid dumps are Python pickles; only convert files from a source you trust.
"""

from __future__ import annotations

import argparse
import json
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import Dataset, save_dataset
from .graph import build_graph


def _dense(m) -> np.ndarray:
    return np.asarray(m.todense() if sp.issparse(m) else m, dtype=np.float64)


def _pairs(adjacency) -> list[tuple[int, int]]:
    """Unique undirected pairs from an adjacency mapping, self-loops dropped."""
    pairs = set()
    for u, nbrs in adjacency.items():
        for v in nbrs:
            if u != v:
                pairs.add((min(int(u), int(v)), max(int(u), int(v))))
    return sorted(pairs)


def convert_planetoid(root, name: str, num_val: int = 500, row_normalize: bool = True) -> Dataset:
    """Standard Planetoid split: the labelled ``x`` rows train, the next ``num_val`` validate."""
    root = Path(root)
    parts = {}
    for key in ("x", "y", "tx", "ty", "allx", "ally", "graph"):
        with open(root / f"ind.{name}.{key}", "rb") as fh:
            parts[key] = pickle.load(fh, encoding="latin1")
    test_idx = np.loadtxt(root / f"ind.{name}.test.index", dtype=np.int64).reshape(-1)

    allx, tx = _dense(parts["allx"]), _dense(parts["tx"])
    ally, ty = np.asarray(parts["ally"]), np.asarray(parts["ty"])
    n = max(allx.shape[0] + tx.shape[0], int(test_idx.max()) + 1, max(parts["graph"]) + 1)
    X = np.zeros((n, allx.shape[1]))
    Y = np.zeros((n, ally.shape[1]))
    X[:allx.shape[0]], Y[:ally.shape[0]] = allx, ally
    # test rows are stored in sorted order but belong at their listed indices
    X[np.sort(test_idx)] = tx
    Y[np.sort(test_idx)] = ty
    if row_normalize:
        s = X.sum(axis=1, keepdims=True)
        X = np.divide(X, s, out=np.zeros_like(X), where=s != 0)

    labels = np.where(Y.any(axis=1), Y.argmax(axis=1), -1)
    train = np.zeros(n, bool)
    val = np.zeros(n, bool)
    test = np.zeros(n, bool)
    n_train = np.asarray(parts["y"]).shape[0]
    train[:n_train] = True
    val[n_train:n_train + num_val] = True
    test[test_idx] = True
    for m in (train, val, test):
        m &= labels >= 0
    g = build_graph(_pairs(parts["graph"]), n)
    return Dataset(g, X, labels, train, val, test, "multi-class", Y.shape[1])


def convert_graphsage(prefix) -> Dataset:
    """GraphSAGE layout: ``-G.json`` node-link graph, ``-feats.npy``, ``-id_map.json``, ``-class_map.json``."""
    prefix = str(prefix)
    graph = json.loads(Path(prefix + "-G.json").read_text())
    id_map = {str(k): int(v) for k, v in json.loads(Path(prefix + "-id_map.json").read_text()).items()}
    class_map = json.loads(Path(prefix + "-class_map.json").read_text())
    X = np.load(prefix + "-feats.npy").astype(np.float64)
    n = X.shape[0]

    train = np.zeros(n, bool)
    val = np.zeros(n, bool)
    test = np.zeros(n, bool)
    for node in graph["nodes"]:
        i = id_map[str(node["id"])]
        (test if node.get("test") else val if node.get("val") else train)[i] = True
    c = len(next(iter(class_map.values())))
    labels = np.zeros((n, c), dtype=np.int64)
    for k, bits in class_map.items():
        labels[id_map[str(k)]] = bits

    adjacency: dict[int, list[int]] = {}
    for link in graph["links"]:
        s, t = link["source"], link["target"]
        # node-link ids may be positions into "nodes" rather than node ids
        if isinstance(s, int) and str(s) not in id_map:
            s, t = graph["nodes"][s]["id"], graph["nodes"][t]["id"]
        adjacency.setdefault(id_map[str(s)], []).append(id_map[str(t)])
    g = build_graph(_pairs(adjacency), n)
    return Dataset(g, X, labels, train, val, test, "multi-label", c, inductive=True)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m geniepath.convert", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="kind", required=True)
    pl = sub.add_parser("planetoid")
    pl.add_argument("--root", required=True)
    pl.add_argument("--name", default="pubmed")
    pl.add_argument("--num-val", type=int, default=500)
    pl.add_argument("--raw-features", action="store_true", help="skip row normalisation")
    pl.add_argument("--out", required=True)
    gs = sub.add_parser("graphsage")
    gs.add_argument("--prefix", required=True)
    gs.add_argument("--out", required=True)
    args = p.parse_args(argv)
    if args.kind == "planetoid":
        ds = convert_planetoid(args.root, args.name, args.num_val, not args.raw_features)
    else:
        ds = convert_graphsage(args.prefix)
    save_dataset(ds, args.out)
    cfg = {"edges": "edges.tsv", "features": "features.txt", "labels": "labels.tsv",
           "splits": "splits.tsv", "num_classes": ds.num_classes, "inductive": ds.inductive,
           "task": ds.task, "output_dir": "run"}
    (Path(args.out) / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    print(f"wrote {ds.num_nodes} nodes, {ds.graph.num_edges // 2} edges to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

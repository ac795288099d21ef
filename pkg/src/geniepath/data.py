"""Dataset containers, text formats, and the planted-path generator.

File formats (all UTF-8 text, ``\\n`` line ends, blank lines ignored):

* edge list: ``src<TAB>dst`` per line, ``#`` starts a comment line
* features: header ``N P`` then N lines of P space-separated decimals
* labels: ``node<TAB>class`` (multi-class) or ``node<TAB>0,1,0,...`` (multi-label)
* splits: ``node<TAB>train|val|test``; unlisted nodes carry no split
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components
import scipy.sparse as sp

from .graph import Graph, build_graph, disjoint_union, induced_subgraph

TASKS = ("multi-class", "multi-label")
SPLITS = ("train", "val", "test")

_UINT = re.compile(r"\d+")


class DataFormatError(ValueError):
    def __init__(self, path, line_no: int | None, message: str):
        where = f"{path}:{line_no}" if line_no is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line_no = line_no


def _lines(path):
    text = Path(path).read_text()
    for no, line in enumerate(text.split("\n"), start=1):
        if line.strip():
            yield no, line


def _uint(tok: str, path, no: int, what: str) -> int:
    if not _UINT.fullmatch(tok):
        raise DataFormatError(path, no, f"{what} {tok!r} is not a non-negative integer")
    return int(tok)


def _float(tok: str, path, no: int) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise DataFormatError(path, no, f"cannot parse number {tok!r}") from None
    if not np.isfinite(val):
        raise DataFormatError(path, no, f"non-finite value {tok!r}")
    return val


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- edge list

def load_edge_list(path) -> list[tuple[int, int]]:
    edges = []
    for no, line in _lines(path):
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(path, no, "expected 'src<TAB>dst'")
        edges.append((_uint(parts[0], path, no, "node id"), _uint(parts[1], path, no, "node id")))
    return edges


def write_edge_list(path, edges) -> None:
    Path(path).write_text("".join(f"{s}\t{d}\n" for s, d in edges))


def undirected_edges(g: Graph) -> list[tuple[int, int]]:
    """One ``(min, max)`` pair per mirrored edge, self-loops dropped."""
    keep = g.edge_src < g.edge_dst
    return sorted(zip(g.edge_src[keep].tolist(), g.edge_dst[keep].tolist()))


# ---------------------------------------------------------------- features

def load_features(path) -> np.ndarray:
    lines = list(_lines(path))
    if not lines:
        raise DataFormatError(path, None, "empty feature file")
    no, header = lines[0]
    parts = header.split(" ")
    if len(parts) != 2:
        raise DataFormatError(path, no, "header must be 'N P'")
    n = _uint(parts[0], path, no, "row count")
    p = _uint(parts[1], path, no, "column count")
    rows = lines[1:]
    if len(rows) != n:
        raise DataFormatError(path, None, f"header declares {n} rows, found {len(rows)}")
    X = np.zeros((n, p))
    for r, (no, line) in enumerate(rows):
        toks = line.split(" ") if p else [t for t in line.split(" ") if t]
        if len(toks) != p:
            raise DataFormatError(path, no, f"expected {p} values, found {len(toks)}")
        X[r] = [_float(t, path, no) for t in toks]
    return X


def write_features(path, X: np.ndarray) -> None:
    X = np.asarray(X, dtype=np.float64)
    out = [f"{X.shape[0]} {X.shape[1]}\n"]
    out.extend(" ".join(_fmt(v) for v in row) + "\n" for row in X)
    Path(path).write_text("".join(out))


# ---------------------------------------------------------------- labels

def load_labels(path, task: str, num_classes: int | None = None):
    """Return ``(nodes, values)``.

    ``values`` is an int vector for multi-class and an ``(n, C)`` 0/1 matrix for
    multi-label.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    nodes, values = [], []
    seen = set()
    width = num_classes
    for no, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(path, no, "expected 'node<TAB>label'")
        node = _uint(parts[0], path, no, "node id")
        if node in seen:
            raise DataFormatError(path, no, f"duplicate node {node}")
        seen.add(node)
        if task == "multi-class":
            c = _uint(parts[1], path, no, "class")
            if num_classes is not None and c >= num_classes:
                raise DataFormatError(path, no, f"class {c} >= number of classes {num_classes}")
            values.append(c)
        else:
            bits = [_uint(b, path, no, "label bit") for b in parts[1].split(",")]
            if any(b > 1 for b in bits):
                raise DataFormatError(path, no, "label bits must be 0 or 1")
            if width is None:
                width = len(bits)
            elif len(bits) != width:
                raise DataFormatError(path, no, f"expected {width} label bits, found {len(bits)}")
            values.append(bits)
        nodes.append(node)
    nodes = np.asarray(nodes, dtype=np.int64)
    if task == "multi-class":
        return nodes, np.asarray(values, dtype=np.int64)
    return nodes, np.asarray(values, dtype=np.int64).reshape(len(nodes), width or 0)


def write_labels(path, nodes, values, task: str) -> None:
    out = []
    for node, val in zip(np.asarray(nodes).tolist(), values):
        if task == "multi-class":
            out.append(f"{node}\t{int(val)}\n")
        else:
            out.append(f"{node}\t{','.join(str(int(b)) for b in val)}\n")
    Path(path).write_text("".join(out))


# ---------------------------------------------------------------- splits

def load_splits(path, num_nodes: int | None = None) -> dict[str, np.ndarray]:
    """Node ids per split, or boolean masks when ``num_nodes`` is given."""
    ids: dict[str, list[int]] = {s: [] for s in SPLITS}
    seen = set()
    for no, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise DataFormatError(path, no, "expected 'node<TAB>train|val|test'")
        node = _uint(parts[0], path, no, "node id")
        if node in seen:
            raise DataFormatError(path, no, f"duplicate node {node}")
        if num_nodes is not None and node >= num_nodes:
            raise DataFormatError(path, no, f"node {node} out of range [0, {num_nodes})")
        seen.add(node)
        ids[parts[1]].append(node)
    if num_nodes is None:
        return {s: np.asarray(v, dtype=np.int64) for s, v in ids.items()}
    masks = {}
    for s, v in ids.items():
        m = np.zeros(num_nodes, dtype=bool)
        m[v] = True
        masks[s] = m
    return masks


def write_splits(path, masks: dict[str, np.ndarray]) -> None:
    rows = []
    for s in SPLITS:
        rows.extend((int(i), s) for i in np.flatnonzero(masks[s]))
    rows.sort()
    Path(path).write_text("".join(f"{i}\t{s}\n" for i, s in rows))


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    """Node-classification data on one graph.

    For inductive data the graph is a disjoint union; :meth:`view` cuts out the
    connected components that hold a split's nodes so evaluation never touches
    the other splits' structure. Multi-class labels are ``-1`` where unknown.
    """

    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    task: str
    num_classes: int
    inductive: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.graph.num_nodes
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features have {self.features.shape[0]} rows for {n} nodes")
        if self.labels.shape[0] != n:
            raise ValueError(f"labels have {self.labels.shape[0]} rows for {n} nodes")
        if self.task == "multi-label" and (self.labels.ndim != 2
                                           or self.labels.shape[1] != self.num_classes):
            raise ValueError("multi-label labels must be an N x C bit matrix")
        masks = [np.asarray(m, dtype=bool) for m in (self.train_mask, self.val_mask, self.test_mask)]
        if any(m.shape != (n,) for m in masks):
            raise ValueError("masks must have one entry per node")
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise ValueError("train/val/test masks overlap")
        self.train_mask, self.val_mask, self.test_mask = masks

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def mask(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, f"{split}_mask")

    def view(self, split: str) -> Dataset:
        """The part of the data a given split may read."""
        if not self.inductive:
            return self
        mask = self.mask(split)
        comp = self.components()
        wanted = np.unique(comp[mask])
        for other in SPLITS:
            if other != split and np.isin(comp[self.mask(other)], wanted).any():
                raise ValueError(f"inductive split {split!r} shares a component with {other!r}")
        nodes = np.flatnonzero(np.isin(comp, wanted))
        sub, kept = induced_subgraph(self.graph, nodes)
        masks = {s: (self.mask(s)[kept] if s == split else np.zeros(kept.size, bool)) for s in SPLITS}
        return Dataset(sub, self.features[kept], self.labels[kept], masks["train"],
                       masks["val"], masks["test"], self.task, self.num_classes, False,
                       {"nodes": kept})

    def components(self) -> np.ndarray:
        g = self.graph
        adj = sp.coo_matrix((np.ones(g.num_edges), (g.edge_src, g.edge_dst)),
                            shape=(g.num_nodes, g.num_nodes))
        return connected_components(adj, directed=True, connection="weak")[1]


def assemble_labels(num_nodes: int, nodes: np.ndarray, values: np.ndarray, task: str,
                    num_classes: int | None = None) -> tuple[np.ndarray, int]:
    if nodes.size and nodes.max() >= num_nodes:
        raise ValueError(f"label for node {nodes.max()} outside [0, {num_nodes})")
    if task == "multi-class":
        c = num_classes if num_classes is not None else (int(values.max()) + 1 if values.size else 0)
        labels = np.full(num_nodes, -1, dtype=np.int64)
        labels[nodes] = values
        return labels, c
    c = num_classes if num_classes is not None else values.shape[1]
    labels = np.zeros((num_nodes, c), dtype=np.int64)
    labels[nodes] = values
    return labels, c


def load_dataset(edges, features, labels, splits, task: str, num_classes: int | None = None,
                 undirected: bool = True, inductive: bool = False) -> Dataset:
    X = load_features(features)
    n = X.shape[0]
    g = build_graph(load_edge_list(edges), n, undirected=undirected)
    nodes, values = load_labels(labels, task, num_classes)
    y, c = assemble_labels(n, nodes, values, task, num_classes)
    masks = load_splits(splits, n)
    labelled = np.zeros(n, dtype=bool)
    labelled[nodes] = True
    for s in SPLITS:
        missing = masks[s] & ~labelled
        if missing.any():
            raise ValueError(f"{s} node {int(np.flatnonzero(missing)[0])} has no label")
    return Dataset(g, X, y, masks["train"], masks["val"], masks["test"], task, c, inductive)


def save_dataset(ds: Dataset, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / name for k, name in
             (("edges", "edges.tsv"), ("features", "features.txt"),
              ("labels", "labels.tsv"), ("splits", "splits.tsv"))}
    write_edge_list(paths["edges"], undirected_edges(ds.graph))
    write_features(paths["features"], ds.features)
    if ds.task == "multi-class":
        nodes = np.flatnonzero(ds.labels >= 0)
    else:
        nodes = np.flatnonzero(ds.train_mask | ds.val_mask | ds.test_mask)
    write_labels(paths["labels"], nodes, ds.labels[nodes], ds.task)
    write_splits(paths["splits"], {s: ds.mask(s) for s in SPLITS})
    return paths


# ---------------------------------------------------------------- planted paths

class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Planted receptive-path benchmark.

    Each graph has a target node whose label is the sign of feature 0 on the
    node ``signal_hops`` steps down a chain. A hub attached to chain node
    ``hub_anchor`` (default: the signal node) carries ``hub_degree`` leaves;
    leftover nodes hang off the leaves. Every feature except the planted one is
    zero-mean noise with std ``noise_std``; the hub region additionally shares
    one random vector per graph with std ``hub_decoy_scale * noise_std``.
    Labels are balanced within each split.
    """

    num_graphs: int = 200
    nodes_per_graph: int = 16
    signal_hops: int = 3
    hub_degree: int = 10
    noise_std: float = 0.1
    seed: int = 0
    num_features: int = 4
    num_val_graphs: int = 100
    num_test_graphs: int = 100
    hub_anchor: int | None = None
    hub_decoy_scale: float = 50.0

    def validate(self):
        if self.signal_hops < 1:
            raise InfeasibleSpec("signal_hops must be at least 1")
        if self.num_features < 1:
            raise InfeasibleSpec("num_features must be at least 1")
        if self.noise_std < 0:
            raise InfeasibleSpec("noise_std must be non-negative")
        if min(self.num_graphs, self.num_val_graphs, self.num_test_graphs, self.hub_degree) < 0:
            raise InfeasibleSpec("counts must be non-negative")
        if self.num_graphs < 1:
            raise InfeasibleSpec("need at least one training graph")
        if self.hub_anchor is not None and not 0 <= self.hub_anchor <= self.signal_hops:
            raise InfeasibleSpec("hub_anchor must be a chain node in [0, signal_hops]")
        if self.hub_decoy_scale < 0:
            raise InfeasibleSpec("hub_decoy_scale must be non-negative")
        need = self.signal_hops + 2 + self.hub_degree
        if self.nodes_per_graph < need:
            raise InfeasibleSpec(
                f"nodes_per_graph={self.nodes_per_graph} too small: chain of "
                f"{self.signal_hops + 1}, hub and {self.hub_degree} leaves need {need}")


def _planted_graph(spec: SynthSpec, label: int, rng: np.random.Generator):
    k = spec.signal_hops
    n = spec.nodes_per_graph
    hub = k + 1
    anchor = k if spec.hub_anchor is None else spec.hub_anchor
    # local ids: 0 target, 1..k chain (k carries the signal), k+1 hub, then leaves
    edges = [(c, c + 1) for c in range(k)]
    edges.append((anchor, hub))
    leaves = list(range(hub + 1, hub + 1 + spec.hub_degree))
    edges.extend((hub, leaf) for leaf in leaves)
    attach = leaves or [hub]
    for extra in range(hub + 1 + spec.hub_degree, n):
        edges.append((int(attach[rng.integers(len(attach))]), extra))

    X = rng.normal(0.0, spec.noise_std, size=(n, spec.num_features)) if spec.noise_std > 0 \
        else np.zeros((n, spec.num_features))
    # the hub region shares one zero-mean vector per graph: label-independent, so it
    # cannot be averaged away by deeper mean aggregation
    X[hub:] += rng.normal(0.0, spec.hub_decoy_scale * spec.noise_std, size=spec.num_features)
    X[k, 0] = 1.0 if label == 1 else -1.0

    perm = rng.permutation(n)
    edges = [(int(perm[a]), int(perm[b])) for a, b in edges]
    Xp = np.empty_like(X)
    Xp[perm] = X
    return build_graph(edges, n), Xp, int(perm[0]), int(perm[k])


def gen_planted_path(spec: SynthSpec) -> Dataset:
    """Disjoint union of planted-path graphs, one labelled target per graph."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    counts = {"train": spec.num_graphs, "val": spec.num_val_graphs, "test": spec.num_test_graphs}
    graphs, feats, targets, planted, split_of = [], [], [], [], []
    labels_all = []
    for split in SPLITS:
        m = counts[split]
        # balanced labels per split
        labs = rng.permutation(np.arange(m) % 2)
        for lab in labs:
            g, X, t, p = _planted_graph(spec, int(lab), rng)
            graphs.append(g)
            feats.append(X)
            targets.append(t)
            planted.append(p)
            split_of.append(split)
            labels_all.append(int(lab))
    g = disjoint_union(graphs)
    offsets = np.cumsum([0] + [gr.num_nodes for gr in graphs])[:-1]
    n = g.num_nodes
    labels = np.full(n, -1, dtype=np.int64)
    masks = {s: np.zeros(n, dtype=bool) for s in SPLITS}
    target_ids = np.asarray(targets, dtype=np.int64) + offsets
    planted_ids = np.asarray(planted, dtype=np.int64) + offsets
    for t, lab, split in zip(target_ids, labels_all, split_of):
        labels[t] = lab
        masks[split][t] = True
    return Dataset(g, np.vstack(feats), labels, masks["train"], masks["val"], masks["test"],
                   "multi-class", 2, inductive=True,
                   info={"targets": target_ids, "planted": planted_ids})

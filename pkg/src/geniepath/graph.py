"""Immutable sparse graph storage.

Edges are kept as flat ``(src, dst)`` endpoint arrays sorted by ``(dst, src)``,
with compressed-row offsets over the destination. Row ``i`` therefore lists the
in-edges of node ``i``; a message travels from ``src`` to ``dst``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    edge_src: np.ndarray
    edge_dst: np.ndarray
    row_offsets: np.ndarray
    has_self_loops: bool = False

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.shape[0])

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    @cached_property
    def segments(self):
        # imported lazily to keep graph-core free of the autodiff dependency
        from .autodiff import SegmentIndex

        return SegmentIndex(self.edge_dst, self.num_nodes)

    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.edge_src.tolist(), self.edge_dst.tolist()))

    def __repr__(self) -> str:
        return (f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, "
                f"has_self_loops={self.has_self_loops})")


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Per-edge weights on the sparsity pattern of ``graph``."""

    graph: Graph
    edge_weight: np.ndarray

    def to_dense(self) -> np.ndarray:
        """Dense ``N x N`` matrix with ``A[dst, src] = weight``."""
        n = self.graph.num_nodes
        dense = np.zeros((n, n))
        dense[self.graph.edge_dst, self.graph.edge_src] = self.edge_weight
        return dense


def _from_arrays(num_nodes: int, src: np.ndarray, dst: np.ndarray,
                 has_self_loops: bool) -> Graph:
    order = np.lexsort((src, dst))
    src = np.ascontiguousarray(src[order], dtype=np.int64)
    dst = np.ascontiguousarray(dst[order], dtype=np.int64)
    if src.size > 1:
        same = (src[1:] == src[:-1]) & (dst[1:] == dst[:-1])
        if same.any():
            k = int(np.flatnonzero(same)[0])
            raise GraphError(f"duplicate edge ({src[k]}, {dst[k]})")
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=num_nodes), out=offsets[1:])
    for arr in (src, dst, offsets):
        arr.setflags(write=False)
    return Graph(num_nodes, src, dst, offsets, has_self_loops)


def build_graph(edges: Iterable[tuple[int, int]], num_nodes: int,
                undirected: bool = True) -> Graph:
    """Build a graph from ``(src, dst)`` pairs.

    Undirected input is mirrored so both orientations are stored. Self-loops
    are not accepted here; use :func:`add_self_loops`. Duplicate directed
    edges (including a pair listed in both orientations of an undirected
    graph) are rejected.
    """
    if num_nodes < 0:
        raise GraphError("num_nodes must be non-negative")
    pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    src, dst = pairs[:, 0], pairs[:, 1]
    bad = (src < 0) | (src >= num_nodes) | (dst < 0) | (dst >= num_nodes)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise GraphError(f"edge ({src[k]}, {dst[k]}) has a node id outside [0, {num_nodes})")
    loops = src == dst
    if loops.any():
        k = int(np.flatnonzero(loops)[0])
        raise GraphError(f"self-loop ({src[k]}, {dst[k]}) in input; use add_self_loops")
    if undirected:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    return _from_arrays(num_nodes, src, dst, has_self_loops=False)


def add_self_loops(g: Graph) -> Graph:
    if g.has_self_loops or np.any(g.edge_src == g.edge_dst):
        raise GraphError("graph already has self-loops")
    ids = np.arange(g.num_nodes, dtype=np.int64)
    return _from_arrays(g.num_nodes, np.concatenate([g.edge_src, ids]),
                        np.concatenate([g.edge_dst, ids]), has_self_loops=True)


def _self_looped_degree(g: Graph) -> np.ndarray:
    if not g.has_self_loops:
        deg = g.in_degree
        if np.any(deg == 0):
            i = int(np.flatnonzero(deg == 0)[0])
            raise GraphError(f"node {i} has zero degree and no self-loop")
        return deg.astype(np.float64)
    return g.in_degree.astype(np.float64)


def sym_norm_adjacency(g: Graph) -> NormalizedAdjacency:
    """Weights ``1 / sqrt(d_i d_j)`` with ``d`` the (self-looped) degree."""
    deg = _self_looped_degree(g)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return NormalizedAdjacency(g, inv_sqrt[g.edge_dst] * inv_sqrt[g.edge_src])


def row_norm_adjacency(g: Graph) -> NormalizedAdjacency:
    """Weights ``1 / d_i``: each node averages its in-neighbourhood."""
    deg = _self_looped_degree(g)
    return NormalizedAdjacency(g, 1.0 / deg[g.edge_dst])


def neighborhood(g: Graph, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Sources of the in-edges of ``i`` (sorted) and their edge indices."""
    if not 0 <= i < g.num_nodes:
        raise GraphError(f"node {i} out of range [0, {g.num_nodes})")
    lo, hi = int(g.row_offsets[i]), int(g.row_offsets[i + 1])
    return g.edge_src[lo:hi], np.arange(lo, hi, dtype=np.int64)


def permute_nodes(g: Graph, perm: np.ndarray) -> Graph:
    """Relabel node ``v`` as ``perm[v]``."""
    perm = np.asarray(perm, dtype=np.int64)
    return _from_arrays(g.num_nodes, perm[g.edge_src], perm[g.edge_dst], g.has_self_loops)


def induced_subgraph(g: Graph, nodes: np.ndarray) -> tuple[Graph, np.ndarray]:
    """Subgraph on ``nodes`` (sorted, relabelled 0..m-1) and the kept node ids."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    new_id = np.full(g.num_nodes, -1, dtype=np.int64)
    new_id[nodes] = np.arange(nodes.size)
    keep = (new_id[g.edge_src] >= 0) & (new_id[g.edge_dst] >= 0)
    sub = _from_arrays(nodes.size, new_id[g.edge_src[keep]], new_id[g.edge_dst[keep]],
                       g.has_self_loops)
    return sub, nodes


def disjoint_union(graphs: list[Graph]) -> Graph:
    if not graphs:
        return _from_arrays(0, np.zeros(0, np.int64), np.zeros(0, np.int64), False)
    loops = {g.has_self_loops for g in graphs}
    if len(loops) != 1:
        raise GraphError("cannot union graphs with mixed self-loop policy")
    shift = np.cumsum([0] + [g.num_nodes for g in graphs])
    src = np.concatenate([g.edge_src + s for g, s in zip(graphs, shift)])
    dst = np.concatenate([g.edge_dst + s for g, s in zip(graphs, shift)])
    return _from_arrays(int(shift[-1]), src, dst, loops.pop())

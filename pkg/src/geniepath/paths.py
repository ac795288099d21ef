"""Edge importances and receptive-path export to DOT."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .graph import Graph

GREEN, BLUE, RED = "green", "blue", "red"


def importance_level(w: float) -> str:
    if w < 0.1:
        return GREEN
    if w < 0.2:
        return BLUE
    return RED


@dataclass(frozen=True)
class EdgeImportance:
    edge: int
    src: int
    dst: int
    w: float
    level: str


class UnsupportedVariant(ValueError):
    pass


def extract_importance(model, g: Graph, X, layer_index: int = 0) -> list[EdgeImportance]:
    """Attention weight of every edge at one breadth layer.

    Edge indices refer to the self-looped graph the model runs on.
    """
    from .model import ATTENTION_VARIANTS

    if model.config.variant not in ATTENTION_VARIANTS:
        raise UnsupportedVariant(f"variant {model.config.variant!r} has no attention weights")
    if not 0 <= layer_index < model.config.depth:
        raise IndexError(f"layer {layer_index} out of range [0, {model.config.depth})")
    g = model.prepare_graph(g)
    alpha = model.forward(g, X).attention[layer_index]
    return [EdgeImportance(e, int(s), int(d), float(w), importance_level(float(w)))
            for e, (s, d, w) in enumerate(zip(g.edge_src, g.edge_dst, alpha))]


@dataclass(frozen=True)
class Subgraph:
    target: int
    nodes: tuple[int, ...]
    edges: tuple[int, ...]  # edge indices into the source graph


def _hops_to(g: Graph, target: int, blocked: int | None = None, limit: int | None = None) -> dict[int, int]:
    """BFS distances along message direction (src -> dst) ending at ``target``."""
    dist = {target: 0}
    queue = deque([target])
    while queue:
        u = queue.popleft()
        if limit is not None and dist[u] >= limit:
            continue
        for s in g.edge_src[g.row_offsets[u]:g.row_offsets[u + 1]].tolist():
            if s not in dist and s != blocked:
                dist[s] = dist[u] + 1
                queue.append(s)
    return dist


def receptive_subgraph(g: Graph, target: int, hops: int) -> Subgraph:
    """Nodes within ``hops`` of ``target`` and the edges on its receptive paths.

    An edge ``j -> i`` is kept when some simple path of at most ``hops`` edges
    runs through it into ``target``. Self-loops of nodes that still have a hop
    to spend (distance < ``hops``) are kept as well: those nodes weigh their
    own state when aggregating.
    """
    if not 0 <= target < g.num_nodes:
        raise IndexError(f"target {target} out of range [0, {g.num_nodes})")
    if hops < 0:
        raise ValueError("hops must be non-negative")
    dist = _hops_to(g, target, limit=hops)
    avoiding: dict[int, dict[int, int]] = {}
    kept = []
    for e, (j, i) in enumerate(zip(g.edge_src.tolist(), g.edge_dst.tolist())):
        if i not in dist or dist[i] >= hops:
            continue
        if j == i:
            kept.append(e)
        elif j != target:
            # remaining budget for i -> ... -> target without revisiting j
            if dist[i] == 0:
                kept.append(e)
            else:
                if j not in avoiding:
                    avoiding[j] = _hops_to(g, target, blocked=j, limit=hops - 1)
                if avoiding[j].get(i, hops) <= hops - 1:
                    kept.append(e)
    nodes = sorted(dist)
    return Subgraph(target, tuple(nodes), tuple(kept))


def export_dot(sub: Subgraph, g: Graph, importances, name: str = "receptive_paths") -> str:
    """DOT text; arrows point from the neighbour to the aggregating node.

    ``importances`` maps edge index to weight (a sequence aligned with the
    edges of ``g`` or a list of :class:`EdgeImportance`). Pen width is
    ``1 + 9 w``.
    """
    if len(importances) and isinstance(importances[0], EdgeImportance):
        weight = {imp.edge: imp.w for imp in importances}
    else:
        weight = dict(enumerate(float(w) for w in importances))
    lines = [f"digraph {name} {{"]
    for v in sub.nodes:
        if v == sub.target:
            lines.append(f'  "{v}" [style=filled, fillcolor=black, fontcolor=white];')
        else:
            lines.append(f'  "{v}";')
    for e in sorted(sub.edges, key=lambda e: (int(g.edge_dst[e]), int(g.edge_src[e]))):
        w = weight[e]
        lines.append(f'  "{int(g.edge_src[e])}" -> "{int(g.edge_dst[e])}" '
                     f'[color={importance_level(w)}, penwidth={1.0 + 9.0 * w:.4f}, '
                     f'label="{w:.4f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"

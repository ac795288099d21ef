"""Tape-recorded propagation layers.

GeniePath's adaptive path layer pairs a breadth step (attention over the
in-neighbourhood, self included) with a depth step (LSTM-style gates and a
per-node memory). Baselines reuse the same sparse primitives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, NormalizedAdjacency


@dataclass
class BreadthParams:
    W: Tensor
    W_s: Tensor
    W_d: Tensor
    v: Tensor
    b: Tensor | None = None  # optional bias inside the attention tanh


@dataclass
class DepthParams:
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_c: Tensor
    b_i: Tensor | None = None
    b_f: Tensor | None = None
    b_o: Tensor | None = None
    b_c: Tensor | None = None


@dataclass
class NodeState:
    H: Tensor
    C: Tensor
    mu: Tensor | None = None


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": ad.identity,
    "relu": ad.relu,
    "tanh": ad.tanh,
}


def _affine(x: Tensor, W: Tensor, b: Tensor | None) -> Tensor:
    out = ad.matmul(x, W)
    return out if b is None else ad.add_row(out, b)


def _require_self_loops(g: Graph):
    if not g.has_self_loops:
        raise ValueError("attention layers need a self-looped graph (call add_self_loops)")


def input_embed(X: Tensor, W_x: Tensor) -> Tensor:
    return ad.matmul(X, W_x)


def attention_scores(H: Tensor, g: Graph, theta: BreadthParams) -> Tensor:
    """Per-edge weights alpha(h_dst, h_src), normalised over each in-neighbourhood.

    The two projections are applied to the N node rows first and then gathered
    to the edges, so no intermediate is larger than |E| x K.
    """
    _require_self_loops(g)
    own = ad.gather_rows(ad.matmul(H, theta.W_s), g.edge_dst)
    nbr = ad.gather_rows(ad.matmul(H, theta.W_d), g.edge_src)
    pre = ad.add(own, nbr)
    if theta.b is not None:
        pre = ad.add_row(pre, theta.b)
    raw = ad.matmul(ad.tanh(pre), theta.v)
    return ad.segment_softmax(raw, g.segments)


def breadth_preactivation(H: Tensor, g: Graph, theta: BreadthParams) -> tuple[Tensor, Tensor]:
    """Return ``(W^T sum_j alpha_ij h_j, alpha)`` before the tanh."""
    alpha = attention_scores(H, g, theta)
    messages = ad.scale_rows(ad.gather_rows(H, g.edge_src), alpha)
    return ad.matmul(ad.segment_sum(messages, g.segments), theta.W), alpha


def breadth_aggregate(H: Tensor, g: Graph, theta: BreadthParams) -> Tensor:
    pre, _ = breadth_preactivation(H, g, theta)
    return ad.tanh(pre)


def _gates(x: Tensor, C_prev: Tensor, phi: DepthParams) -> tuple[Tensor, Tensor]:
    i = ad.sigmoid(_affine(x, phi.W_i, phi.b_i))
    f = ad.sigmoid(_affine(x, phi.W_f, phi.b_f))
    o = ad.sigmoid(_affine(x, phi.W_o, phi.b_o))
    c_tilde = ad.tanh(_affine(x, phi.W_c, phi.b_c))
    if C_prev.shape != c_tilde.shape:
        raise ValueError(f"memory shape {C_prev.shape} does not match gate output {c_tilde.shape}")
    C_next = ad.add(ad.mul(f, C_prev), ad.mul(i, c_tilde))
    return ad.mul(o, ad.tanh(C_next)), C_next


def depth_update(H_tmp: Tensor, C_prev: Tensor, phi: DepthParams) -> tuple[Tensor, Tensor]:
    """Gated memory step; returns ``(H_next, C_next)``."""
    return _gates(H_tmp, C_prev, phi)


def geniepath_layer(state: NodeState, g: Graph, theta: BreadthParams,
                    phi: DepthParams) -> NodeState:
    H_next, C_next = depth_update(breadth_aggregate(state.H, g, theta), state.C, phi)
    return NodeState(H_next, C_next, state.mu)


def geniepath_lazy_update(h_t: Tensor, mu_t: Tensor, C_t: Tensor,
                          phi: DepthParams) -> tuple[Tensor, Tensor]:
    """Depth gates over ``[h_t, mu_t]``; returns ``(mu_next, C_next)``."""
    return _gates(ad.concat_cols(h_t, mu_t), C_t, phi)


def propagate(H: Tensor, adj: NormalizedAdjacency) -> Tensor:
    """``A_norm @ H`` as an edge gather followed by a segment sum."""
    g = adj.graph
    w = ad.constant(adj.edge_weight.reshape(-1, 1))
    return ad.segment_sum(ad.scale_rows(ad.gather_rows(H, g.edge_src), w), g.segments)


def gcn_layer(H: Tensor, adj: NormalizedAdjacency, W: Tensor, activation: str = "relu",
              b: Tensor | None = None) -> Tensor:
    return ACTIVATIONS[activation](_affine(propagate(H, adj), W, b))


def residual_wrap(H_new: Tensor, H_prev: Tensor, mode: str,
                  W_proj: Tensor | None = None) -> Tensor:
    """Skip connection: ``add`` sums, ``concat`` joins columns then projects."""
    if mode == "none":
        return H_new
    if mode == "add":
        return ad.add(H_new, H_prev)
    if mode == "concat":
        joined = ad.concat_cols(H_new, H_prev)
        return joined if W_proj is None else ad.matmul(joined, W_proj)
    raise ValueError(f"unknown residual mode {mode!r}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))

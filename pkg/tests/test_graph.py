import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geniepath.graph import (GraphError, add_self_loops, build_graph, neighborhood, permute_nodes,
                             row_norm_adjacency, sym_norm_adjacency)

from conftest import random_graph


def test_mirror_closure():
    g = build_graph([(0, 1)], 2, undirected=True)
    assert sorted(g.edges()) == [(0, 1), (1, 0)]


def test_empty_graph():
    g = build_graph([], 3)
    assert g.num_edges == 0
    assert g.row_offsets.tolist() == [0, 0, 0, 0]


def test_path_degrees(path3):
    assert path3.in_degree.tolist() == [1, 2, 1]


def test_layout_sorted_by_dst_then_src():
    g = build_graph([(2, 0), (0, 1), (1, 2)], 3)
    pairs = list(zip(g.edge_dst.tolist(), g.edge_src.tolist()))
    assert pairs == sorted(pairs)
    assert g.row_offsets[-1] == g.num_edges


def test_directed_input_kept_as_is():
    g = build_graph([(0, 1)], 2, undirected=False)
    assert g.edges() == [(0, 1)]


@pytest.mark.parametrize("edges, msg", [
    ([(0, 5)], "outside"),
    ([(0, 1), (0, 1)], "duplicate"),
    ([(0, 1), (1, 0)], "duplicate"),
    ([(1, 1)], "self-loop"),
])
def test_build_rejects(edges, msg):
    with pytest.raises(GraphError, match=msg):
        build_graph(edges, 3)


def test_duplicate_error_names_pair():
    with pytest.raises(GraphError, match=r"\(0, 1\)"):
        build_graph([(0, 1), (0, 1)], 2, undirected=False)


def test_self_loops_on_empty_graph():
    g = add_self_loops(build_graph([], 2))
    assert g.edges() == [(0, 0), (1, 1)]
    assert g.has_self_loops


def test_self_loops_count(path3):
    assert add_self_loops(path3).num_edges == 7


def test_self_loops_twice_rejected(path3):
    with pytest.raises(GraphError):
        add_self_loops(add_self_loops(path3))


def test_sym_norm_isolated_node():
    adj = sym_norm_adjacency(add_self_loops(build_graph([], 1)))
    assert adj.edge_weight.tolist() == [1.0]


def test_sym_norm_single_edge():
    adj = sym_norm_adjacency(add_self_loops(build_graph([(0, 1)], 2)))
    np.testing.assert_allclose(adj.edge_weight, [0.5] * 4, rtol=0, atol=1e-15)


def test_sym_norm_path(path3):
    g = add_self_loops(path3)
    adj = sym_norm_adjacency(g)
    # self-looped degrees are (2, 3, 2)
    w = dict(zip(g.edges(), adj.edge_weight))
    assert w[(0, 1)] == pytest.approx(1 / np.sqrt(6), abs=1e-15)
    assert w[(1, 1)] == pytest.approx(1 / 3, abs=1e-15)


def test_sym_norm_zero_degree_rejected():
    with pytest.raises(GraphError, match="zero degree"):
        sym_norm_adjacency(build_graph([(0, 1)], 3))


def test_row_norm_isolated():
    adj = row_norm_adjacency(add_self_loops(build_graph([], 1)))
    assert adj.edge_weight.tolist() == [1.0]


def test_row_norm_star_center():
    g = add_self_loops(build_graph([(0, 1), (0, 2), (0, 3)], 4))
    adj = row_norm_adjacency(g)
    center = adj.edge_weight[g.edge_dst == 0]
    np.testing.assert_array_equal(center, [0.25] * 4)


def test_row_norm_rows_sum_to_one_random(rng):
    g = add_self_loops(random_graph(rng, 50, p=0.1))
    adj = row_norm_adjacency(g)
    sums = np.zeros(50)
    for d, w in zip(g.edge_dst, adj.edge_weight):
        sums[d] += w
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)


def test_neighborhood_examples(path3):
    src, idx = neighborhood(path3, 1)
    assert src.tolist() == [0, 2]
    assert np.all(path3.edge_dst[idx] == 1)
    g = add_self_loops(build_graph([], 2))
    assert neighborhood(g, 1)[0].tolist() == [1]
    with pytest.raises(GraphError):
        neighborhood(path3, 3)


edge_lists = st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.just(n),
    st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
            .filter(lambda e: e[0] < e[1]), max_size=30),
))


@settings(max_examples=60, deadline=None)
@given(edge_lists, st.randoms(use_true_random=False))
def test_build_independent_of_input_order(spec, rnd):
    n, edges = spec
    edges = list(edges)
    shuffled = edges[:]
    rnd.shuffle(shuffled)
    flipped = [(b, a) if rnd.random() < 0.5 else (a, b) for a, b in shuffled]
    g1, g2 = build_graph(edges, n), build_graph(flipped, n)
    assert g1.edge_src.tobytes() == g2.edge_src.tobytes()
    assert g1.edge_dst.tobytes() == g2.edge_dst.tobytes()
    assert g1.row_offsets.tobytes() == g2.row_offsets.tobytes()


@settings(max_examples=60, deadline=None)
@given(edge_lists)
def test_structural_invariants(spec):
    n, edges = spec
    g = add_self_loops(build_graph(sorted(edges), n))
    assert np.all(np.diff(g.row_offsets) >= 0) and g.row_offsets[-1] == g.num_edges
    assert sum(len(neighborhood(g, i)[0]) for i in range(n)) == g.num_edges
    loops = g.edge_src == g.edge_dst
    assert sorted(g.edge_src[loops].tolist()) == list(range(n))
    sym = dict(zip(g.edges(), sym_norm_adjacency(g).edge_weight))
    for (s, d), w in sym.items():
        assert sym[(d, s)] == w
    rows = np.bincount(g.edge_dst, weights=row_norm_adjacency(g).edge_weight, minlength=n)
    np.testing.assert_allclose(rows, 1.0, atol=1e-9)


def test_permute_nodes_relabels(path3):
    g = permute_nodes(path3, np.array([2, 0, 1]))
    assert sorted(g.edges()) == sorted([(2, 0), (0, 2), (0, 1), (1, 0)])

import numpy as np
import pytest

from geniepath.graph import build_graph


def random_graph(rng, n, p=0.3):
    """Undirected Erdos-Renyi graph with a spanning path so no node is isolated."""
    edges = {(i, i + 1) for i in range(n - 1)}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.add((i, j))
    return build_graph(sorted(edges), n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def path3():
    return build_graph([(0, 1), (1, 2)], 3)

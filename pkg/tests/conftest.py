import numpy as np
import pytest
from hypothesis import settings

from dcgst.graphdata import Graph, adjacency_from_edges

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_graph(n: int, d: int, c: int, p: float, seed: int) -> Graph:
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, k=1)
    keep = rng.random(iu[0].size) < p
    edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
    labels = np.arange(n) % c
    return Graph(adjacency_from_edges(n, edges), rng.uniform(-1, 1, (n, d)), labels.astype(np.int64), c)


def two_cliques() -> Graph:
    """Two 5-cliques joined by one edge, one-hot cluster features."""
    edges = [(i, j) for i in range(5) for j in range(i + 1, 5)]
    edges += [(i + 5, j + 5) for i, j in edges]
    edges.append((4, 5))
    labels = np.array([0] * 5 + [1] * 5)
    features = np.eye(2)[labels]
    return Graph(adjacency_from_edges(10, np.array(edges)), features, labels, 2)


@pytest.fixture
def graph10():
    return random_graph(10, 5, 3, 0.35, seed=3)


@pytest.fixture
def cliques():
    return two_cliques()

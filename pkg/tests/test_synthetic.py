import numpy as np
import pytest

from dcgst.graphdata import load_graph
from dcgst.synthetic import main, make_sbm


@pytest.fixture(scope="module")
def sbm():
    return make_sbm(seed=0)


def test_size_and_degree(sbm):
    assert sbm.n == 1000 and sbm.class_count == 2
    assert sbm.num_edges == 2000
    assert 2 * sbm.num_edges / sbm.n == pytest.approx(4.0)


def test_homophily(sbm):
    coo = sbm.adjacency.tocoo()
    same = sbm.labels[coo.row] == sbm.labels[coo.col]
    assert same.mean() == pytest.approx(0.9, abs=1e-3)


def test_balanced_blocks(sbm):
    assert np.bincount(sbm.labels).tolist() == [500, 500]


def test_features_are_row_normalized(sbm):
    assert np.allclose(sbm.features.sum(axis=1), 1.0)
    assert (sbm.features >= 0).all()


def test_topic_words_carry_the_label():
    g = make_sbm(n=200, feature_dim=100, topic_size=10, signal=1.0, seed=3)
    support = [set(np.flatnonzero(g.features[g.labels == c].sum(axis=0))) for c in range(2)]
    assert len(support[0]) <= 10 and len(support[1]) <= 10


def test_deterministic_per_seed():
    a, b, c = make_sbm(n=100, seed=4), make_sbm(n=100, seed=4), make_sbm(n=100, seed=5)
    assert (a.adjacency != b.adjacency).nnz == 0 and np.array_equal(a.features, b.features)
    assert (a.adjacency != c.adjacency).nnz > 0


def test_command_writes_loadable_directory(tmp_path, capsys):
    assert main([str(tmp_path / "sbm"), "--n", "60", "--seed", "1"]) == 0
    g = load_graph(tmp_path / "sbm")
    assert g.n == 60 and g.num_edges == 120
    assert "60 nodes" in capsys.readouterr().out

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcgst import diffcore as dc
from dcgst.edgepredictor import (
    EditCandidates,
    EdgePredictor,
    VariantAdjacency,
    bce_pair_set,
    edge_probabilities,
    ep_forward,
    ep_loss,
    feature_edit_pairs,
    frozen_gumbel,
    sample_variant,
    select_edit_candidates,
)
from dcgst.graphdata import Graph, adjacency_from_edges, normalized_adjacency
from dcgst.shiftmetrics import CmdConfig

from conftest import random_graph


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_probability_examples():
    t = dc.Tape().const(np.array([[0.0, 0.0], [0.0, 0.0], [math.sqrt(math.log(3)), 0.0], [math.sqrt(math.log(3)), 0.0]]))
    m = edge_probabilities(t, np.array([[0, 1], [2, 3], [3, 2]])).value
    assert m[0] == 0.5
    assert m[1] == pytest.approx(0.75, abs=1e-12)
    assert m[1] == m[2]


def test_ep_forward_is_symmetric(graph10):
    ep = EdgePredictor.create(graph10, 8, 0)
    pairs = np.array([[0, 3], [3, 0], [2, 7], [7, 2]])
    _, m = ep_forward(ep, normalized_adjacency(graph10), graph10.features, pairs)
    assert m.value[0] == m.value[1] and m.value[2] == m.value[3]
    assert np.all((m.value > 0) & (m.value < 1))


@pytest.mark.parametrize("prob", [1e-9, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0])
def test_zero_noise_threshold_table(prob):
    base = adjacency_from_edges(3, np.empty((0, 2)))
    v = sample_variant(np.array([prob]), base, np.array([[0, 1]]), tau=1.2, noise=frozen_gumbel(0.0))
    clamped = min(max(prob, 1e-7), 1 - 1e-7)
    s = _sigmoid(math.log(clamped) / 1.2)
    assert v.relaxed[0] == pytest.approx(s, abs=1e-12)
    # at G = 0 even the clamped M = 1 - 1e-7 stays just below 1/2
    assert v.hard[0] == 0.0


def test_zero_noise_hand_values():
    base = adjacency_from_edges(3, np.empty((0, 2)))
    v = sample_variant(np.array([0.5, 0.9]), base, np.array([[0, 1], [1, 2]]), noise=frozen_gumbel(0.0))
    # sigmoid(ln 0.5 / 1.2) = 0.35948 and sigmoid(ln 0.9 / 1.2) = 0.47806
    assert v.relaxed == pytest.approx([0.35948, 0.47806], abs=1e-5)
    assert v.hard.tolist() == [0.0, 0.0]
    # positive noise can carry an edge over the threshold: ln 0.5 + 1 > 0
    up = sample_variant(np.array([0.5]), base, np.array([[0, 1]]), noise=frozen_gumbel(1.0))
    assert up.hard[0] == 1.0


@given(st.integers(0, 1000))
def test_variant_restriction_and_symmetry(seed):
    g = random_graph(9, 2, 2, 0.3, seed=seed)
    rng = np.random.default_rng(seed)
    cands = EditCandidates(np.array([2]), np.array([[0, 5], [4, 6]]))
    pairs = cands.pairs(g.n)
    v = sample_variant(rng.random(len(pairs)), g.adjacency, pairs, rng=rng)
    a = v.matrix().toarray()
    base = g.adjacency.toarray()
    assert np.array_equal(a, a.T) and set(np.unique(a)) <= {0.0, 1.0} and np.all(np.diag(a) == 0)
    allowed = np.zeros_like(a, dtype=bool)
    allowed[pairs[:, 0], pairs[:, 1]] = allowed[pairs[:, 1], pairs[:, 0]] = True
    assert np.array_equal(a[~allowed], base[~allowed])
    for (i, j), h in v.edits.items():
        assert a[i, j] == h


def test_variant_propagation_matches_dense_normalization():
    g = random_graph(7, 2, 2, 0.3, seed=2)
    pairs = EditCandidates(np.array([1]), np.empty((0, 2), np.int64)).pairs(g.n)
    v = sample_variant(np.full(len(pairs), 0.6), g.adjacency, pairs, rng=np.random.default_rng(0))
    h = np.random.default_rng(1).normal(size=(7, 3))
    got = v.propagate(dc.Tape().const(h)).value
    expected = normalized_adjacency(v.matrix()) @ h
    assert np.allclose(got, expected, atol=1e-12)


def test_straight_through_gradient_matches_relaxed_path():
    g = random_graph(6, 2, 2, 0.4, seed=4)
    pairs = EditCandidates(np.array([0, 3]), np.array([[1, 2]])).pairs(g.n)
    rng = np.random.default_rng(5)
    m0 = rng.uniform(0.2, 0.8, len(pairs))
    h = rng.normal(size=(6, 3))
    weights = rng.normal(size=(6, 3))
    noise = frozen_gumbel(0.3)

    def loss_of(variant, tape):
        out = variant.propagate(tape.const(h))
        return dc.sum_all(dc.mul(dc.power(out, 2), tape.const(weights)))

    tape = dc.Tape()
    variant = sample_variant(tape.param("M", m0), g.adjacency, pairs, noise=noise)
    analytic = dc.backward(loss_of(variant, tape))["M"]
    hard0, s0 = variant.hard, variant.relaxed
    assert 0 < hard0.sum() < hard0.size  # both outcomes are exercised

    def build(params):
        # same forward value as the straight-through sample at M0, differentiable through s
        t = dc.Tape()
        s = dc.sigmoid((dc.log(t.param("M", params["M"])) + t.const(noise(len(pairs)))) * (1 / 1.2))
        values = s + t.const(hard0 - s0)
        return loss_of(VariantAdjacency(g.adjacency, pairs, hard0, s0, values), t)

    numeric_errors = dc.finite_diff_errors(build, {"M": m0}, "M")
    assert np.all(numeric_errors <= 1e-4)
    assert np.allclose(dc.backward(build({"M": m0}))["M"], analytic, atol=1e-12)


def test_relaxed_mode_feeds_sigmoid_values():
    base = adjacency_from_edges(3, np.empty((0, 2)))
    v = sample_variant(np.array([0.5]), base, np.array([[0, 1]]), noise=frozen_gumbel(0.0), straight_through=False)
    assert v.hard[0] == pytest.approx(0.35948, abs=1e-5)


def test_zero_pair_budget_and_node_rows():
    g = random_graph(8, 2, 2, 0.3, seed=0)
    cands = select_edit_candidates(g, np.zeros((2, 2)), np.ones((3, 2)), np.array([0, 1]), np.array([5, 6, 7]),
                                   m=2, e=0)
    assert cands.pair_set.shape == (0, 2)
    pairs = cands.pairs(g.n)
    assert np.all(np.isin(pairs, cands.node_set).any(axis=1))


def test_shift_ranking_picks_farthest_test_node():
    g = random_graph(8, 2, 2, 0.3, seed=0)
    train_nodes, test_nodes = np.array([0, 1, 2]), np.array([3, 4, 5])
    z_train = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]])
    z_test = np.array([[0.05, 0.05], [3.0, 3.0], [1.5, 1.0]])  # node 3 sits inside the train cluster
    cands = select_edit_candidates(g, z_train, z_test, train_nodes, test_nodes, m=2, e=0)
    assert 4 in cands.node_set and 3 not in cands.node_set and 5 not in cands.node_set


def test_identical_features_tie_break():
    path = np.array([[i, i + 1] for i in range(5)])
    g = Graph(adjacency_from_edges(6, path), np.ones((6, 3)), np.arange(6) % 2, 2)
    chosen = feature_edit_pairs(g, 4, np.random.default_rng(0))
    # every absent pair (10 of them) is among the 80 draws; ties resolve to the smallest (min, max)
    assert chosen.tolist() == [[0, 1], [0, 2], [0, 3], [1, 2]]


def test_bce_pair_set_is_balanced(graph10):
    pairs, targets = bce_pair_set(graph10, np.random.default_rng(0))
    assert abs(int(targets.sum()) - int((targets == 0).sum())) <= 1
    adj = graph10.adjacency.toarray()
    assert np.array_equal(adj[pairs[:, 0], pairs[:, 1]], targets)


def test_ep_loss_cases():
    t = dc.Tape()
    m = t.const(np.full(6, 0.5))
    targets = np.array([1, 1, 1, 0, 0, 0], float)
    assert float(ep_loss(m, targets).value) == pytest.approx(math.log(2))
    z = np.random.default_rng(0).normal(size=(4, 3))
    assert float(ep_loss(m, targets, z, z, alpha=5.0).value) == pytest.approx(math.log(2))
    shifted = float(ep_loss(m, targets, z, z + 1.0, alpha=2.0).value)
    assert shifted > math.log(2)
    assert float(ep_loss(m, targets, z, z + 1.0, alpha=0.0).value) == pytest.approx(math.log(2))


def test_full_ep_loss_gradients(graph10):
    ep = EdgePredictor.create(graph10, 6, 1)
    adj = normalized_adjacency(graph10)
    pairs = EditCandidates(np.array([2, 7]), np.empty((0, 2), np.int64)).pairs(graph10.n)
    noise = frozen_gumbel(0.5)
    teacher_w = np.random.default_rng(2).normal(size=(5, 3)) * 0.5

    def build(params):
        t = dc.Tape()
        ep.params.W1, ep.params.W2 = params["ep.W1"], params["ep.W2"]
        t_emb, _ = ep_forward(ep, adj, graph10.features, pairs, tape=t)
        # relaxed values keep the chain smooth; the straight-through swap is checked on its own above
        variant = sample_variant(edge_probabilities(t_emb, pairs), graph10.adjacency, pairs, noise=noise,
                                 straight_through=False)
        z = variant.propagate(t.const(graph10.features @ teacher_w))
        m_bce = edge_probabilities(t_emb, ep.bce_pairs)
        # a fixed support keeps the CMD span constant, as the training gradient assumes
        return ep_loss(m_bce, ep.bce_targets, dc.gather_rows(z, [0, 4, 5, 8]), dc.gather_rows(z, [1, 2, 3]), 2.0,
                       CmdConfig(support=([-5.0], [5.0])))

    start = {"ep.W1": ep.params.W1.copy(), "ep.W2": ep.params.W2.copy()}
    for name in start:
        assert np.all(dc.finite_diff_errors(build, dict(start), name) <= 1e-4)

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcgst import diffcore as dc
from dcgst.errors import EmptyMaskError, ShapeError
from dcgst.gcnmodel import GcnParams, accuracy, ce_loss, forward, init_params, predict
from dcgst.graphdata import Graph, adjacency_from_edges, normalized_adjacency

from conftest import random_graph


def test_glorot_bound_and_determinism():
    p = init_params(30, 64, 7, seed=3)
    assert np.abs(p.W1).max() <= math.sqrt(6 / (30 + 64))
    assert np.abs(p.W2).max() <= math.sqrt(6 / (64 + 7))
    again = init_params(30, 64, 7, seed=3)
    assert np.array_equal(p.W1, again.W1) and np.array_equal(p.W2, again.W2)
    assert not np.array_equal(p.W1, init_params(30, 64, 7, seed=4).W1)


def test_zero_features_give_uniform_confidences(graph10):
    adj = normalized_adjacency(graph10)
    res = forward(init_params(5, 8, 3, 0), adj, np.zeros((10, 5)))
    assert np.all(res.logits.value == 0.0)
    assert np.allclose(res.confidences, 1 / 3, atol=1e-12)


def test_isolated_node():
    g = Graph(adjacency_from_edges(1, np.empty((0, 2))), np.array([[0.3, -1.2]]), np.array([0]), 2)
    p = init_params(2, 4, 2, 1)
    expected = np.maximum(g.features @ p.W1, 0) @ p.W2
    assert np.allclose(predict(p, normalized_adjacency(g), g.features), expected, atol=1e-14)


@given(st.integers(0, 1000))
def test_permutation_equivariance(seed):
    g = random_graph(8, 4, 2, 0.3, seed=seed)
    perm = np.random.default_rng(seed).permutation(8)
    p = init_params(4, 6, 2, seed)
    base = predict(p, normalized_adjacency(g), g.features)
    a = g.adjacency[perm][:, perm]
    permuted = predict(p, normalized_adjacency(a.tocsr()), g.features[perm])
    assert np.allclose(permuted, base[perm], atol=1e-12)


def _logit_result(logits):
    t = dc.Tape()
    node = t.param("r", np.asarray(logits, dtype=float))
    return type("R", (), {"logits": node})()


def test_ce_values():
    assert float(ce_loss(_logit_result(np.zeros((1, 7))), np.array([3]), [0]).value) == pytest.approx(math.log(7))
    confident = np.array([[50.0, 0.0], [0.0, 50.0]])
    assert float(ce_loss(_logit_result(confident), np.array([0, 1]), [0, 1]).value) < 1e-6
    logits = np.array([[1.0, 0.0], [0.2, 0.9]])
    l1 = float(ce_loss(_logit_result(logits), np.array([0, 0]), [0]).value)
    l2 = float(ce_loss(_logit_result(logits), np.array([0, 0]), [1]).value)
    both = float(ce_loss(_logit_result(logits), np.array([0, 0]), [0, 1]).value)
    assert both == pytest.approx((l1 + l2) / 2)
    with pytest.raises(EmptyMaskError):
        ce_loss(_logit_result(logits), np.array([0, 0]), [])


def test_ce_gradient_zero_outside_mask():
    res = _logit_result(np.random.default_rng(0).normal(size=(5, 3)))
    g = dc.backward(ce_loss(res, np.array([0, 1, 2, 0, 1]), [1, 3]))["r"]
    assert np.all(g[[0, 2, 4]] == 0.0)


def test_accuracy_rules():
    logits = np.array([[2.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    assert accuracy(logits, np.array([0, 1, 0]), [0, 1, 2]) == 1.0
    assert accuracy(logits, np.array([1, 0, 1]), [0, 1, 2]) == 0.0
    assert accuracy(logits, np.array([0, 0, 0]), [2]) == 1.0  # tie goes to class 0
    with pytest.raises(EmptyMaskError):
        accuracy(logits, np.array([0, 0, 0]), [])


def test_doubling_features_doubles_preactivation(graph10):
    adj = normalized_adjacency(graph10)
    p = init_params(5, 8, 3, 2)
    pre = lambda x: adj @ (x @ p.W1)
    assert np.allclose(pre(2 * graph10.features), 2 * pre(graph10.features), atol=1e-14, rtol=0)


def test_eval_forward_is_deterministic(graph10):
    adj = normalized_adjacency(graph10)
    p = init_params(5, 8, 3, 2)
    assert np.array_equal(predict(p, adj, graph10.features), predict(p, adj, graph10.features))


def test_train_mode_dropout_uses_rng(graph10):
    adj = normalized_adjacency(graph10)
    p = init_params(5, 8, 3, 2)
    a = forward(p, adj, graph10.features, train_mode=True, rng=np.random.default_rng(1)).logits.value
    b = forward(p, adj, graph10.features, train_mode=True, rng=np.random.default_rng(1)).logits.value
    assert np.array_equal(a, b)
    assert not np.array_equal(a, predict(p, adj, graph10.features))


def test_shape_errors(graph10):
    adj = normalized_adjacency(graph10)
    with pytest.raises(ShapeError):
        forward(init_params(4, 8, 3, 0), adj, graph10.features)


def test_hidden_z_source(graph10):
    adj = normalized_adjacency(graph10)
    res = forward(init_params(5, 8, 3, 0), adj, graph10.features, z_source="hidden")
    assert res.z.shape == (10, 8) and res.z is res.hidden


def test_full_teacher_loss_gradients(graph10):
    adj = normalized_adjacency(graph10)
    p = init_params(5, 8, 3, 0, dropout_rate=0.5)

    def build(params):
        res = forward(GcnParams(params["W1"], params["W2"], 0.5), adj, graph10.features, train_mode=True,
                      rng=np.random.default_rng(9))
        return ce_loss(res, graph10.labels, [0, 1, 2, 5])

    for name in ("W1", "W2"):
        assert dc.finite_diff_check(build, {"W1": p.W1, "W2": p.W2}, name, tolerance=1e-4)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(5, 8, 3, 0, dropout_rate=0.3)
    p.save(tmp_path / "teacher.npz")
    back = GcnParams.load(tmp_path / "teacher.npz")
    assert np.array_equal(back.W1, p.W1) and np.array_equal(back.W2, p.W2)
    assert back.dropout_rate == 0.3

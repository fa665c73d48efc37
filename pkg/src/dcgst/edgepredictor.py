"""Shift-aware edge predictor and graph-variant sampling.

Edge probabilities come from a GCN encoder T: M[i, j] = sigmoid(T_i . T_j).
Only a restricted set of pairs is ever scored or edited: every pair touching
one of ``m`` shift-prone nodes, plus ``e`` feature-similarity pairs.  A variant
adjacency is drawn per pair with a relaxed Bernoulli sample

    s = sigmoid((log M + G) / tau),   hard = floor(s + 1/2)

where G is Gumbel(0, 1) noise.  The hard 0/1 value is used in the forward pass
and gradients are routed through s (straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from dcgst import diffcore as dc
from dcgst.gcnmodel import GcnParams, forward, init_params
from dcgst.graphdata import Graph, feature_cosine
from dcgst.shiftmetrics import DEFAULT_CMD, CmdConfig, cmd_node, node_shift_scores

PROB_CLAMP = 1e-7
EP_EMBED_DIM = 16


@dataclass
class EditCandidates:
    node_set: np.ndarray
    pair_set: np.ndarray = field(default_factory=lambda: np.empty((0, 2), np.int64))

    def pairs(self, n: int) -> np.ndarray:
        """Every editable pair as sorted (min, max) rows, deduplicated."""
        blocks = [self.pair_set.reshape(-1, 2)]
        nodes = np.asarray(self.node_set, dtype=np.int64)
        if nodes.size:
            others = np.arange(n)
            u = np.repeat(nodes, n)
            v = np.tile(others, nodes.size)
            keep = u != v
            blocks.append(np.stack([u[keep], v[keep]], axis=1))
        pairs = np.concatenate(blocks, axis=0).astype(np.int64)
        if not pairs.size:
            return pairs.reshape(0, 2)
        return _unique_pairs(pairs, n)


def _unique_pairs(pairs: np.ndarray, n: int) -> np.ndarray:
    """Rows as (min, max), deduplicated and sorted lexicographically."""
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keys = np.unique(lo * n + hi)
    return np.stack([keys // n, keys % n], axis=1)


def _rank_desc(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:count]


def _absent_pairs(g: Graph, count: int, rng: np.random.Generator, max_tries: int = 50) -> np.ndarray:
    """Up to ``count`` distinct non-edges drawn uniformly, as (min, max) rows."""
    n = g.n
    possible = n * (n - 1) // 2 - g.num_edges
    count = min(count, possible)
    found = np.empty((0, 2), np.int64)
    adj = g.adjacency
    for _ in range(max_tries):
        if found.shape[0] >= count:
            break
        need = 2 * (count - found.shape[0]) + 16
        u = rng.integers(n, size=need)
        v = rng.integers(n, size=need)
        keep = u != v
        cand = np.sort(np.stack([u[keep], v[keep]], axis=1), axis=1)
        if cand.size:
            cand = cand[np.asarray(adj[cand[:, 0], cand[:, 1]]).ravel() == 0]
        merged = np.concatenate([found, cand])
        _, first = np.unique(merged, axis=0, return_index=True)
        found = merged[np.sort(first)]
    return found[:count]


def feature_edit_pairs(g: Graph, e: int, rng: np.random.Generator) -> np.ndarray:
    """Top e/2 similar non-edges (from 20e random draws) and bottom e/2 similar edges."""
    if e <= 0:
        return np.empty((0, 2), np.int64)
    half = e // 2
    absent = _absent_pairs(g, 20 * e, rng)
    absent = absent[np.lexsort((absent[:, 1], absent[:, 0]))] if absent.size else absent
    chosen = [absent[_rank_desc(feature_cosine(g, absent), e - half)]] if absent.size else []
    edges = g.edge_list()
    if edges.size and half:
        chosen.append(edges[_rank_desc(-feature_cosine(g, edges), half)])
    if not chosen:
        return np.empty((0, 2), np.int64)
    return np.unique(np.concatenate(chosen), axis=0)


def select_edit_candidates(
    g: Graph,
    z_train: np.ndarray,
    z_test: np.ndarray,
    train_nodes: np.ndarray,
    test_nodes: np.ndarray,
    m: int,
    e: int = 0,
    rng: np.random.Generator | None = None,
    cfg: CmdConfig = DEFAULT_CMD,
    pair_set: np.ndarray | None = None,
) -> EditCandidates:
    """Shift-prone nodes from each side plus feature-similarity pairs.

    Test nodes whose embedding sits farthest from the training set (and training
    nodes farthest from the test set) are picked, m/2 from each side.  A
    precomputed ``pair_set`` skips the feature-similarity draw.
    """
    half = max(m, 0) // 2
    picked = []
    if half:
        picked.append(np.asarray(test_nodes)[_rank_desc(node_shift_scores(z_test, z_train, cfg), half)])
        picked.append(np.asarray(train_nodes)[_rank_desc(node_shift_scores(z_train, z_test, cfg), half)])
    node_set = np.unique(np.concatenate(picked)) if picked else np.empty(0, np.int64)
    if pair_set is None:
        pair_set = feature_edit_pairs(g, e, rng if rng is not None else np.random.default_rng(0))
    return EditCandidates(node_set=node_set.astype(np.int64), pair_set=pair_set)


def bce_pair_set(g: Graph, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """All edges as positives plus an equal number of random non-edges."""
    pos = g.edge_list()
    neg = _absent_pairs(g, pos.shape[0], rng)
    pairs = np.concatenate([pos, neg]).astype(np.int64).reshape(-1, 2)
    targets = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
    return pairs, targets


def edge_probabilities(t: dc.Node, pairs: np.ndarray) -> dc.Node:
    """sigmoid(T_i . T_j) for each row (i, j) of ``pairs``; shape (len(pairs),)."""
    return dc.sigmoid(dc.row_dot(dc.gather_rows(t, pairs[:, 0]), dc.gather_rows(t, pairs[:, 1])))


@dataclass
class EdgePredictor:
    params: GcnParams
    bce_pairs: np.ndarray
    bce_targets: np.ndarray

    @classmethod
    def create(cls, g: Graph, hidden: int, seed, dropout_rate: float = 0.5, out_dim: int = EP_EMBED_DIM):
        rng = np.random.default_rng(seed)
        params = init_params(g.features.shape[1], hidden, out_dim, rng, dropout_rate)
        return cls(params, *bce_pair_set(g, rng))


def ep_forward(
    ep: EdgePredictor | GcnParams,
    adj_norm,
    x: np.ndarray,
    pairs: np.ndarray,
    tape: dc.Tape | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    prefix: str = "ep.",
) -> tuple[dc.Node, dc.Node]:
    """Encode nodes and score ``pairs``; returns (T, M over pairs)."""
    params = ep.params if isinstance(ep, EdgePredictor) else ep
    res = forward(params, adj_norm, x, train_mode=train_mode, rng=rng, tape=tape, prefix=prefix)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return res.logits, edge_probabilities(res.logits, pairs)


GumbelSource = Callable[[int], np.ndarray]


def frozen_gumbel(value: float = 0.0) -> GumbelSource:
    return lambda size: np.full(size, value)


def gumbel_noise(rng: np.random.Generator) -> GumbelSource:
    def draw(size):
        u = rng.uniform(np.finfo(float).tiny, 1.0, size=size)
        return -np.log(-np.log(u))
    return draw


def logistic_noise(rng: np.random.Generator) -> GumbelSource:
    def draw(size):
        u = rng.uniform(np.finfo(float).tiny, 1.0, size=size)
        return np.log(u) - np.log1p(-u)
    return draw


class VariantAdjacency:
    """Binary adjacency equal to the base graph except on edited pairs.

    Acts as the normalized propagation operator D'^-1/2 (A' + I) D'^-1/2 inside
    a tape, with the edited entries carried by a differentiable node.
    """

    def __init__(self, base: sp.csr_matrix, pairs: np.ndarray, hard: np.ndarray,
                 relaxed: np.ndarray, values: dc.Node | None = None):
        self.base = base
        self.pairs = pairs
        self.hard = hard
        self.relaxed = relaxed
        self.values = values
        n = base.shape[0]
        self.shape = (n, n)
        # base entries not covered by an edit pair keep weight 1
        coo = sp.triu(base, k=1).tocoo()
        base_pairs = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
        if pairs.size:
            edited = sp.csr_matrix((np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=self.shape)
            keep = np.asarray(edited[base_pairs[:, 0], base_pairs[:, 1]]).ravel() == 0 if base_pairs.size else np.zeros(0, bool)
        else:
            keep = np.ones(base_pairs.shape[0], bool)
        self._fixed = base_pairs[keep]
        self._deg = None
        self._dinv = None

    @property
    def edits(self) -> dict[tuple[int, int], int]:
        return {(int(i), int(j)): int(h) for (i, j), h in zip(self.pairs, self.hard)}

    def matrix(self) -> sp.csr_matrix:
        """The sampled binary symmetric adjacency A'."""
        on = self.pairs[self.hard > 0.5]
        both = np.concatenate([self._fixed, on])
        n = self.shape[0]
        a = sp.csr_matrix(
            (np.ones(2 * both.shape[0]), (np.concatenate([both[:, 0], both[:, 1]]), np.concatenate([both[:, 1], both[:, 0]]))),
            shape=(n, n),
        )
        a.sum_duplicates()
        a.sort_indices()
        return a

    def _structure(self, tape: dc.Tape):
        fixed, pairs = self._fixed, self.pairs
        rows = np.concatenate([fixed[:, 0], fixed[:, 1], pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([fixed[:, 1], fixed[:, 0], pairs[:, 1], pairs[:, 0]])
        edit_vals = self.values if self.values is not None and self.values.tape is tape else tape.const(self.hard)
        vals = dc.concat_rows([tape.const(np.ones(2 * fixed.shape[0])), edit_vals, edit_vals])
        return rows, cols, vals

    def propagate(self, h: dc.Node) -> dc.Node:
        tape = h.tape
        if self._dinv is None or self._dinv.tape is not tape:
            rows, cols, vals = self._structure(tape)
            n = self.shape[0]
            ones = tape.const(np.ones((n, 1)))
            deg = dc.spmm_values(rows, cols, vals, n, ones) + 1.0
            self._dinv = dc.power(deg, -0.5)
            self._rows, self._cols, self._vals = rows, cols, vals
        scaled = dc.mul(self._dinv, h)
        agg = dc.spmm_values(self._rows, self._cols, self._vals, self.shape[0], scaled) + scaled
        return dc.mul(self._dinv, agg)


def sample_variant(
    m_probs: dc.Node | np.ndarray,
    base: sp.csr_matrix,
    pairs: np.ndarray,
    tau: float = 1.2,
    noise: GumbelSource | None = None,
    rng: np.random.Generator | None = None,
    form: str = "gumbel",
    straight_through: bool = True,
) -> VariantAdjacency:
    """Relaxed-Bernoulli sample of every pair in ``pairs``.

    ``noise`` injects a fixed noise source (e.g. :func:`frozen_gumbel`);
    otherwise single Gumbel variates are drawn from ``rng``.  ``form="logistic"``
    uses the binary-concrete variant sigmoid((logit M + L) / tau) instead.
    With ``straight_through=False`` the relaxed values themselves enter the graph.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not isinstance(m_probs, dc.Node):
        m_probs = dc.Tape().const(np.asarray(m_probs, dtype=np.float64))
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or an explicit noise source")
        noise = logistic_noise(rng) if form == "logistic" else gumbel_noise(rng)
    tape = m_probs.tape
    k = pairs.shape[0]
    g = tape.const(np.asarray(noise(k), dtype=np.float64).reshape(k))
    mc = dc.clamp(m_probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if form == "logistic":
        arg = dc.log(mc) - dc.log(1.0 - mc) + g
    else:
        arg = dc.log(mc) + g
    s = dc.sigmoid(arg * (1.0 / tau))
    hard = np.floor(s.value + 0.5)
    values = s + tape.const(hard - s.value) if straight_through else s
    return VariantAdjacency(base, pairs, hard if straight_through else s.value, s.value.copy(), values)


def ep_loss(
    m_bce: dc.Node,
    targets: np.ndarray,
    z_u: dc.Node | np.ndarray | None = None,
    z_ca: dc.Node | np.ndarray | None = None,
    alpha: float = 0.0,
    cfg: CmdConfig = DEFAULT_CMD,
) -> dc.Node:
    """Reconstruction BCE over the scored pairs plus ``alpha`` times CMD(Z_U, Z_CA)."""
    loss = dc.binary_cross_entropy(m_bce, targets)
    if alpha and z_u is not None and z_ca is not None:
        loss = loss + cmd_node(z_u, z_ca, cfg, tape=m_bce.tape) * alpha
    return loss

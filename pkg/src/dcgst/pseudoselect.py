"""Pseudo-label selection: confident candidates, entropy reduction, relaxed subset search."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from dcgst import diffcore as dc
from dcgst.errors import DegenerateWeightError
from dcgst.shiftmetrics import DEFAULT_CMD, CmdConfig, cmd, cmd_weighted


@dataclass
class CandidateSet:
    nodes: np.ndarray
    pseudo_labels: np.ndarray
    confidences: np.ndarray
    K: int
    lam: float = 0.5

    def __len__(self):
        return int(self.nodes.size)

    def next_k(self) -> int:
        return next_k(self.K, self.lam)


def next_k(k: int, lam: float) -> int:
    return int(math.ceil((1.0 + lam) * k - 1e-12))


def default_delta(k: int) -> int:
    return int(math.ceil(k / 2))


def candidate_set(confidences: np.ndarray, unlabeled, K: int, lam: float = 0.5) -> CandidateSet:
    """Per class, the ``K`` most confident unlabeled nodes predicted as that class."""
    if K < 1:
        raise ValueError("K must be >= 1")
    unlabeled = np.sort(np.asarray(unlabeled, dtype=np.int64))
    pred = np.argmax(confidences[unlabeled], axis=1)
    nodes, labels = [], []
    for j in range(confidences.shape[1]):
        members = unlabeled[pred == j]
        conf = confidences[members, j]
        order = np.lexsort((members, -conf))[:K]
        nodes.append(members[order])
        labels.append(np.full(order.size, j, dtype=np.int64))
    nodes = np.concatenate(nodes) if nodes else np.empty(0, np.int64)
    labels = np.concatenate(labels) if labels else np.empty(0, np.int64)
    return CandidateSet(nodes, labels, confidences[nodes, labels] if nodes.size else np.empty(0), K, lam)


def _entropy(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=1)


def ner_table(logits: np.ndarray, adjacency: sp.spmatrix, adj_norm: sp.spmatrix, nodes) -> np.ndarray:
    """Summed neighbor entropy reduction for each candidate node.

    For candidate c and each neighbor v (self excluded), the reduction is
    H(softmax(r_v)) - H(softmax(r_v + w * r_c)) with w the normalized edge
    weight from c to v.  Entropies are in nats.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    a = sp.csr_matrix(adjacency)
    owner, nbr = [], []
    for i, c in enumerate(nodes):
        nb = a.indices[a.indptr[c]:a.indptr[c + 1]]
        nb = nb[nb != c]
        owner.append(np.full(nb.size, i))
        nbr.append(nb)
    if not nodes.size:
        return np.zeros(0)
    owner = np.concatenate(owner).astype(np.int64)
    nbr = np.concatenate(nbr).astype(np.int64)
    if not nbr.size:
        return np.zeros(nodes.size)
    w = np.asarray(sp.csr_matrix(adj_norm)[nbr, nodes[owner]]).ravel()
    before = _entropy(logits[nbr])
    after = _entropy(logits[nbr] + w[:, None] * logits[nodes[owner]])
    return np.bincount(owner, weights=before - after, minlength=nodes.size)


def selection_objective(z_u, z_l, z_c, ner, subset, gamma: float, cfg: CmdConfig = DEFAULT_CMD) -> float:
    """CMD(Z_U, Z_{subset + L}) - gamma * sum of NER over ``subset`` (subset indexes Z_C)."""
    subset = np.asarray(subset, dtype=np.int64)
    q_side = np.concatenate([np.asarray(z_l).reshape(-1, np.shape(z_c)[1]), np.asarray(z_c)[subset]])
    return cmd(z_u, q_side, cfg) - gamma * float(np.sum(np.asarray(ner)[subset]))


def optimize_q(
    z_u: np.ndarray,
    z_l: np.ndarray,
    z_c: np.ndarray,
    ner: np.ndarray,
    gamma: float,
    delta: int,
    steps: int = 300,
    lr: float = 0.05,
    cfg: CmdConfig = DEFAULT_CMD,
    q_init: np.ndarray | None = None,
) -> np.ndarray:
    """Relaxed selection vector minimizing CMD - gamma*NER + max(0, |q|_1 - delta).

    ``q`` starts at delta/|C| and is clipped to [0, 1] after every Adam step.
    """
    k = z_c.shape[0]
    if k == 0:
        return np.zeros(0)
    ner = np.asarray(ner, dtype=np.float64)
    q = np.full(k, min(delta / k, 1.0)) if q_init is None else np.clip(np.array(q_init, dtype=np.float64), 0, 1)
    params = {"q": q}
    opt = dc.Adam(lr=lr, l2=0.0)
    for _ in range(steps):
        tape = dc.Tape()
        qn = tape.param("q", params["q"])
        try:
            shift = cmd_weighted(z_u, z_l, z_c, qn, cfg, tape=tape)
        except DegenerateWeightError:
            break
        info = dc.sum_all(dc.mul(qn, tape.const(ner)))
        penalty = dc.relu(dc.sum_all(qn) - float(delta))
        loss = shift - info * gamma + penalty
        opt.step(params, dc.backward(loss))
        np.clip(params["q"], 0.0, 1.0, out=params["q"])
        assert np.all((params["q"] >= 0.0) & (params["q"] <= 1.0))
    return params["q"]


def select_top(q: np.ndarray, candidates: CandidateSet, delta: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``delta`` candidates with largest q (ties: higher confidence, then lower node id)."""
    k = len(candidates)
    if delta > k:
        warnings.warn(f"budget {delta} exceeds {k} candidates; taking all", stacklevel=2)
        delta = k
    if delta <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    order = np.lexsort((candidates.nodes, -candidates.confidences, -np.asarray(q)))[:delta]
    return candidates.nodes[order], candidates.pseudo_labels[order]


def select_by_confidence(candidates: CandidateSet, delta: int) -> tuple[np.ndarray, np.ndarray]:
    """Confidence-only selection used by the plain self-training baseline."""
    return select_top(candidates.confidences, candidates, delta)

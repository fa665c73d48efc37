"""Two-layer graph convolutional classifier without bias terms.

    H1     = relu(A_norm @ (dropout(X) @ W1))
    logits = A_norm @ (dropout(H1) @ W2)

The embedding used for discrepancy measurements is the final-layer output
(``z_source="logits"``); ``z_source="hidden"`` selects H1 instead.

Checkpoints are ``.npz`` archives holding three arrays: ``W1`` (D_v x hidden),
``W2`` (hidden x out) and a 0-d ``dropout_rate``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dcgst import diffcore as dc
from dcgst.errors import EmptyMaskError, ShapeError


@dataclass
class GcnParams:
    W1: np.ndarray
    W2: np.ndarray
    dropout_rate: float = 0.5

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}W1": self.W1, f"{prefix}W2": self.W2}

    def copy(self) -> "GcnParams":
        return GcnParams(self.W1.copy(), self.W2.copy(), self.dropout_rate)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, W1=self.W1, W2=self.W2, dropout_rate=np.float64(self.dropout_rate))

    @classmethod
    def load(cls, path: str | Path) -> "GcnParams":
        with np.load(path) as data:
            return cls(data["W1"].copy(), data["W2"].copy(), float(data["dropout_rate"]))


def glorot(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(d_in: int, hidden: int, out: int, seed, dropout_rate: float = 0.5) -> GcnParams:
    if min(d_in, hidden, out) < 1:
        raise ValueError("layer dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    return GcnParams(glorot(d_in, hidden, rng), glorot(hidden, out, rng), dropout_rate)


@dataclass
class ForwardResult:
    tape: dc.Tape
    hidden: dc.Node
    logits: dc.Node
    z: dc.Node

    @property
    def confidences(self) -> np.ndarray:
        x = self.logits.value
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def propagate(adj, h: dc.Node) -> dc.Node:
    """Apply a normalized adjacency: a constant sparse matrix or a variant operator."""
    if hasattr(adj, "propagate"):
        return adj.propagate(h)
    return dc.spmm(adj, h)


def forward(
    params: GcnParams,
    adj,
    x: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    tape: dc.Tape | None = None,
    prefix: str = "",
    z_source: str = "logits",
) -> ForwardResult:
    if x.shape[1] != params.W1.shape[0]:
        raise ShapeError(f"features have {x.shape[1]} columns, W1 expects {params.W1.shape[0]}")
    if adj.shape[0] != x.shape[0]:
        raise ShapeError(f"adjacency is {adj.shape}, features have {x.shape[0]} rows")
    tape = tape or dc.Tape()
    w1 = tape.param(f"{prefix}W1", params.W1)
    w2 = tape.param(f"{prefix}W2", params.W2)
    rate = params.dropout_rate if train_mode else 0.0
    xin = dc.dropout(tape.const(x), rate, rng)
    h1 = dc.relu(propagate(adj, xin @ w1))
    logits = propagate(adj, dc.dropout(h1, rate, rng) @ w2)
    z = logits if z_source == "logits" else h1
    return ForwardResult(tape=tape, hidden=h1, logits=logits, z=z)


def predict(params: GcnParams, adj, x: np.ndarray) -> np.ndarray:
    """Eval-mode logits as a plain array."""
    return forward(params, adj, x).logits.value


def ce_loss(result: ForwardResult, labels: np.ndarray, node_set) -> dc.Node:
    node_set = np.asarray(node_set, dtype=np.int64)
    if node_set.size == 0:
        raise EmptyMaskError("ce_loss over an empty node set")
    return dc.cross_entropy(result.logits, np.asarray(labels)[node_set], node_set)


def accuracy(logits, labels: np.ndarray, node_set) -> float:
    """Fraction of ``node_set`` whose argmax (lowest index on ties) matches ``labels``."""
    node_set = np.asarray(node_set, dtype=np.int64)
    if node_set.size == 0:
        raise EmptyMaskError("accuracy over an empty node set")
    if isinstance(logits, ForwardResult):
        logits = logits.logits.value
    elif isinstance(logits, dc.Node):
        logits = logits.value
    pred = np.argmax(logits[node_set], axis=1)
    return float(np.mean(pred == np.asarray(labels)[node_set]))

"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records primitive applications in execution order, so operands
always precede results.  Leaves are either trainable parameters (named) or
constants.  :func:`backward` walks the tape in reverse and returns gradients for
every parameter.

    tape = Tape()
    w = tape.param("w", np.ones((3, 2)))
    loss = sum_all(power(x @ w, 2))
    grads = backward(loss)        # {"w": ndarray of shape (3, 2)}
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from dcgst.errors import EmptyMaskError, ShapeError

_VALUES_CHUNK = 1 << 16


class Node:
    __slots__ = ("tape", "index", "op", "value", "parents", "vjp", "name", "requires_grad", "kink")

    def __init__(self, tape, op, value, parents=(), vjp=None, name=None, requires_grad=False):
        self.tape = tape
        self.op = op
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.name = name
        self.requires_grad = requires_grad
        self.kink = None
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape})"

    def _wrap(self, other):
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, other):
        return add(self, self._wrap(other))

    def __radd__(self, other):
        return add(self._wrap(other), self)

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, self._wrap(other))

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self._wrap(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, power(self._wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __rmatmul__(self, other):
        return matmul(self._wrap(other), self)

    def __pow__(self, p):
        return power(self, p)


class Tape:
    """Append-only record of a differentiable computation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already on tape")
        node = Node(self, "param", np.asarray(value, dtype=np.float64), name=name, requires_grad=True)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return Node(self, "const", np.asarray(value, dtype=np.float64))

    def record(self, op: str, value, parents: Sequence[Node], vjp: Callable) -> Node:
        for p in parents:
            if p.tape is not self:
                raise ValueError("operands live on different tapes")
        rg = any(p.requires_grad for p in parents)
        return Node(self, op, value, parents, vjp if rg else None, requires_grad=rg)

    def kink_signature(self) -> list[np.ndarray]:
        """Branch masks of every non-smooth primitive, in tape order."""
        return [n.kink for n in self.nodes if n.kink is not None]


def backward(loss: Node, retain: Sequence[Node] = ()) -> dict:
    """Gradients of a scalar ``loss`` w.r.t. every parameter on its tape.

    Parameters not reached by the loss get a zero gradient.  Nodes listed in
    ``retain`` also get their gradient reported, keyed by the node itself.
    """
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.get(node.index)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    out: dict = {}
    for name, p in tape.params.items():
        g = grads.get(p.index)
        out[name] = np.zeros_like(p.value) if g is None else np.asarray(g).reshape(p.shape)
    for node in retain:
        g = grads.get(node.index)
        out[node] = np.zeros_like(node.value) if g is None else g
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Node, b: Node, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "add")
    return a.tape.record(
        "add", a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "sub")
    return a.tape.record(
        "sub", a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape.record(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(a: Node, c: float) -> Node:
    return a.tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def power(a: Node, p: float) -> Node:
    av = a.value
    return a.tape.record(
        "power", av ** p, (a,),
        lambda g: (g * p * av ** (p - 1),),
    )


def log(a: Node) -> Node:
    av = a.value
    return a.tape.record("log", np.log(av), (a,), lambda g: (g / av,))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return a.tape.record(
        "matmul", av @ bv, (a, b),
        lambda g: (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None),
    )


def spmm(adj: sp.spmatrix, h: Node) -> Node:
    """Constant sparse matrix times a dense node."""
    if adj.shape[1] != h.shape[0]:
        raise ShapeError(f"spmm: {adj.shape} @ {h.shape}")
    return h.tape.record("spmm", np.asarray(adj @ h.value), (h,), lambda g: (np.asarray(adj.T @ g),))


def spmm_values(rows: np.ndarray, cols: np.ndarray, values: Node, n_rows: int, h: Node) -> Node:
    """Sparse matrix with differentiable entries ``values`` at (rows, cols) times ``h``.

    ``values`` has shape (nnz,) and duplicate coordinates are summed.
    """
    if values.shape != (rows.size,) or cols.size != rows.size:
        raise ShapeError(f"spmm_values: {values.shape} values for {rows.size} coordinates")
    if cols.size and cols.max() >= h.shape[0]:
        raise ShapeError("spmm_values: column index exceeds operand rows")
    mat = sp.csr_matrix((values.value, (rows, cols)), shape=(n_rows, h.shape[0]))
    hv = h.value

    def vjp(g):
        gh = np.asarray(mat.T @ g) if h.requires_grad else None
        gv = None
        if values.requires_grad:
            gv = np.empty(rows.size)
            for lo in range(0, rows.size, _VALUES_CHUNK):
                hi = lo + _VALUES_CHUNK
                gv[lo:hi] = np.einsum("ij,ij->i", g[rows[lo:hi]], hv[cols[lo:hi]])
        return gv, gh

    return h.tape.record("spmm_values", np.asarray(mat @ hv), (values, h), vjp)


# -- nonlinearities ------------------------------------------------------------

def relu(a: Node) -> Node:
    mask = a.value > 0
    out = a.tape.record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))
    out.kink = mask
    return out


def sigmoid(a: Node) -> Node:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape.record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    inside = (a.value > lo) & (a.value < hi)
    out = a.tape.record("clamp", np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))
    out.kink = inside
    return out


def softmax(a: Node) -> Node:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return a.tape.record(
        "softmax", s, (a,),
        lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),),
    )


def _log_softmax_value(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax(a: Node) -> Node:
    ls = _log_softmax_value(a.value)
    s = np.exp(ls)
    return a.tape.record(
        "log_softmax", ls, (a,),
        lambda g: (g - s * g.sum(axis=1, keepdims=True),),
    )


# -- losses and reductions -----------------------------------------------------

def cross_entropy(logits: Node, targets: np.ndarray, rows: np.ndarray) -> Node:
    """Mean over ``rows`` of -log softmax(logits)[row, target]."""
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if rows.size == 0:
        raise EmptyMaskError("cross-entropy over an empty node set")
    if targets.shape != rows.shape:
        raise ShapeError("targets and rows differ in length")
    ls = _log_softmax_value(logits.value[rows])
    loss = -ls[np.arange(rows.size), targets].mean()

    def vjp(g):
        p = np.exp(ls)
        p[np.arange(rows.size), targets] -= 1.0
        out = np.zeros_like(logits.value)
        np.add.at(out, rows, p * (g / rows.size))
        return (out,)

    return logits.tape.record("cross_entropy", np.asarray(loss), (logits,), vjp)


def binary_cross_entropy(p: Node, target: np.ndarray, eps: float = 1e-7) -> Node:
    """Elementwise BCE of probabilities ``p`` against ``target``, mean-reduced."""
    target = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    if p.value.size == 0:
        raise EmptyMaskError("binary cross-entropy over an empty set")
    pv = np.clip(p.value, eps, 1.0 - eps)
    loss = -(target * np.log(pv) + (1.0 - target) * np.log1p(-pv)).mean()
    k = p.value.size
    return p.tape.record(
        "bce", np.asarray(loss), (p,),
        lambda g: (g * (pv - target) / (pv * (1.0 - pv)) / k,),
    )


def mean_rows(a: Node) -> Node:
    k = a.shape[0]
    return a.tape.record(
        "mean_rows", a.value.mean(axis=0, keepdims=True), (a,),
        lambda g: (np.broadcast_to(g / k, a.shape).copy(),),
    )


def sum_all(a: Node) -> Node:
    return a.tape.record("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def l2_norm(a: Node) -> Node:
    """Euclidean norm of all entries; the subgradient at the origin is zero."""
    nrm = float(np.sqrt((a.value ** 2).sum()))
    out = a.tape.record(
        "l2_norm", np.asarray(nrm), (a,),
        lambda g: (g * a.value / nrm if nrm > 0 else np.zeros_like(a.value),),
    )
    out.kink = np.array([nrm > 0])
    return out


# -- structural ----------------------------------------------------------------

def dropout(a: Node, rate: float, rng: np.random.Generator | None, train: bool = True) -> Node:
    if not train or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a.tape.record("dropout", a.value * keep, (a,), lambda g: (g * keep,))


def concat_rows(parts: Sequence[Node]) -> Node:
    parts = list(parts)
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ {cols}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return parts[0].tape.record("concat_rows", np.concatenate([p.value for p in parts], axis=0), parts, vjp)


def gather_rows(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        if a.value.ndim == 1:
            return (np.bincount(idx, weights=g, minlength=a.shape[0]),)
        scatter = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(a.shape[0], idx.size))
        return (np.asarray(scatter @ g),)

    return a.tape.record("gather_rows", a.value[idx], (a,), vjp)


def weighted_rows(q: Node, a: Node) -> Node:
    """Scale row i of ``a`` by ``q[i]``; ``q`` has shape (rows,)."""
    if q.shape != (a.shape[0],):
        raise ShapeError(f"weighted_rows: weights {q.shape} for {a.shape[0]} rows")
    qv, av = q.value, a.value
    return a.tape.record(
        "weighted_rows", qv[:, None] * av, (q, a),
        lambda g: ((g * av).sum(axis=1), qv[:, None] * g),
    )


def row_dot(a: Node, b: Node) -> Node:
    """Per-row inner product of two equally shaped matrices, shape (rows,)."""
    if a.shape != b.shape:
        raise ShapeError(f"row_dot: {a.shape} vs {b.shape}")
    ones = a.tape.const(np.ones((a.shape[1], 1)))
    prod = mul(a, b) @ ones
    return prod.tape.record("reshape", prod.value[:, 0], (prod,), lambda g: (g[:, None],))


# -- optimization --------------------------------------------------------------

class Adam:
    """Adam with the L2 penalty folded into the gradient (grad += l2 * param)."""

    def __init__(self, lr: float = 0.01, l2: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.l2 = l2
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.step_count += 1
        t = self.step_count
        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(value)
            if self.l2:
                g = g + self.l2 * value
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


# -- gradient oracle -----------------------------------------------------------

def finite_diff_errors(
    build: Callable[[dict[str, np.ndarray]], Node],
    params: dict[str, np.ndarray],
    name: str,
    h: float = 1e-4,
    max_entries: int = 64,
    seed: int = 0,
    floor: float = 1e-3,
) -> np.ndarray:
    """Relative error between analytic and central-difference gradients.

    ``build`` maps a parameter dict to a scalar loss node on a fresh tape and
    must be deterministic.  Entries whose +/-h perturbation flips a branch of a
    non-smooth primitive (relu, clamp, norm at zero) are skipped.  The error
    is |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
    the O(h^2) truncation of near-zero gradients (about 1e-8) from reading as a
    large relative error.
    """
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    loss = build(base)
    analytic = backward(loss)[name]
    signature = loss.tape.kink_signature()
    rng = np.random.default_rng(seed)
    flat_count = base[name].size
    order = rng.permutation(flat_count)

    def evaluate(idx, delta):
        trial = {k: v.copy() for k, v in base.items()}
        trial[name].flat[idx] += delta
        node = build(trial)
        return float(node.value), node.tape.kink_signature()

    errors = []
    for idx in order:
        if len(errors) >= max_entries:
            break
        f_plus, sig_plus = evaluate(idx, h)
        f_minus, sig_minus = evaluate(idx, -h)
        if not (_same_signature(signature, sig_plus) and _same_signature(signature, sig_minus)):
            continue
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic.flat[idx])
        errors.append(abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return np.asarray(errors)


def _same_signature(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(build, params, name, tolerance: float = 1e-4, **kwargs) -> bool:
    errors = finite_diff_errors(build, params, name, **kwargs)
    return bool(errors.size) and bool(np.all(errors <= tolerance))

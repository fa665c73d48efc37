"""Central moment discrepancy between embedding sets.

The moment sum is scaled by a scalar support span: the largest per-dimension
range (b - a) over the rows being compared, floored at ``epsilon_span``.  An
explicit ``support`` in :class:`CmdConfig` overrides the empirical range.
Inside differentiable losses the span is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dcgst import diffcore as dc
from dcgst.errors import DegenerateWeightError, ShapeError


@dataclass(frozen=True)
class CmdConfig:
    k_max: int = 5
    support: tuple | None = None
    epsilon_span: float = 1e-8

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")


DEFAULT_CMD = CmdConfig()


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, dc.Node) else np.asarray(x, dtype=np.float64)


def support_span(cfg: CmdConfig, *blocks: np.ndarray) -> float:
    if cfg.support is not None:
        a, b = (np.asarray(v, dtype=np.float64) for v in cfg.support)
        return max(float(np.max(b - a)), cfg.epsilon_span)
    rows = [blk for blk in blocks if blk.shape[0]]
    stacked = np.concatenate(rows, axis=0)
    return max(float(np.max(stacked.max(axis=0) - stacked.min(axis=0))), cfg.epsilon_span)


def _check_dims(*blocks: np.ndarray) -> int:
    dims = {blk.shape[1] for blk in blocks}
    if len(dims) != 1:
        raise ShapeError(f"embedding dimensions differ: {sorted(dims)}")
    return dims.pop()


def moments(z: np.ndarray, k_max: int, weights: np.ndarray | None = None) -> list[np.ndarray]:
    """Mean followed by central moments of order 2..k_max, per dimension."""
    if weights is None:
        weights = np.ones(z.shape[0])
    total = weights.sum()
    if total <= 0:
        raise DegenerateWeightError("total weight is zero")
    mean = weights @ z / total
    centered = z - mean
    out = [mean]
    for k in range(2, k_max + 1):
        out.append(weights @ centered ** k / total)
    return out


def cmd(p, q, cfg: CmdConfig = DEFAULT_CMD) -> float:
    p, q = _value(p), _value(q)
    _check_dims(p, q)
    if p.shape[0] < 1 or q.shape[0] < 1:
        raise ShapeError("cmd needs at least one row on each side")
    span = support_span(cfg, p, q)
    mp, mq = moments(p, cfg.k_max), moments(q, cfg.k_max)
    return float(sum(np.linalg.norm(a - b) / span ** (k + 1) for k, (a, b) in enumerate(zip(mp, mq))))


def _moment_nodes(z: dc.Node, w: dc.Node | None, k_max: int) -> list[dc.Node]:
    rows = z.shape[0]
    if w is None:
        mean = dc.mean_rows(z)
        out = [mean]
        centered = z - mean
        for k in range(2, k_max + 1):
            out.append(dc.mean_rows(dc.power(centered, k)))
        return out
    inv_total = dc.power(dc.sum_all(w), -1.0)
    mean = dc.mean_rows(dc.weighted_rows(w, z)) * float(rows) * inv_total
    out = [mean]
    centered = z - mean
    for k in range(2, k_max + 1):
        out.append(dc.mean_rows(dc.weighted_rows(w, dc.power(centered, k))) * float(rows) * inv_total)
    return out


def _as_node(tape: dc.Tape, x) -> dc.Node:
    return x if isinstance(x, dc.Node) else tape.const(x)


def _discrepancy(side_p: list, side_q: list, span: float) -> dc.Node:
    total = None
    for k, (a, b) in enumerate(zip(side_p, side_q)):
        term = dc.l2_norm(a - b) * (1.0 / span ** (k + 1))
        total = term if total is None else total + term
    return total


def cmd_node(p, q, cfg: CmdConfig = DEFAULT_CMD, tape: dc.Tape | None = None) -> dc.Node:
    """Differentiable CMD; either side may be a tape node or a constant array."""
    tape = tape or next(x.tape for x in (p, q) if isinstance(x, dc.Node))
    pv, qv = _value(p), _value(q)
    _check_dims(pv, qv)
    if pv.shape[0] < 1 or qv.shape[0] < 1:
        raise ShapeError("cmd needs at least one row on each side")
    span = support_span(cfg, pv, qv)
    p, q = _as_node(tape, p), _as_node(tape, q)
    return _discrepancy(_moment_nodes(p, None, cfg.k_max), _moment_nodes(q, None, cfg.k_max), span)


def cmd_weighted(p, q_fixed, q_cand, weights, cfg: CmdConfig = DEFAULT_CMD, tape: dc.Tape | None = None) -> dc.Node:
    """CMD between ``p`` and the weighted union of ``q_fixed`` (weight 1) and ``q_cand``.

    ``weights`` holds one value per candidate row.  With 0/1 weights this equals
    :func:`cmd` against the selected rows; rows with zero weight are also left
    out of the support span.
    """
    nodes = [x for x in (p, q_fixed, q_cand, weights) if isinstance(x, dc.Node)]
    tape = tape or (nodes[0].tape if nodes else dc.Tape())
    pv, fv, cv = _value(p), _value(q_fixed), _value(q_cand)
    wv = _value(weights).ravel()
    if fv.shape[0] == 0:
        fv = fv.reshape(0, cv.shape[1])
    _check_dims(pv, fv, cv)
    if wv.shape != (cv.shape[0],):
        raise ShapeError(f"{wv.shape[0]} weights for {cv.shape[0]} candidate rows")
    if fv.shape[0] + wv.sum() <= 0:
        raise DegenerateWeightError("fixed set empty and all candidate weights zero")
    span = support_span(cfg, pv, fv, cv[wv > 0])

    w = weights if isinstance(weights, dc.Node) else tape.const(wv)
    cand = _as_node(tape, q_cand)
    if fv.shape[0]:
        z = dc.concat_rows([_as_node(tape, q_fixed), cand])
        w = dc.concat_rows([tape.const(np.ones(fv.shape[0])), w])
    else:
        z = cand
    p_node = _as_node(tape, p)
    return _discrepancy(_moment_nodes(p_node, None, cfg.k_max), _moment_nodes(z, w, cfg.k_max), span)


def node_shift_scores(z_a, z_b, cfg: CmdConfig = DEFAULT_CMD) -> np.ndarray:
    """CMD of each row of ``z_a`` taken as a singleton set against all of ``z_b``."""
    z_a, z_b = _value(z_a), _value(z_b)
    _check_dims(z_a, z_b)
    mb = moments(z_b, cfg.k_max)
    if cfg.support is not None:
        span = np.full(z_a.shape[0], support_span(cfg))
    else:
        lo = np.minimum(z_a, z_b.min(axis=0))
        hi = np.maximum(z_a, z_b.max(axis=0))
        span = np.maximum((hi - lo).max(axis=1), cfg.epsilon_span)
    score = np.linalg.norm(z_a - mb[0], axis=1) / span
    for k in range(2, cfg.k_max + 1):
        score = score + np.linalg.norm(mb[k - 1]) / span ** k
    return score

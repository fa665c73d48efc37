"""Multi-stage teacher/student self-training and the baselines it is compared with.

Stage 0 is the pretrained teacher on the ground-truth labels alone.  Every later
stage trains the teacher (jointly with the edge predictor for ``dcgst``), picks
pseudo-labeled nodes, and grows the augmented label set C_A.  A student
initialized from the best teacher is trained on the original graph at the end.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from dcgst import diffcore as dc
from dcgst.edgepredictor import (
    EdgePredictor,
    edge_probabilities,
    ep_loss,
    feature_edit_pairs,
    frozen_gumbel,
    sample_variant,
    select_edit_candidates,
)
from dcgst.gcnmodel import GcnParams, accuracy, ce_loss, forward, init_params, predict
from dcgst.errors import RunAborted
from dcgst.graphdata import Graph, Split, normalized_adjacency
from dcgst.pseudoselect import (
    candidate_set,
    default_delta,
    ner_table,
    next_k,
    optimize_q,
    select_by_confidence,
    select_top,
)
from dcgst.shiftmetrics import CmdConfig, cmd, cmd_node

log = logging.getLogger(__name__)

# independent rng streams per purpose, so methods sharing a seed share the split and pretraining
_PRETRAIN, _EP_INIT, _STAGE, _EDIT_PAIRS, _STUDENT = range(1, 6)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


@dataclass
class TrainConfig:
    alpha: float = 8.0
    beta: float = 0.3
    gamma: float = 0.1
    lam: float = 0.5
    tau: float = 1.2
    lr: float = 0.01
    l2: float = 5e-4
    hidden: int = 64
    dropout: float = 0.5
    teacher_epochs: int = 200
    stage_epochs: int = 100
    ep_pretrain_epochs: int = 200
    ep_hidden: int = 64
    ep_out: int = 16
    student_epochs: int = 100
    q_steps: int = 300
    q_lr: float = 0.05
    max_stages: int = 20
    patience: int = 5
    seed: int = 0
    m: int | None = None
    e: int | None = None
    k_max: int = 5
    freeze_gumbel: bool = False
    gumbel_form: str = "gumbel"
    warm_start: bool = True
    selection_graph: str = "original"
    z_source: str = "logits"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta and gamma must be non-negative")
        if self.max_stages < 1:
            raise ValueError("max_stages must be >= 1")
        if self.selection_graph not in ("original", "variant"):
            raise ValueError(f"selection_graph must be 'original' or 'variant', got {self.selection_graph!r}")

    @property
    def cmd_cfg(self) -> CmdConfig:
        return CmdConfig(k_max=self.k_max)

    def budgets(self, g: Graph) -> tuple[int, int]:
        m = self.m if self.m is not None else min(100, g.n // 4)
        e = self.e if self.e is not None else min(1000, 4 * g.num_edges)
        return m, e


@dataclass
class StageReport:
    stage: int
    cmd: float
    acc_train: float
    acc_val: float
    acc_test: float
    aug_size: int
    loss: float
    seconds: float


@dataclass
class RunResult:
    reports: list[StageReport]
    best_stage: int
    test_accuracy: float
    test_nodes: np.ndarray
    predictions: np.ndarray
    augmented_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    augmented_labels: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))


class StoppingRule:
    """Stop once the tracked value fails to beat its running best ``patience`` times in a row."""

    def __init__(self, patience: int, mode: str = "min"):
        self.patience = patience
        self.mode = mode
        self.best = None
        self.stale = 0

    def update(self, value: float) -> bool:
        better = self.best is None or (value < self.best if self.mode == "min" else value > self.best)
        if better:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


class _Context:
    """Per-run immutable graph quantities."""

    def __init__(self, g: Graph, split: Split):
        self.g = g
        self.split = split
        self.adj_norm = normalized_adjacency(g)
        self.x = g.features


def _fit(params: GcnParams, ctx: _Context, labels: np.ndarray, nodes: np.ndarray, epochs: int,
         cfg: TrainConfig, rng: np.random.Generator, track_best: bool) -> GcnParams:
    """Plain CE training on the original graph, optionally keeping the best-validation weights."""
    opt = dc.Adam(lr=cfg.lr, l2=cfg.l2)
    named = params.named()
    best, best_acc = params.copy(), -1.0
    val = ctx.split.validation
    for _ in range(epochs):
        res = forward(params, ctx.adj_norm, ctx.x, train_mode=True, rng=rng)
        opt.step(named, dc.backward(ce_loss(res, labels, nodes)))
        if track_best and val.size:
            acc = accuracy(predict(params, ctx.adj_norm, ctx.x), ctx.g.labels, val)
            if acc >= best_acc:
                best, best_acc = params.copy(), acc
    if track_best and val.size and epochs:
        return best
    return params


def pretrain(g: Graph, split: Split, cfg: TrainConfig, ctx: _Context | None = None) -> GcnParams:
    """Teacher trained on the labeled nodes only; best-validation checkpoint retained."""
    ctx = ctx or _Context(g, split)
    rng = _rng(cfg.seed, _PRETRAIN)
    params = init_params(g.features.shape[1], cfg.hidden, g.class_count, rng, cfg.dropout)
    return _fit(params, ctx, g.labels, split.labeled, cfg.teacher_epochs, cfg, rng, track_best=True)


def pretrain_edge_predictor(ep: EdgePredictor, ctx: _Context, cfg: TrainConfig, rng: np.random.Generator) -> None:
    opt = dc.Adam(lr=cfg.lr, l2=cfg.l2)
    named = ep.params.named("ep.")
    for _ in range(cfg.ep_pretrain_epochs):
        res = forward(ep.params, ctx.adj_norm, ctx.x, train_mode=True, rng=rng, prefix="ep.")
        loss = ep_loss(edge_probabilities(res.logits, ep.bce_pairs), ep.bce_targets)
        opt.step(named, dc.backward(loss))


@dataclass
class _StageState:
    teacher: GcnParams
    ep: EdgePredictor | None
    opt: dc.Adam
    edit_pairs: np.ndarray | None = None
    variant: object | None = None


def train_stage(state: _StageState, ctx: _Context, labels: np.ndarray, ca_nodes: np.ndarray,
                cfg: TrainConfig, rng: np.random.Generator, use_ep: bool = True) -> float:
    """One stage of joint teacher / edge-predictor training; returns the last epoch's loss.

    With ``use_ep`` the teacher sees a freshly sampled graph variant every epoch
    and the loss is CE + beta * (BCE + alpha * CMD(Z_U, Z_CA)).
    """
    g, test = ctx.g, ctx.split.test
    teacher, ep = state.teacher, state.ep
    named = teacher.named("t.")
    if use_ep:
        named.update(ep.params.named("ep."))
    m, e = cfg.budgets(g)
    noise = frozen_gumbel(0.0) if cfg.freeze_gumbel else None
    loss_value = float("nan")
    for _ in range(cfg.stage_epochs):
        tape = dc.Tape()
        if use_ep:
            z_eval = predict(teacher, ctx.adj_norm, ctx.x)
            cands = select_edit_candidates(g, z_eval[ca_nodes], z_eval[test], ca_nodes, test, m, e,
                                           cfg=cfg.cmd_cfg, pair_set=state.edit_pairs)
            pairs = cands.pairs(g.n)
            t_res = forward(ep.params, ctx.adj_norm, ctx.x, train_mode=True, rng=rng, tape=tape, prefix="ep.")
            variant = sample_variant(edge_probabilities(t_res.logits, pairs), g.adjacency, pairs, cfg.tau,
                                     noise=noise, rng=rng, form=cfg.gumbel_form)
            adj = state.variant = variant
        else:
            adj = ctx.adj_norm
        res = forward(teacher, adj, ctx.x, train_mode=True, rng=rng, tape=tape, prefix="t.",
                      z_source=cfg.z_source)
        loss = ce_loss(res, labels, ca_nodes)
        if use_ep and cfg.beta > 0:
            m_bce = edge_probabilities(t_res.logits, ep.bce_pairs)
            z_u = dc.gather_rows(res.z, test)
            z_ca = dc.gather_rows(res.z, ca_nodes)
            loss = loss + ep_loss(m_bce, ep.bce_targets, z_u, z_ca, cfg.alpha, cfg.cmd_cfg) * cfg.beta
        state.opt.step(named, dc.backward(loss))
        loss_value = float(loss.value)
    return loss_value


def _embeddings(params: GcnParams, ctx: _Context, cfg: TrainConfig, adj=None) -> tuple[np.ndarray, np.ndarray]:
    res = forward(params, ctx.adj_norm if adj is None else adj, ctx.x, z_source=cfg.z_source)
    return res.logits.value, res.z.value


def _report(stage, params, ctx, cfg, labels, ca_nodes, loss, started, timing=True) -> StageReport:
    logits, z = _embeddings(params, ctx, cfg)
    split = ctx.split
    return StageReport(
        stage=stage,
        cmd=cmd(z[split.test], z[ca_nodes], cfg.cmd_cfg),
        acc_train=accuracy(logits, labels, ca_nodes),
        acc_val=accuracy(logits, ctx.g.labels, split.validation) if split.validation.size else float("nan"),
        acc_test=accuracy(logits, ctx.g.labels, split.test),
        aug_size=int(ca_nodes.size),
        loss=loss,
        seconds=time.perf_counter() - started,
    )


def train_student(teacher: GcnParams, g: Graph, split: Split, labels: np.ndarray, ca_nodes: np.ndarray,
                  cfg: TrainConfig, ctx: _Context | None = None) -> tuple[GcnParams, np.ndarray]:
    """Student initialized from ``teacher``, fit on the original graph; returns predictions on the test set."""
    ctx = ctx or _Context(g, split)
    student = teacher.copy()
    student = _fit(student, ctx, labels, ca_nodes, cfg.student_epochs, cfg, _rng(cfg.seed, _STUDENT),
                   track_best=False)
    pred = np.argmax(predict(student, ctx.adj_norm, ctx.x)[split.test], axis=1)
    return student, pred


def _run(g: Graph, split: Split, cfg: TrainConfig, method: str) -> RunResult:
    reports: list[StageReport] = []
    try:
        return _run_stages(g, split, cfg, method, reports)
    except Exception as exc:
        raise RunAborted(f"{method} run failed after {len(reports)} stage reports: {exc}", reports) from exc


def _run_stages(g: Graph, split: Split, cfg: TrainConfig, method: str, reports: list[StageReport]) -> RunResult:
    ctx = _Context(g, split)
    started = time.perf_counter()
    teacher = pretrain(g, split, cfg, ctx)
    labels = np.full(g.n, -1, dtype=np.int64)
    labels[split.labeled] = g.labels[split.labeled]
    ca_nodes = np.sort(split.labeled)
    reports.append(_report(0, teacher, ctx, cfg, labels, ca_nodes, float("nan"), started))
    best_stage, best_val, best_teacher = 0, reports[0].acc_val, teacher.copy()

    if method == "gcn":
        pred = np.argmax(predict(teacher, ctx.adj_norm, ctx.x)[split.test], axis=1)
        return RunResult(reports, 0, float(np.mean(pred == g.labels[split.test])), split.test, pred,
                         ca_nodes, labels[ca_nodes])

    use_ep = method == "dcgst"
    state = _StageState(teacher=teacher, ep=None, opt=dc.Adam(lr=cfg.lr, l2=cfg.l2))
    stage_rng = _rng(cfg.seed, _STAGE)
    if use_ep:
        ep_rng = _rng(cfg.seed, _EP_INIT)
        state.ep = EdgePredictor.create(g, cfg.ep_hidden, ep_rng, cfg.dropout, cfg.ep_out)
        pretrain_edge_predictor(state.ep, ctx, cfg, ep_rng)
        _, e = cfg.budgets(g)
        state.edit_pairs = feature_edit_pairs(g, e, _rng(cfg.seed, _EDIT_PAIRS))

    counts = np.bincount(g.labels[split.labeled], minlength=g.class_count)
    k = max(1, int(round(counts.mean())))
    stopper = StoppingRule(cfg.patience, "min" if use_ep else "max")
    pool_mask = np.zeros(g.n, dtype=bool)
    pool_mask[split.test] = True

    for stage in range(1, cfg.max_stages + 1):
        stage_start = time.perf_counter()
        if not cfg.warm_start:
            state.teacher = init_params(g.features.shape[1], cfg.hidden, g.class_count,
                                        _rng(cfg.seed, 100 + stage), cfg.dropout)
            state.opt = dc.Adam(lr=cfg.lr, l2=cfg.l2)
        loss = train_stage(state, ctx, labels, ca_nodes, cfg, stage_rng, use_ep=use_ep)

        select_adj = None
        if cfg.selection_graph == "variant" and state.variant is not None:
            select_adj = normalized_adjacency(state.variant.matrix())
        logits, z = _embeddings(state.teacher, ctx, cfg, select_adj)
        conf = np.exp(logits - logits.max(axis=1, keepdims=True))
        conf /= conf.sum(axis=1, keepdims=True)
        pool = np.flatnonzero(pool_mask & (labels < 0))
        if pool.size:
            cands = candidate_set(conf, pool, k, cfg.lam)
            delta = default_delta(k)
            if use_ep:
                ner = ner_table(logits, g.adjacency, ctx.adj_norm, cands.nodes) if cfg.gamma else np.zeros(len(cands))
                q = optimize_q(z[split.test], z[ca_nodes], z[cands.nodes], ner, cfg.gamma, delta,
                               steps=cfg.q_steps, lr=cfg.q_lr, cfg=cfg.cmd_cfg)
                chosen, chosen_labels = select_top(q, cands, delta)
            else:
                chosen, chosen_labels = select_by_confidence(cands, delta)
            labels[chosen] = chosen_labels
            ca_nodes = np.sort(np.concatenate([ca_nodes, chosen]))
        k = next_k(k, cfg.lam)

        rep = _report(stage, state.teacher, ctx, cfg, labels, ca_nodes, loss, stage_start)
        reports.append(rep)
        log.info("stage %d: cmd=%.4f val=%.3f test=%.3f |C_A|=%d", stage, rep.cmd, rep.acc_val,
                 rep.acc_test, rep.aug_size)
        if rep.acc_val >= best_val:
            best_stage, best_val, best_teacher = stage, rep.acc_val, state.teacher.copy()
        if stopper.update(rep.cmd if use_ep else rep.acc_val):
            break

    _, pred = train_student(best_teacher, g, split, labels, ca_nodes, cfg, ctx)
    acc = float(np.mean(pred == g.labels[split.test]))
    return RunResult(reports, best_stage, acc, split.test, pred, ca_nodes, labels[ca_nodes])


def run_self_training(g: Graph, split: Split, cfg: TrainConfig) -> RunResult:
    return _run(g, split, cfg, "dcgst")


def st_baseline(g: Graph, split: Split, cfg: TrainConfig) -> RunResult:
    """Confidence-only self-training on the original graph, stopped on a validation plateau."""
    # alpha/beta/gamma play no role; zero them so the baseline cannot depend on them
    return _run(g, split, replace(cfg, alpha=0.0, beta=0.0, gamma=0.0), "st")


def gcn_baseline(g: Graph, split: Split, cfg: TrainConfig) -> RunResult:
    return _run(g, split, cfg, "gcn")


METHODS = {"gcn": gcn_baseline, "st": st_baseline, "dcgst": run_self_training}

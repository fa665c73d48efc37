"""Graph container, text-format ingestion, and derived graph quantities.

Dataset directory layout::

    edges.tsv     one "u<TAB>v" per line, 0-based ids; an undirected edge may
                  appear once or in both directions
    features.csv  comma-separated decimals, row i belongs to node i
    labels.csv    one integer class id per line
    splits.json   optional {"labeled": [...], "validation": [...], "test": [...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from dcgst.errors import IngestError, SplitError

VALIDATION_RATE = 0.005
PPR_TELEPORT = 0.15
PPR_ITERS = 50


def round_half_up(x: float) -> int:
    # guard against 0.5 landing a hair below due to float products
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class Graph:
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        n = self.features.shape[0]
        if self.adjacency.shape != (n, n):
            raise IngestError(f"adjacency shape {self.adjacency.shape} does not match {n} nodes")
        if self.labels.shape != (n,):
            raise IngestError(f"expected {n} labels, got {self.labels.shape[0]}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise IngestError(f"labels must lie in [0, {self.class_count})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.adjacency.nnz // 2

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with u < v, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v]:a.indptr[v + 1]]


def adjacency_from_edges(n: int, edges: np.ndarray) -> sp.csr_matrix:
    """Symmetrized, deduplicated, loop-free binary adjacency."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    keep = edges[:, 0] != edges[:, 1]
    u, v = edges[keep, 0], edges[keep, 1]
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    return a


@dataclass
class Split:
    labeled: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    labels_per_class: dict[int, int] = field(default_factory=dict)

    def check(self, n: int) -> None:
        sets = [set(self.labeled.tolist()), set(self.validation.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise SplitError("labeled, validation and test sets overlap")
        for s in sets:
            if s and (min(s) < 0 or max(s) >= n):
                raise SplitError("split index out of range")

    def to_json(self) -> dict:
        return {
            "labeled": self.labeled.tolist(),
            "validation": self.validation.tolist(),
            "test": self.test.tolist(),
        }


def _count_per_class(labels: np.ndarray, nodes: np.ndarray, class_count: int) -> dict[int, int]:
    counts = np.bincount(labels[nodes], minlength=class_count) if nodes.size else np.zeros(class_count, int)
    return {c: int(counts[c]) for c in range(class_count)}


def load_graph(dataset_dir: str | Path, class_count: int | None = None) -> Graph:
    root = Path(dataset_dir)
    paths = {name: root / name for name in ("edges.tsv", "features.csv", "labels.csv")}
    for name, path in paths.items():
        if not path.is_file():
            raise IngestError(f"missing {name} in {root}")

    try:
        features = np.loadtxt(paths["features.csv"], delimiter=",", ndmin=2, dtype=np.float64)
        labels = np.loadtxt(paths["labels.csv"], dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise IngestError(str(exc)) from exc
    n = features.shape[0]
    if labels.shape[0] != n:
        raise IngestError(f"labels.csv has {labels.shape[0]} rows, features.csv has {n}")

    edges = []
    with paths["edges.tsv"].open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise IngestError(f"edges.tsv line {lineno}: expected two tab-separated ids")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise IngestError(f"edges.tsv line {lineno}: {exc}") from exc
            if not (0 <= u < n and 0 <= v < n):
                raise IngestError(f"edges.tsv line {lineno}: node id out of range [0, {n})")
            edges.append((u, v))

    if n and labels.min() < 0:
        raise IngestError("negative label")
    if class_count is None:
        class_count = int(labels.max()) + 1 if n else 0
    elif n and labels.max() >= class_count:
        raise IngestError(f"label {labels.max()} >= class count {class_count}")

    adjacency = adjacency_from_edges(n, np.array(edges, dtype=np.int64).reshape(-1, 2))
    return Graph(adjacency=adjacency, features=features, labels=labels, class_count=class_count)


def save_graph(g: Graph, dataset_dir: str | Path) -> None:
    root = Path(dataset_dir)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "edges.tsv").open("w") as fh:
        for u, v in g.edge_list():
            fh.write(f"{u}\t{v}\n")
    np.savetxt(root / "features.csv", g.features, delimiter=",", fmt="%.17g")
    np.savetxt(root / "labels.csv", g.labels, fmt="%d")


def load_split_override(dataset_dir: str | Path, g: Graph) -> Split | None:
    path = Path(dataset_dir) / "splits.json"
    if not path.is_file():
        return None
    raw = json.loads(path.read_text())
    try:
        parts = [np.asarray(raw[k], dtype=np.int64) for k in ("labeled", "validation", "test")]
    except KeyError as exc:
        raise IngestError(f"splits.json missing key {exc}") from exc
    split = Split(*parts, labels_per_class=_count_per_class(g.labels, parts[0], g.class_count))
    split.check(g.n)
    return split


def normalized_adjacency(g_or_adj) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = g_or_adj.adjacency if isinstance(g_or_adj, Graph) else g_or_adj
    n = a.shape[0]
    a_hat = (a + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    out = (d_inv_sqrt @ a_hat @ d_inv_sqrt).tocsr()
    out.sort_indices()
    return out


def feature_cosine(g: Graph, pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    x = g.features
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    xn = x / safe[:, None]
    sim = np.einsum("ij,ij->i", xn[pairs[:, 0]], xn[pairs[:, 1]])
    zero = (norms[pairs[:, 0]] == 0) | (norms[pairs[:, 1]] == 0)
    sim[zero] = 0.0
    return np.clip(sim, -1.0, 1.0)


def ppr_scores(g_or_adj, seed: int, teleport: float = PPR_TELEPORT, iters: int = PPR_ITERS) -> np.ndarray:
    """Personalized PageRank by power iteration on the lazy walk over A + I."""
    if not 0.0 < teleport <= 1.0:
        raise ValueError("teleport must lie in (0, 1]")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    a = g_or_adj.adjacency if isinstance(g_or_adj, Graph) else g_or_adj
    n = a.shape[0]
    a_hat = (a + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    walk_t = (sp.diags(1.0 / deg) @ a_hat).T.tocsr()
    e = np.zeros(n)
    e[seed] = 1.0
    pi = e.copy()
    for _ in range(iters):
        pi = teleport * e + (1.0 - teleport) * (walk_t @ pi)
    return pi


def _class_quotas(budget: int, class_count: int) -> np.ndarray:
    quotas = np.full(class_count, budget // class_count, dtype=np.int64)
    quotas[: budget % class_count] += 1
    return quotas


def _random_labeled(g: Graph, quotas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    picked = []
    for c in range(g.class_count):
        members = np.flatnonzero(g.labels == c)
        if members.size == 0:
            raise SplitError(f"class {c} has no nodes")
        take = min(int(quotas[c]), members.size)
        picked.append(rng.choice(members, size=take, replace=False))
    return np.sort(np.concatenate(picked)) if picked else np.empty(0, np.int64)


def _ppr_biased_labeled(g: Graph, quotas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    for c in range(g.class_count):
        if quotas[c] and not np.any(g.labels == c):
            raise SplitError(f"class {c} has no nodes")
    remaining = quotas.copy()
    chosen: list[int] = []
    taken = np.zeros(g.n, dtype=bool)
    for _ in range(10 * max(g.n, 1)):
        if not remaining.any():
            break
        seed = int(rng.integers(g.n))
        scores = ppr_scores(g, seed)
        order = np.lexsort((np.arange(g.n), -scores))
        for v in order:
            if scores[v] <= 0.0:
                break
            c = g.labels[v]
            if not taken[v] and remaining[c] > 0:
                taken[v] = True
                remaining[c] -= 1
                chosen.append(int(v))
                if not remaining.any():
                    break
    if remaining.any():
        raise SplitError("could not fill per-class quotas from PPR neighborhoods")
    return np.array(chosen, dtype=np.int64)


def make_split(g: Graph, label_rate: float, mode: str = "random", seed: int = 0) -> Split:
    """Labeled/validation/test split with balanced per-class label quotas.

    ``mode="ppr_bias"`` concentrates the labeled nodes in the personalized
    PageRank neighborhood of randomly drawn seed nodes.
    """
    n, c = g.n, g.class_count
    if label_rate * n < c:
        raise SplitError(f"label rate {label_rate} gives fewer than one label per class")
    if label_rate + VALIDATION_RATE >= 1.0:
        raise SplitError("label rate leaves no test nodes")
    rng = np.random.default_rng(seed)
    quotas = _class_quotas(round_half_up(label_rate * n), c)
    if mode == "random":
        labeled = _random_labeled(g, quotas, rng)
    elif mode in ("ppr_bias", "ppr"):
        labeled = _ppr_biased_labeled(g, quotas, rng)
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    rest = np.setdiff1d(np.arange(n), labeled)
    n_val = min(round_half_up(VALIDATION_RATE * n), rest.size)
    validation = np.sort(rng.choice(rest, size=n_val, replace=False)) if n_val else np.empty(0, np.int64)
    test = np.setdiff1d(rest, validation)
    split = Split(
        labeled=labeled,
        validation=validation,
        test=test,
        labels_per_class=_count_per_class(g.labels, labeled, c),
    )
    split.check(n)
    return split

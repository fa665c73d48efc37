"""Stochastic block model graphs with bag-of-words style features.

Stand-in for citation benchmarks when no export is at hand: blocks are the
classes, a ``homophily`` fraction of edges fall inside a block, and each node
carries a sparse word vector (row-normalized) where a ``signal`` fraction of
its words come from a class-specific topic and the rest from the whole vocabulary.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from dcgst.graphdata import Graph, adjacency_from_edges, save_graph


def _sample_pairs(rng, count, draw):
    found: dict[tuple[int, int], None] = {}
    while len(found) < count:
        u, v = draw(count - len(found))
        for a, b in zip(u.tolist(), v.tolist()):
            if a != b and len(found) < count:
                found[(min(a, b), max(a, b))] = None
    return list(found)


def make_sbm(
    n: int = 1000,
    blocks: int = 2,
    homophily: float = 0.9,
    avg_degree: float = 4.0,
    feature_dim: int = 500,
    words_per_node: int = 20,
    topic_size: int = 50,
    signal: float = 0.05,
    seed: int = 0,
) -> Graph:
    rng = np.random.default_rng(seed)
    labels = np.sort(np.arange(n) % blocks)
    members = [np.flatnonzero(labels == b) for b in range(blocks)]
    n_edges = int(round(n * avg_degree / 2))
    n_intra = int(round(homophily * n_edges))

    def intra(k):
        b = rng.integers(blocks, size=k)
        sizes = np.array([members[i].size for i in b])
        u = np.array([members[i][j] for i, j in zip(b, (rng.random(k) * sizes).astype(int))])
        v = np.array([members[i][j] for i, j in zip(b, (rng.random(k) * sizes).astype(int))])
        return u, v

    def inter(k):
        u = rng.integers(n, size=k)
        v = rng.integers(n, size=k)
        keep = labels[u] != labels[v]
        return u[keep], v[keep]

    edges = _sample_pairs(rng, n_intra, intra) + _sample_pairs(rng, n_edges - n_intra, inter)
    adjacency = adjacency_from_edges(n, np.array(edges))

    topics = [rng.choice(feature_dim, size=topic_size, replace=False) for _ in range(blocks)]
    features = np.zeros((n, feature_dim))
    for i in range(n):
        from_topic = rng.random(words_per_node) < signal
        words = np.where(
            from_topic,
            topics[labels[i]][rng.integers(topic_size, size=words_per_node)],
            rng.integers(feature_dim, size=words_per_node),
        )
        features[i, words] = 1.0
    # row-normalized, as citation exports are conventionally preprocessed for GCNs
    features /= features.sum(axis=1, keepdims=True)
    return Graph(adjacency=adjacency, features=features, labels=labels.astype(np.int64), class_count=blocks)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dcgst-sbm", description="Write a synthetic SBM dataset directory.")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--n", type=int, default=1000)
    parser.add_argument("--blocks", type=int, default=2)
    parser.add_argument("--homophily", type=float, default=0.9)
    parser.add_argument("--avg-degree", type=float, default=4.0)
    parser.add_argument("--feature-dim", type=int, default=500)
    parser.add_argument("--signal", type=float, default=0.05)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    g = make_sbm(args.n, args.blocks, args.homophily, args.avg_degree, args.feature_dim,
                 signal=args.signal, seed=args.seed)
    save_graph(g, args.out_dir)
    print(f"wrote {g.n} nodes, {g.num_edges} edges to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

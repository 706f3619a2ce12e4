"""Inductive graph embedding: rounds of sampled-neighbor max-pool
aggregation followed by a concat + fully-connected update, producing
per-node embeddings (rows in topological order) and a mean-pooled graph
embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import ComputationGraph
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class EmbedConfig:
    gs_layers: int = 4
    gs_dim: int = 128
    gs_knn: int = 5


@dataclass
class Embeddings:
    node_embed: Tensor  # N x gs_dim, topo order
    graph_embed: Tensor  # 1 x gs_dim


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-s, s, size=shape)


def init_embed_params(store: ParamStore, feature_dim: int, cfg: EmbedConfig,
                      rng: np.random.Generator, prefix: str = "embed/"):
    d = cfg.gs_dim
    store.add(prefix + "in_w", _uniform(rng, (feature_dim, d), feature_dim))
    store.add(prefix + "in_b", np.zeros(d))
    for l in range(cfg.gs_layers):
        store.add(f"{prefix}agg_w{l}", _uniform(rng, (d, d), d))
        store.add(f"{prefix}agg_b{l}", np.zeros(d))
        store.add(f"{prefix}fc_w{l}", _uniform(rng, (2 * d, d), 2 * d))
        store.add(f"{prefix}fc_b{l}", np.zeros(d))


def sample_neighbors(graph: ComputationGraph, node: int, k: int, seed: int) -> list[int]:
    """Up to k members of the undirected neighborhood of `node`. When the
    neighborhood exceeds k, a uniform sample without replacement is drawn,
    deterministic in (seed, node id)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    nbrs = graph.neighbors(node)
    if len(nbrs) <= k:
        return nbrs
    rng = np.random.default_rng([seed, node])
    pick = rng.choice(len(nbrs), size=k, replace=False)
    return sorted(nbrs[i] for i in pick)


def _neighbor_arrays(graph: ComputationGraph, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (neighbor row, segment row) index pairs in topo-row space."""
    order = graph.topo_order()
    pos = {v: i for i, v in enumerate(order)}
    gather, segments = [], []
    for row, v in enumerate(order):
        for u in sample_neighbors(graph, v, k, seed):
            gather.append(pos[u])
            segments.append(row)
    return np.array(gather, dtype=np.int64), np.array(segments, dtype=np.int64)


def embed(graph: ComputationGraph, features, store: ParamStore, cfg: EmbedConfig,
          seed: int = 0, prefix: str = "embed/") -> Embeddings:
    """Embed the graph given its feature matrix (rows in topo order).

    Per layer: every node transforms through an affine + sigmoid, neighbors
    max-pool into an aggregate (zero vector for empty neighborhoods), and
    concat(self, aggregate) passes through the layer's FC with relu.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    n = graph.num_nodes
    if feats.data.shape[0] != n:
        raise ValueError(f"feature rows {feats.data.shape[0]} != N {n}")
    gather, segments = _neighbor_arrays(graph, cfg.gs_knn, seed)
    h = T.affine(feats, store[prefix + "in_w"], store[prefix + "in_b"])
    for l in range(cfg.gs_layers):
        transformed = T.sigmoid(T.affine(h, store[f"{prefix}agg_w{l}"],
                                         store[f"{prefix}agg_b{l}"]))
        if len(gather):
            pooled = T.segment_max(T.gather_rows(transformed, gather), segments, n)
        else:
            pooled = Tensor(np.zeros((n, cfg.gs_dim)))
        h = T.relu(T.affine(T.concat([h, pooled], axis=1),
                            store[f"{prefix}fc_w{l}"], store[f"{prefix}fc_b{l}"]))
    if not np.isfinite(h.data).all():
        raise FloatingPointError("non-finite node embeddings (bad init or features)")
    return Embeddings(node_embed=h, graph_embed=T.mean_rows(h))

"""Decision network: segment-recurrent multi-head attention over node
embeddings (no positional encoding), graph-conditioned feature modulation,
chained per-task recurrent attention heads with a value head, and the
iterative whole-graph action generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embedding import EmbedConfig, embed, init_embed_params
from .graph import ComputationGraph, feature_dim, node_features
from .tensor import ParamStore, Tensor

TASK_ORDER = ("placement", "schedule_priority", "fusion_priority")


@dataclass(frozen=True)
class PolicyConfig:
    trf_layers: int = 4
    d_model: int = 128
    n_head: int = 3
    d_head: int = 15
    d_inner: int = 512
    segment_len: int = 64
    iterations: int = 2  # decision refinement rounds; each sees the previous round's actions

    @property
    def attn_width(self) -> int:
        return self.n_head * self.d_head


def ordered_tasks(task_sizes: dict[str, int]) -> list[tuple[str, int]]:
    """Canonical (placement, schedule, fusion) ordering of the given tasks."""
    unknown = set(task_sizes) - set(TASK_ORDER)
    if unknown:
        raise ValueError(f"unknown tasks: {sorted(unknown)}")
    return [(t, task_sizes[t]) for t in TASK_ORDER if t in task_sizes]


def _uniform(rng, shape, fan_in):
    s = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-s, s, size=shape)


def _init_attn(store, prefix, d_model, width, rng):
    for name in ("q", "k", "v"):
        store.add(f"{prefix}{name}_w", _uniform(rng, (d_model, width), d_model))
        store.add(f"{prefix}{name}_b", np.zeros(width))
    store.add(f"{prefix}o_w", _uniform(rng, (width, d_model), width))
    store.add(f"{prefix}o_b", np.zeros(d_model))


def _init_block(store, prefix, cfg, rng):
    _init_attn(store, prefix + "attn_", cfg.d_model, cfg.attn_width, rng)
    store.add(prefix + "ln1_g", np.ones(cfg.d_model))
    store.add(prefix + "ln1_b", np.zeros(cfg.d_model))
    store.add(prefix + "ff_w1", _uniform(rng, (cfg.d_model, cfg.d_inner), cfg.d_model))
    store.add(prefix + "ff_b1", np.zeros(cfg.d_inner))
    store.add(prefix + "ff_w2", _uniform(rng, (cfg.d_inner, cfg.d_model), cfg.d_inner))
    store.add(prefix + "ff_b2", np.zeros(cfg.d_model))
    store.add(prefix + "ln2_g", np.ones(cfg.d_model))
    store.add(prefix + "ln2_b", np.zeros(cfg.d_model))


def init_policy_params(store: ParamStore, cfg: PolicyConfig, gs_dim: int,
                       task_sizes: dict[str, int], rng: np.random.Generator,
                       prefix: str = "policy/"):
    """Create all decision-network parameters. Output projections and the
    value head start at zero so the initial policy is uniform per node."""
    d = cfg.d_model
    store.add(prefix + "in_w", _uniform(rng, (gs_dim, d), gs_dim))
    store.add(prefix + "in_b", np.zeros(d))
    for l in range(cfg.trf_layers):
        _init_block(store, f"{prefix}block{l}/", cfg, rng)
    _init_block(store, prefix + "mod/", cfg, rng)
    _init_attn(store, prefix + "task_attn/", d, cfg.attn_width, rng)
    for task, a in ordered_tasks(task_sizes):
        p = f"{prefix}task/{task}/"
        store.add(p + "cat_w", _uniform(rng, (2 * d, d), 2 * d))
        store.add(p + "cat_b", np.zeros(d))
        store.add(p + "ln_g", np.ones(d))
        store.add(p + "ln_b", np.zeros(d))
        store.add(p + "fc_w1", _uniform(rng, (d, cfg.d_inner), d))
        store.add(p + "fc_b1", np.zeros(cfg.d_inner))
        store.add(p + "fc_w2", _uniform(rng, (cfg.d_inner, d), cfg.d_inner))
        store.add(p + "fc_b2", np.zeros(d))
        store.add(p + "out_w", np.zeros((d, a)))
        store.add(p + "out_b", np.zeros(a))
    store.add(prefix + "value_w", np.zeros((d, 1)))
    store.add(prefix + "value_b", np.zeros(1))


def multi_head_attention(store: ParamStore, prefix: str, cfg: PolicyConfig,
                         x_q: Tensor, x_kv: Tensor) -> Tensor:
    q = T.affine(x_q, store[prefix + "q_w"], store[prefix + "q_b"])
    k = T.affine(x_kv, store[prefix + "k_w"], store[prefix + "k_b"])
    v = T.affine(x_kv, store[prefix + "v_w"], store[prefix + "v_b"])
    heads = []
    for i in range(cfg.n_head):
        lo, hi = i * cfg.d_head, (i + 1) * cfg.d_head
        heads.append(T.scaled_dot_attention(
            T.slice_axis(q, 1, lo, hi), T.slice_axis(k, 1, lo, hi),
            T.slice_axis(v, 1, lo, hi)))
    cat = T.concat(heads, axis=1) if len(heads) > 1 else heads[0]
    return T.affine(cat, store[prefix + "o_w"], store[prefix + "o_b"])


def transformer_block(store: ParamStore, prefix: str, cfg: PolicyConfig,
                      x: Tensor, kv: Tensor | None = None) -> Tensor:
    """Post-LN block; queries from x, keys/values from kv (defaults to x)."""
    attn = multi_head_attention(store, prefix + "attn_", cfg, x, kv if kv is not None else x)
    h = T.layer_norm(T.add(x, attn), store[prefix + "ln1_g"], store[prefix + "ln1_b"])
    ff = T.affine(T.relu(T.affine(h, store[prefix + "ff_w1"], store[prefix + "ff_b1"])),
                  store[prefix + "ff_w2"], store[prefix + "ff_b2"])
    return T.layer_norm(T.add(h, ff), store[prefix + "ln2_g"], store[prefix + "ln2_b"])


def modulation_gate(x: Tensor) -> Tensor:
    """2 * sigmoid, so a zero pre-activation yields the identity (all-ones)."""
    return T.scale(T.sigmoid(x), 2.0)


def modulate(graph_embed: Tensor, store: ParamStore, cfg: PolicyConfig,
             prefix: str = "policy/") -> Tensor:
    """Graph-conditioned modulation vector (1 x d_model): the extra
    transformer layer applied to the graph embedding as a length-1 sequence."""
    g = T.affine(graph_embed, store[prefix + "in_w"], store[prefix + "in_b"])
    return modulation_gate(transformer_block(store, prefix + "mod/", cfg, g))


def trunk_forward(node_embed: Tensor, graph_embed: Tensor, store: ParamStore,
                  cfg: PolicyConfig, prefix: str = "policy/",
                  modulation_override=None, cache_perturb=None) -> Tensor:
    """Shared trunk over the node sequence in topological order.

    Nodes are processed in consecutive segments; each layer attends over
    [previous segment's cached hidden state || current segment] with no
    positional encoding. Cached states are gradient-stopped. Every layer
    input is re-weighted by the modulation vector before the block.

    `modulation_override` replaces the computed modulation (array or Tensor);
    `cache_perturb(segment_index, layer, array) -> array` is a diagnostics
    hook applied to cached states before reuse.
    """
    n = node_embed.data.shape[0]
    if modulation_override is None:
        mod = modulate(graph_embed, store, cfg, prefix)
    elif isinstance(modulation_override, Tensor):
        mod = modulation_override
    else:
        mod = Tensor(np.asarray(modulation_override, dtype=np.float64).reshape(1, -1))
    x = T.affine(node_embed, store[prefix + "in_w"], store[prefix + "in_b"])
    s = cfg.segment_len
    bounds = [(lo, min(n, lo + s)) for lo in range(0, n, s)]
    cache: list[np.ndarray | None] = [None] * cfg.trf_layers
    outputs = []
    for seg_index, (lo, hi) in enumerate(bounds):
        xs = T.slice_axis(x, 0, lo, hi) if len(bounds) > 1 else x
        new_cache: list[np.ndarray | None] = [None] * cfg.trf_layers
        for l in range(cfg.trf_layers):
            xm = T.mul(xs, mod)
            new_cache[l] = xm.data.copy()
            if cache[l] is None:
                kv = xm
            else:
                prev = cache[l]
                if cache_perturb is not None:
                    prev = cache_perturb(seg_index, l, prev)
                kv = T.concat([Tensor(prev), xm], axis=0)
            xs = transformer_block(store, f"{prefix}block{l}/", cfg, xm, kv)
        cache = new_cache
        outputs.append(xs)
    return T.concat(outputs, axis=0) if len(outputs) > 1 else outputs[0]


@dataclass
class HeadOutputs:
    logits: dict[str, Tensor]  # task -> N x a, rows in topo order
    action_reprs: dict[str, Tensor]
    value: Tensor  # 1 x 1


def task_heads(hiddens: Tensor, store: ParamStore, cfg: PolicyConfig,
               tasks: list[tuple[str, int]], prefix: str = "policy/",
               ablate_action_input: set[str] | None = None) -> HeadOutputs:
    """Chained recurrent attention heads, one per task in canonical order.

    Task t attends over LN(proj(concat(previous task's action
    representation, trunk hiddens))); the attention weights are shared
    across tasks, while the LN/FC/output layers are task-specific. The
    first task (or an ablated one) sees a zero action representation.
    """
    if not tasks:
        raise ValueError("at least one task required")
    n, d = hiddens.data.shape
    zeros = Tensor(np.zeros((n, d)))
    a_prev = zeros
    logits: dict[str, Tensor] = {}
    reprs: dict[str, Tensor] = {}
    for task, a in tasks:
        p = f"{prefix}task/{task}/"
        a_in = zeros if (ablate_action_input and task in ablate_action_input) else a_prev
        h = T.layer_norm(
            T.affine(T.concat([a_in, hiddens], axis=1), store[p + "cat_w"], store[p + "cat_b"]),
            store[p + "ln_g"], store[p + "ln_b"])
        attn = multi_head_attention(store, prefix + "task_attn/", cfg, h, h)
        rep = T.affine(T.relu(T.affine(attn, store[p + "fc_w1"], store[p + "fc_b1"])),
                       store[p + "fc_w2"], store[p + "fc_b2"])
        logits[task] = T.affine(rep, store[p + "out_w"], store[p + "out_b"])
        reprs[task] = rep
        a_prev = rep
    value = T.affine(T.mean_rows(a_prev), store[prefix + "value_w"], store[prefix + "value_b"])
    return HeadOutputs(logits=logits, action_reprs=reprs, value=value)


def sample_actions(logits: np.ndarray, temperature: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-row categorical sample at the given temperature.

    Temperature 0 is argmax with lowest-index tie-break (log-prob 0 under
    the degenerate distribution). Returns (actions, per-row log-probs)."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0.0:
        actions = np.argmax(logits, axis=1)
        return actions, np.zeros(len(logits))
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    cum = np.cumsum(np.exp(logp), axis=1)
    u = rng.random((len(logits), 1)) * cum[:, -1:]
    actions = (u > cum).sum(axis=1)
    return actions, logp[np.arange(len(logits)), actions]


@dataclass
class TaskActionBundle:
    """One decision over a whole graph: per-task logits, sampled actions
    (indexed by node id), per-node log-probs (indexed by topo row), the
    value estimate, and the previous iteration's actions used to featurize."""

    tasks: list[str]
    logits: dict[str, np.ndarray]
    actions: dict[str, np.ndarray]
    log_probs: dict[str, np.ndarray]
    value: float
    prev_actions: dict[str, np.ndarray] | None
    embed_seed: int
    temperature: float

    def joint_log_prob(self) -> float:
        return float(sum(lp.sum() for lp in self.log_probs.values()))

    def to_assignment(self, task: str, num_actions: int):
        from .simulator import ActionAssignment

        return ActionAssignment(task, self.actions[task], num_actions)


def forward_policy(graph: ComputationGraph, store: ParamStore, embed_cfg: EmbedConfig,
                   cfg: PolicyConfig, task_sizes: dict[str, int],
                   prev_actions: dict[str, np.ndarray] | None,
                   embed_seed: int) -> HeadOutputs:
    """Featurize, embed, run the trunk and heads. One tape."""
    tasks = ordered_tasks(task_sizes)
    prev = None
    if prev_actions is not None:
        prev = [prev_actions[t] for t, _ in tasks]
    feats = node_features(graph, prev, [a for _, a in tasks])
    emb = embed(graph, feats, store, embed_cfg, seed=embed_seed)
    hid = trunk_forward(emb.node_embed, emb.graph_embed, store, cfg)
    return task_heads(hid, store, cfg, tasks)


def iterate_decisions(graph: ComputationGraph, store: ParamStore, embed_cfg: EmbedConfig,
                      cfg: PolicyConfig, task_sizes: dict[str, int], iterations: int,
                      seed: int, temperature: float = 1.0
                      ) -> tuple[TaskActionBundle, list[TaskActionBundle]]:
    """Iterative non-autoregressive decisions: every round re-featurizes the
    nodes with the previous round's actions, re-embeds, and re-decides.
    Returns the final bundle and the full trajectory."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    embed_seed = seed
    tasks = ordered_tasks(task_sizes)
    order = graph.topo_order()
    prev: dict[str, np.ndarray] | None = None
    trajectory: list[TaskActionBundle] = []
    for _ in range(iterations):
        heads = forward_policy(graph, store, embed_cfg, cfg, task_sizes, prev, embed_seed)
        actions: dict[str, np.ndarray] = {}
        log_probs: dict[str, np.ndarray] = {}
        logits: dict[str, np.ndarray] = {}
        for task, _a in tasks:
            logit = heads.logits[task].data
            row_actions, row_logp = sample_actions(logit, temperature, rng)
            node_actions = np.zeros(graph.num_nodes, dtype=np.int64)
            node_actions[order] = row_actions
            actions[task] = node_actions
            log_probs[task] = row_logp
            logits[task] = logit
        bundle = TaskActionBundle(
            tasks=[t for t, _ in tasks],
            logits=logits,
            actions=actions,
            log_probs=log_probs,
            value=float(heads.value.data[0, 0]),
            prev_actions=None if prev is None else {k: v.copy() for k, v in prev.items()},
            embed_seed=embed_seed,
            temperature=temperature,
        )
        trajectory.append(bundle)
        prev = actions
    return trajectory[-1], trajectory


def init_all_params(embed_cfg: EmbedConfig, cfg: PolicyConfig,
                    task_sizes: dict[str, int], seed: int) -> ParamStore:
    """Fresh parameter store covering the embedding network and policy."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    fdim = feature_dim([a for _, a in ordered_tasks(task_sizes)])
    init_embed_params(store, fdim, embed_cfg, rng)
    init_policy_params(store, cfg, embed_cfg.gs_dim, task_sizes, rng)
    return store

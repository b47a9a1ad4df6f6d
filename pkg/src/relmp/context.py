"""Relational context by alternate edge -> node -> edge message passing.

Two implementations share one parameter layout:

* ``node_aggregate`` / ``edge_update`` / ``run_context_passing`` /
  ``pair_context`` are direct numpy transcriptions that recompute every edge
  state of the whole graph for one query. They are the readable reference.
* ``ContextEncoder`` computes the same quantities for a batch of queries on the
  gradient tape. Unmasked states are computed once for the whole graph, then
  each query only recomputes the states its masked edge can influence.

Layer ``i`` for ``i < K - 1`` maps edge states of width ``d_i`` to width
``hidden``; layer ``K - 1`` maps the two endpoint messages to ``n_relations``
scores with no activation.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .kg import KnowledgeGraph

AGGREGATORS = ("mean", "concat", "cross")


def _xavier(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def layer_dims(feat_dim: int, hidden: int, hops: int) -> list[int]:
    """Edge-state width entering each layer."""
    return [feat_dim] + [hidden] * (hops - 1)


def init_context_params(store, kind: str, feat_dim: int, hidden: int, n_relations: int, hops: int, rng) -> None:
    if kind not in AGGREGATORS:
        raise ValueError(f"unknown context aggregator {kind!r}")
    if hops < 1:
        raise ValueError("hops must be >= 1")
    dt = store.dtype
    dims = layer_dims(feat_dim, hidden, hops)
    for i, d in enumerate(dims):
        final = i == hops - 1
        out = n_relations if final else hidden
        p = f"ctx.{i}."
        if kind == "concat":
            store.add(p + "W", _xavier(rng, (2 if final else 3) * d, out, dt))
        elif kind == "mean":
            store.add(p + "W", _xavier(rng, d, out, dt))
        else:
            store.add(p + "W1", _xavier(rng, d * d, out, dt))
            if not final:
                store.add(p + "W2", _xavier(rng, d, out, dt))
        store.add(p + "b", np.zeros(out, dtype=dt), regularize=False)


def check_context_params(params, kind: str, feat_dim: int, hidden: int, n_relations: int, hops: int) -> None:
    """Verify the width chain ``feat_dim -> hidden ... -> n_relations``."""
    dims = layer_dims(feat_dim, hidden, hops)
    for i, d in enumerate(dims):
        final = i == hops - 1
        out = n_relations if final else hidden
        p = f"ctx.{i}."
        expect = {p + "b": (out,)}
        if kind == "concat":
            expect[p + "W"] = ((2 if final else 3) * d, out)
        elif kind == "mean":
            expect[p + "W"] = (d, out)
        else:
            expect[p + "W1"] = (d * d, out)
            if not final:
                expect[p + "W2"] = (d, out)
        for name, shape in expect.items():
            got = tuple(np.shape(params[name]))
            if got != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {got}")


# ---------------------------------------------------------------- reference path

def edge_features(graph: KnowledgeGraph, features=None) -> np.ndarray:
    """Initial edge states: one-hot relation type unless a feature table is given."""
    if features is None:
        features = np.eye(graph.n_relations)
    return np.asarray(features)[graph.relations]


def node_aggregate(graph: KnowledgeGraph, edge_states, masked_edge=None) -> np.ndarray:
    """Sum of incident edge states at every node, skipping ``masked_edge``."""
    s = np.asarray(edge_states)
    keep = np.ones(len(graph.inc_edge), dtype=bool)
    if masked_edge is not None and masked_edge >= 0:
        keep = graph.inc_edge != masked_edge
    nodes = np.repeat(np.arange(graph.n_entities), np.diff(graph.indptr))
    out = np.zeros((graph.n_entities,) + s.shape[1:], dtype=s.dtype)
    np.add.at(out, nodes[keep], s[graph.inc_edge[keep]])
    return out


def _relu(x):
    return np.maximum(x, 0)


def edge_update(m_v, m_u, s_e, params, layer: int, kind: str, activation=_relu):
    """New edge state from both endpoint messages (head first) and the old state."""
    m_v, m_u, s_e = (np.asarray(a) for a in (m_v, m_u, s_e))
    if not (m_v.shape == m_u.shape == s_e.shape):
        raise ValueError(f"dimension mismatch: {m_v.shape}, {m_u.shape}, {s_e.shape}")
    p = f"ctx.{layer}."
    if kind == "concat":
        z = np.concatenate([m_v, m_u, s_e], axis=-1) @ params[p + "W"]
    elif kind == "mean":
        z = ((m_v + m_u + s_e) / 3.0) @ params[p + "W"]
    elif kind == "cross":
        outer = (m_v[..., :, None] * m_u[..., None, :]).reshape(m_v.shape[:-1] + (-1,))
        z = outer @ params[p + "W1"] + s_e @ params[p + "W2"]
    else:
        raise ValueError(f"unknown context aggregator {kind!r}")
    return activation(z + params[p + "b"])


def pair_context(m_h, m_t, params, kind: str, hops: int):
    """Context scores for (h, t) from the final node messages; identity activation."""
    m_h, m_t = np.asarray(m_h), np.asarray(m_t)
    p = f"ctx.{hops - 1}."
    if kind == "concat":
        z = np.concatenate([m_h, m_t], axis=-1) @ params[p + "W"]
    elif kind == "mean":
        z = ((m_h + m_t) / 2.0) @ params[p + "W"]
    elif kind == "cross":
        z = (m_h[..., :, None] * m_t[..., None, :]).reshape(m_h.shape[:-1] + (-1,)) @ params[p + "W1"]
    else:
        raise ValueError(f"unknown context aggregator {kind!r}")
    return z + params[p + "b"]


def run_context_passing(graph: KnowledgeGraph, pair, masked_edge, params, hops: int, kind: str = "concat",
                        features=None, activation=_relu):
    """Final messages ``(m_h, m_t)`` after ``hops`` node aggregations.

    ``masked_edge`` (an edge id or ``None``) is left out of every aggregation.
    """
    if hops < 1:
        raise ValueError("hops must be >= 1")
    h, t = pair
    s = edge_features(graph, features)
    for i in range(hops):
        m = node_aggregate(graph, s, masked_edge)
        if i == hops - 1:
            return m[h], m[t]
        s = edge_update(m[graph.heads], m[graph.tails], s, params, i, kind, activation)


# ---------------------------------------------------------------- batched tape path

@dataclass
class _Level:
    node_v: list = field(default_factory=list)
    node_key: dict = field(default_factory=dict)
    base_slot: list = field(default_factory=list)    # slots that start from the unmasked message
    mask_slot: list = field(default_factory=list)    # level 0 only: subtract the masked edge's feature
    mask_edge: list = field(default_factory=list)
    direct_slot: list = field(default_factory=list)  # slots rebuilt entirely from recomputed edge states
    direct_local: list = field(default_factory=list)
    corr_slot: list = field(default_factory=list)    # base slots patched edge by edge
    corr_local: list = field(default_factory=list)
    corr_edge: list = field(default_factory=list)
    edge_e: list = field(default_factory=list)
    edge_key: dict = field(default_factory=dict)
    edge_hslot: list = field(default_factory=list)
    edge_tslot: list = field(default_factory=list)
    edge_self: list = field(default_factory=list)    # recomputed slot one level down, or -1 for the global row

    def node(self, p, v):
        key = (p, v)
        slot = self.node_key.get(key)
        new = slot is None
        if new:
            slot = self.node_key[key] = len(self.node_v)
            self.node_v.append(v)
        return slot, new

    def edge(self, p, e):
        key = (p, e)
        slot = self.edge_key.get(key)
        new = slot is None
        if new:
            slot = self.edge_key[key] = len(self.edge_e)
            self.edge_e.append(e)
            self.edge_hslot.append(-1)
            self.edge_tslot.append(-1)
            self.edge_self.append(-1)
        return slot, new


_PLAN_FIELDS = ("node_v", "base_slot", "mask_slot", "mask_edge", "direct_slot", "direct_local",
                "corr_slot", "corr_local", "corr_edge", "edge_e", "edge_hslot", "edge_tslot", "edge_self")


class ContextPlan:
    """Index bookkeeping for computing masked context messages of a batch.

    For query ``p`` with masked edge ``q``, let ``dist(v)`` be the hop distance
    of ``v`` from the endpoints of ``q`` in the graph without ``q``. The node
    message at level ``j`` differs from the unmasked one exactly when
    ``dist(v) <= j``; the edge state at level ``j >= 1`` differs exactly when an
    endpoint has ``dist <= j - 1``. Only those values are recomputed: nodes with
    ``dist(v) <= j - 1`` are summed from recomputed states, nodes with
    ``dist(v) == j`` are patched through the edges leading one step closer.
    """

    def __init__(self, graph: KnowledgeGraph, heads, tails, masks, hops: int):
        self.hops = K = hops
        self.n_pairs = len(heads)
        levels = [_Level() for _ in range(K)]
        self.pair_hslot = np.empty(self.n_pairs, dtype=np.int64)
        self.pair_tslot = np.empty(self.n_pairs, dtype=np.int64)
        self.needs_global_top = False
        indptr, inc_edge, inc_other = graph.indptr, graph.inc_edge, graph.inc_other
        g_heads, g_tails = graph.heads, graph.tails

        for p, (h, t, q) in enumerate(zip(heads, tails, masks)):
            h, t, q = int(h), int(t), int(q)
            if q < 0:
                top = levels[K - 1]
                for v, out in ((h, self.pair_hslot), (t, self.pair_tslot)):
                    slot, new = top.node(p, v)
                    if new:
                        top.base_slot.append(slot)
                    out[p] = slot
                self.needs_global_top = True
                continue
            ends = (int(g_heads[q]), int(g_tails[q]))
            dist, parents = self._bfs(indptr, inc_edge, inc_other, ends, q, K - 2)
            pending_nodes = [[] for _ in range(K)]
            pending_edges = [[] for _ in range(K)]

            def want_node(j, v):
                slot, new = levels[j].node(p, v)
                if new:
                    pending_nodes[j].append((slot, v))
                return slot

            def want_edge(j, e):
                slot, new = levels[j].edge(p, e)
                if new:
                    pending_edges[j].append((slot, e))
                return slot

            self.pair_hslot[p] = want_node(K - 1, h)
            self.pair_tslot[p] = want_node(K - 1, t)
            for j in range(K - 1, -1, -1):
                lev = levels[j]
                for slot, v in pending_nodes[j]:
                    lo, hi = indptr[v], indptr[v + 1]
                    if j == 0:
                        lev.base_slot.append(slot)
                        if v in ends:
                            for e in inc_edge[lo:hi]:
                                if e == q:
                                    lev.mask_slot.append(slot)
                                    lev.mask_edge.append(q)
                        continue
                    dv = dist.get(v, K)
                    if dv <= j - 1:
                        for e in inc_edge[lo:hi]:
                            if e != q:
                                lev.direct_slot.append(slot)
                                lev.direct_local.append(want_edge(j, int(e)))
                        continue
                    lev.base_slot.append(slot)
                    if dv == j:
                        for e in parents[v]:
                            lev.corr_slot.append(slot)
                            lev.corr_local.append(want_edge(j, e))
                            lev.corr_edge.append(e)
                if j == 0:
                    break
                for slot, e in pending_edges[j]:
                    a, b = int(g_heads[e]), int(g_tails[e])
                    lev.edge_hslot[slot] = want_node(j - 1, a)
                    lev.edge_tslot[slot] = want_node(j - 1, b)
                    if j - 1 >= 1 and min(dist.get(a, K), dist.get(b, K)) <= j - 2:
                        lev.edge_self[slot] = want_edge(j - 1, e)

        self.arrays = [{k: np.asarray(getattr(lev, k), dtype=np.int64) for k in _PLAN_FIELDS} for lev in levels]

    @staticmethod
    def _bfs(indptr, inc_edge, inc_other, ends, q, depth):
        """Distances up to ``depth`` from ``ends`` avoiding ``q``, plus the edges
        joining each reached node to the previous layer."""
        dist = {v: 0 for v in ends}
        parents: dict[int, list[int]] = {}
        frontier = deque(dist)
        while frontier:
            u = frontier.popleft()
            du = dist[u]
            if du >= depth:
                continue
            lo, hi = indptr[u], indptr[u + 1]
            for e, w in zip(inc_edge[lo:hi].tolist(), inc_other[lo:hi].tolist()):
                if e == q:
                    continue
                dw = dist.get(w)
                if dw is None:
                    dist[w] = du + 1
                    parents[w] = [e]
                    frontier.append(w)
                elif dw == du + 1:
                    parents[w].append(e)
        return dist, parents


class ContextEncoder:
    """Batched context scores on the gradient tape."""

    def __init__(self, kind: str, hops: int, features=None):
        if kind not in AGGREGATORS:
            raise ValueError(f"unknown context aggregator {kind!r}")
        self.kind = kind
        self.hops = hops
        self.features = features
        self._graph_cache = None

    def _graph_constants(self, graph: KnowledgeGraph, dtype):
        key = (id(graph), np.dtype(dtype).str)
        if self._graph_cache is None or self._graph_cache[0] != key:
            s0 = edge_features(graph, self.features).astype(dtype)
            inc_nodes = np.repeat(np.arange(graph.n_entities), np.diff(graph.indptr))
            m0 = np.zeros((graph.n_entities, s0.shape[1]), dtype=dtype)
            np.add.at(m0, inc_nodes, s0[graph.inc_edge])
            self._graph_cache = (key, s0, m0, inc_nodes)
        return self._graph_cache[1:]

    def _update(self, P, layer, mv, mu, se):
        p = f"ctx.{layer}."
        if self.kind == "concat":
            z = ad.concat([mv, mu, se], axis=1) @ P[p + "W"]
        elif self.kind == "mean":
            z = ad.scale(mv + mu + se, 1.0 / 3.0) @ P[p + "W"]
        else:
            z = ad.outer_rows(mv, mu) @ P[p + "W1"] + se @ P[p + "W2"]
        return ad.relu(z + P[p + "b"])

    def _final(self, P, mh, mt):
        p = f"ctx.{self.hops - 1}."
        if self.kind == "concat":
            z = ad.concat([mh, mt], axis=1) @ P[p + "W"]
        elif self.kind == "mean":
            z = ad.scale(mh + mt, 0.5) @ P[p + "W"]
        else:
            z = ad.outer_rows(mh, mt) @ P[p + "W1"]
        return z + P[p + "b"]

    def messages(self, P, graph: KnowledgeGraph, heads, tails, masks, dtype=np.float64):
        """Final node messages ``(m_h, m_t)`` for every query, as tape tensors."""
        K = self.hops
        plan = ContextPlan(graph, heads, tails, masks, K)
        s0, m0, inc_nodes = self._graph_constants(graph, dtype)
        top_global = K - 1 if plan.needs_global_top else K - 2
        g_s = [ad.Tensor(s0)]
        g_m = [ad.Tensor(m0)]
        for j in range(top_global):
            s = self._update(P, j, ad.gather(g_m[j], graph.heads), ad.gather(g_m[j], graph.tails), g_s[j])
            g_s.append(s)
            g_m.append(ad.segment_sum(ad.gather(s, graph.inc_edge), inc_nodes, graph.n_entities))

        local_s = [None] * K
        local_m = None
        for j in range(K):
            a = plan.arrays[j]
            n_nodes = len(a["node_v"])
            parts = []
            if len(a["base_slot"]):
                base = ad.gather(g_m[j], a["node_v"][a["base_slot"]])
                parts.append(ad.segment_sum(base, a["base_slot"], n_nodes))
            if len(a["mask_slot"]):
                parts.append(ad.scale(ad.segment_sum(ad.gather(g_s[0], a["mask_edge"]), a["mask_slot"], n_nodes), -1.0))
            if len(a["direct_slot"]):
                parts.append(ad.segment_sum(ad.gather(local_s[j], a["direct_local"]), a["direct_slot"], n_nodes))
            if len(a["corr_slot"]):
                delta = ad.gather(local_s[j], a["corr_local"]) - ad.gather(g_s[j], a["corr_edge"])
                parts.append(ad.segment_sum(delta, a["corr_slot"], n_nodes))
            if not parts:
                width = s0.shape[1] if j == 0 else P[f"ctx.{j - 1}.b"].shape[0]
                parts.append(ad.Tensor(np.zeros((n_nodes, width), dtype=dtype)))
            m = parts[0]
            for extra in parts[1:]:
                m = m + extra
            local_m = m
            if j + 1 < K:
                b = plan.arrays[j + 1]
                if len(b["edge_e"]) == 0:
                    continue
                self_term = self._self_rows(g_s[j], local_s[j], b["edge_e"], b["edge_self"])
                local_s[j + 1] = self._update(P, j, ad.gather(m, b["edge_hslot"]), ad.gather(m, b["edge_tslot"]),
                                              self_term)
        return ad.gather(local_m, plan.pair_hslot), ad.gather(local_m, plan.pair_tslot)

    @staticmethod
    def _self_rows(g_s, l_s, edges, self_slot):
        is_local = self_slot >= 0
        if not is_local.any():
            return ad.gather(g_s, edges)
        if is_local.all():
            return ad.gather(l_s, self_slot)
        loc = np.flatnonzero(is_local)
        glo = np.flatnonzero(~is_local)
        stacked = ad.concat([ad.gather(l_s, self_slot[loc]), ad.gather(g_s, edges[glo])], axis=0)
        perm = np.empty(len(edges), dtype=np.int64)
        perm[loc] = np.arange(len(loc))
        perm[glo] = len(loc) + np.arange(len(glo))
        return ad.gather(stacked, perm)

    def forward(self, P, graph: KnowledgeGraph, heads, tails, masks, dtype=np.float64):
        mh, mt = self.messages(P, graph, heads, tails, masks, dtype)
        return self._final(P, mh, mt)

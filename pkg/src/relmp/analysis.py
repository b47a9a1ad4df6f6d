"""Explanations read off trained weights, message-passing cost counters, line
graph statistics and the relational path census."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .kg import KnowledgeGraph, degree_stats
from .model import RelationModel
from .paths import path_representation

COST_SCHEMES = ("node_based", "relational", "alternate")


# ---------------------------------------------------------------- explanations

class ExplanationError(ValueError):
    pass


def context_importance(model: RelationModel) -> np.ndarray:
    """``imp[c, r]``: score of relation ``r`` produced by one edge of relation ``c``.

    Only a one-hop context model has a single linear map from neighbouring
    relations to scores. Head-side and tail-side maps are averaged.
    """
    cfg = model.config
    if not cfg.use_context:
        raise ExplanationError("model has no context branch")
    if cfg.hops != 1:
        raise ExplanationError(f"context importance needs a 1-hop context model (this one has {cfg.hops} hops)")
    if cfg.context_aggregator == "cross":
        raise ExplanationError("the cross aggregator is bilinear in head and tail messages; no per-relation weights")
    W = np.asarray(model.store["ctx.0.W"], dtype=float)
    if cfg.context_aggregator == "concat":
        d = W.shape[0] // 2
        per_feature = (W[:d] + W[d:]) / 2.0
    else:
        per_feature = W / 2.0
    feats = np.eye(model.n_relations) if model.features is None else np.asarray(model.features, dtype=float)
    return feats @ per_feature


def path_importance(model: RelationModel) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Vocabulary paths and their score vectors; ``imp[p, r]`` is coordinate ``r``."""
    if not model.config.use_path:
        raise ExplanationError("model has no path branch")
    if model.vocab is None:
        raise ExplanationError("model has no path vocabulary")
    paths = list(model.vocab.paths)
    if model.config.path_type == "embedding":
        S = path_representation(np.arange(len(paths)), model.store.values, "embedding")
    else:
        S = path_representation(paths, model.store.values, "rnn")
    return paths, np.asarray(S, dtype=float).reshape(len(paths), model.n_relations)


def _top_k(column, k):
    order = np.lexsort((np.arange(len(column)), -column))
    return order[:k]


@dataclass
class ExplanationTable:
    context: dict[int, list[tuple[int, float]]]
    paths: dict[int, list[tuple[tuple[int, ...], float]]]

    def rows(self, relation_names=None):
        name = (lambda r: str(r)) if relation_names is None else (lambda r: relation_names[r])
        out = []
        for r in sorted(set(self.context) | set(self.paths)):
            for rank, (c, w) in enumerate(self.context.get(r, []), 1):
                out.append((name(r), "context", name(c), w, rank))
            for rank, (p, w) in enumerate(self.paths.get(r, []), 1):
                out.append((name(r), "path", " -> ".join(name(x) for x in p), w, rank))
        return out

    def write_csv(self, path, relation_names=None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["target_relation", "kind", "item", "weight", "rank"])
            w.writerows(self.rows(relation_names))


def extract_explanations(model: RelationModel, k: int = 5, context: bool = True,
                         paths: bool = True) -> ExplanationTable:
    ctx_table, path_table = {}, {}
    R = model.n_relations
    if context:
        imp = context_importance(model)
        kk = min(k, R)
        for r in range(R):
            ctx_table[r] = [(int(c), float(imp[c, r])) for c in _top_k(imp[:, r], kk)]
    if paths:
        plist, imp = path_importance(model)
        kk = min(k, len(plist))
        for r in range(R):
            path_table[r] = [(plist[i], float(imp[i, r])) for i in _top_k(imp[:, r], kk)]
    return ExplanationTable(ctx_table, path_table)


def diagonal_dominance(importance) -> int:
    """Number of target relations whose strongest context relation is itself."""
    imp = np.asarray(importance)
    return int(np.sum(np.argmax(imp, axis=0) == np.arange(imp.shape[1])))


# ---------------------------------------------------------------- cost counters

@dataclass
class CostReport:
    scheme: str
    measured_cost: int
    formula_cost: float

    def to_dict(self):
        return asdict(self)


def count_message_cost(graph: KnowledgeGraph, scheme: str) -> CostReport:
    """Inputs read by one message-passing iteration, counted on the graph.

    node_based: every node aggregates its neighbours, then its update reads
    its own state and its message. relational: every edge aggregates the edges
    sharing an endpoint, then updates likewise. alternate: nodes aggregate
    incident edges, edges read their two endpoint messages, then update.
    """
    deg = np.diff(graph.indptr).astype(np.int64)
    N, M = graph.n_entities, graph.n_edges
    st = degree_stats(graph)
    if scheme == "node_based":
        measured = int(deg.sum()) + 2 * N
        formula = 2.0 * M + 2.0 * N
    elif scheme == "relational":
        nbrs = deg[graph.heads] + deg[graph.tails] - 2
        measured = int(nbrs.sum()) + 2 * M
        formula = N * st.var_degree + 4.0 * M * M / N if N else 0.0
    elif scheme == "alternate":
        measured = int(deg.sum()) + 2 * M + 2 * M
        formula = 6.0 * M
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {COST_SCHEMES}")
    return CostReport(scheme, measured, float(formula))


@njit(cache=True)
def _line_graph_degrees(indptr, inc_edge, n_edges):
    deg = np.zeros(n_edges, np.int64)
    n_links = 0
    for v in range(len(indptr) - 1):
        lo, hi = indptr[v], indptr[v + 1]
        for i in range(lo, hi):
            for j in range(i + 1, hi):
                deg[inc_edge[i]] += 1
                deg[inc_edge[j]] += 1
                n_links += 1
    return deg, n_links


def line_graph(graph: KnowledgeGraph) -> tuple[np.ndarray, np.ndarray]:
    """Explicit line graph as endpoint arrays: one link per pair of edge
    slots meeting at a node (a multigraph when edges share both endpoints)."""
    src, dst = [], []
    for v in range(graph.n_entities):
        inc = graph.inc_edge[graph.indptr[v]:graph.indptr[v + 1]]
        if len(inc) > 1:
            i, j = np.triu_indices(len(inc), k=1)
            src.append(inc[i])
            dst.append(inc[j])
    if not src:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(src), np.concatenate(dst)


def line_graph_stats(graph: KnowledgeGraph) -> dict:
    M = graph.n_edges
    if M == 0:
        raise ValueError("line graph of a graph without edges is empty")
    deg, n_links = _line_graph_degrees(graph.indptr, graph.inc_edge, M)
    st = degree_stats(graph)
    N = graph.n_entities
    return {"n_nodes": M, "n_edges": int(n_links), "expected_degree": float(deg.mean()),
            "formula": N * st.var_degree / M + 4.0 * M / N - 2.0}


# ---------------------------------------------------------------- path census

@njit(cache=True)
def _census(indptr, inc_edge, inc_other, rel, length, n_rel, seen, on_path, stack_v, stack_i, stack_c):
    for s in range(len(indptr) - 1):
        depth = 0
        stack_v[0] = s
        stack_i[0] = indptr[s]
        stack_c[0] = 0
        on_path[s] = True
        while depth >= 0:
            v = stack_v[depth]
            i = stack_i[depth]
            if i >= indptr[v + 1]:
                on_path[v] = False
                depth -= 1
                continue
            stack_i[depth] = i + 1
            w = inc_other[i]
            if on_path[w]:
                continue
            code = stack_c[depth] * n_rel + rel[inc_edge[i]]
            if depth + 1 == length:
                seen[code] = True
                continue
            depth += 1
            stack_v[depth] = w
            stack_i[depth] = indptr[w]
            stack_c[depth] = code
            on_path[w] = True
    return seen


def path_census(graph: KnowledgeGraph, length: int, max_table: int = 1 << 31) -> float:
    """Fraction of the ``|R|**length`` relation sequences that occur as a
    relational path between some entity pair."""
    if length < 1:
        raise ValueError("length must be >= 1")
    R = graph.n_relations
    total = R ** length
    if total >= 2 ** 63:
        raise OverflowError(f"|R|^L = {R}^{length} does not fit in 64-bit integers")
    if total > max_table:
        raise OverflowError(f"|R|^L = {total} exceeds the census table limit {max_table}")
    if total == 0:
        return 0.0
    n = graph.n_entities
    seen = np.zeros(total, dtype=np.bool_)
    _census(graph.indptr, graph.inc_edge, graph.inc_other, graph.relations, length, R, seen,
            np.zeros(n, np.bool_), np.zeros(length + 1, np.int64), np.zeros(length + 1, np.int64),
            np.zeros(length + 1, np.int64))
    return float(seen.sum()) / total


def stats_report(graph: KnowledgeGraph) -> dict:
    st = degree_stats(graph)
    doc = {"degree": asdict(st), "costs": {s: count_message_cost(graph, s).to_dict() for s in COST_SCHEMES}}
    doc["line_graph"] = line_graph_stats(graph) if graph.n_edges else None
    return doc


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

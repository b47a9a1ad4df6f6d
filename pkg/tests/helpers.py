"""Random and structured toy graphs for tests."""
from __future__ import annotations

import numpy as np

from relmp.kg import KnowledgeGraph, write_dataset


def random_graph(rng, n_nodes, n_edges, n_rel, self_loops=True):
    h = rng.integers(0, n_nodes, n_edges)
    t = rng.integers(0, n_nodes, n_edges)
    if not self_loops:
        t = np.where(h == t, (t + 1) % n_nodes, t)
    r = rng.integers(0, n_rel, n_edges)
    return KnowledgeGraph(np.stack([h, r, t], 1), n_nodes, n_rel)


def typed_triples(rng, n_entities, n_triples, n_types=3, n_rel=None):
    """Triples whose relation is a function of the (head type, tail type) pair.

    Entity types leak through the relations of incident edges, so the
    relation of a held-out edge is predictable from its context.
    """
    n_rel = n_types * n_types if n_rel is None else n_rel
    types = rng.integers(0, n_types, n_entities)
    h = rng.integers(0, n_entities, n_triples * 2)
    t = rng.integers(0, n_entities, n_triples * 2)
    keep = h != t
    h, t = h[keep], t[keep]
    r = (types[h] * n_types + types[t]) % n_rel
    arr = np.unique(np.stack([h, r, t], 1), axis=0)
    arr = arr[rng.permutation(len(arr))][:n_triples]
    return arr, n_rel


def write_typed_dataset(path, seed=0, n_entities=60, n_train=300, n_valid=40, n_test=40, n_types=3):
    rng = np.random.default_rng(seed)
    arr, n_rel = typed_triples(rng, n_entities, n_train + n_valid + n_test, n_types)
    train, valid, test = arr[:n_train], arr[n_train:n_train + n_valid], arr[n_train + n_valid:]
    entities = [f"e{i}" for i in range(n_entities)]
    relations = [f"rel_{i}" for i in range(n_rel)]
    write_dataset(path, entities, relations, train, valid, test)
    return path

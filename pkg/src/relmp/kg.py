"""Knowledge-graph loading, indexing, degree statistics and inductive splits.

Edges are undirected for incidence purposes: every triple ``(h, r, t)`` is listed
in the incidence of both ``h`` and ``t`` (twice in the incidence of ``h`` when it
is a self-loop).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class ParseError(ValueError):
    """Raised for malformed dataset or dictionary files."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class KnowledgeGraph:
    """Immutable edge list with a CSR incidence index.

    ``incident(v)`` returns edge ids in ascending order; ``other_end(v)`` the
    matching opposite endpoints.
    """

    def __init__(self, triples, n_entities: int, n_relations: int):
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if arr.size and (arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= n_entities):
            raise ValueError("entity id out of range")
        if arr.size and (arr[:, 1].min() < 0 or arr[:, 1].max() >= n_relations):
            raise ValueError("relation id out of range")
        self.heads = arr[:, 0].copy()
        self.relations = arr[:, 1].copy()
        self.tails = arr[:, 2].copy()
        self.n_entities = int(n_entities)
        self.n_relations = int(n_relations)
        for a in (self.heads, self.relations, self.tails):
            a.flags.writeable = False

        m = len(arr)
        edge_ids = np.concatenate([np.arange(m), np.arange(m)])
        nodes = np.concatenate([self.heads, self.tails])
        others = np.concatenate([self.tails, self.heads])
        order = np.lexsort((edge_ids, nodes))
        self.inc_edge = edge_ids[order]
        self.inc_other = others[order]
        counts = np.bincount(nodes, minlength=self.n_entities)
        self.indptr = np.zeros(self.n_entities + 1, dtype=np.int64)
        np.cumsum(counts, out=self.indptr[1:])
        for a in (self.inc_edge, self.inc_other, self.indptr):
            a.flags.writeable = False

    @property
    def n_edges(self) -> int:
        return len(self.heads)

    @property
    def triples(self) -> list[Triple]:
        return [Triple(int(h), int(r), int(t)) for h, r, t in zip(self.heads, self.relations, self.tails)]

    def as_array(self) -> np.ndarray:
        return np.stack([self.heads, self.relations, self.tails], axis=1)

    def incident(self, v: int) -> np.ndarray:
        return self.inc_edge[self.indptr[v]:self.indptr[v + 1]]

    def other_end(self, v: int) -> np.ndarray:
        return self.inc_other[self.indptr[v]:self.indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def endpoints(self, e: int) -> tuple[int, int]:
        return int(self.heads[e]), int(self.tails[e])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.n_entities, self.n_relations], dtype=np.int64).tobytes())
        h.update(self.as_array().astype(np.int64).tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self.n_entities == other.n_entities and self.n_relations == other.n_relations
                and np.array_equal(self.as_array(), other.as_array()))

    def __repr__(self) -> str:
        return f"KnowledgeGraph(n_entities={self.n_entities}, n_relations={self.n_relations}, n_edges={self.n_edges})"

    def save(self, path) -> None:
        np.savez(path, triples=self.as_array(), n_entities=self.n_entities, n_relations=self.n_relations)

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        with np.load(path) as z:
            return cls(z["triples"], int(z["n_entities"]), int(z["n_relations"]))


@dataclass
class Dataset:
    name: str
    entities: list[str]
    relations: list[str]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    graph: KnowledgeGraph

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in SPLITS:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.split(name), dtype=np.int64).tobytes())
        h.update("\x00".join(self.relations).encode())
        return h.hexdigest()


def _read_dict(path: Path) -> list[str]:
    names: dict[int, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'id<TAB>name', got {len(parts)} fields")
            try:
                idx = int(parts[0])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer id {parts[0]!r}") from None
            if idx in names:
                raise ParseError(f"{path}:{lineno}: duplicate id {idx}")
            names[idx] = parts[1]
    if sorted(names) != list(range(len(names))):
        raise ParseError(f"{path}: ids are not contiguous 0..{len(names) - 1}")
    out = [names[i] for i in range(len(names))]
    if len(set(out)) != len(out):
        raise ParseError(f"{path}: duplicate names")
    return out


def _read_triples(path: Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}, line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def _dedup(arr: np.ndarray, split: str) -> np.ndarray:
    if len(arr) == 0:
        return arr
    _, first = np.unique(arr, axis=0, return_index=True)
    if len(first) < len(arr):
        log.warning("%s: dropped %d duplicate triples", split, len(arr) - len(first))
        arr = arr[np.sort(first)]
    return arr


def load_dataset(dir_path) -> Dataset:
    """Load ``train.txt``/``valid.txt``/``test.txt`` (and optional dictionaries).

    The graph is built from training triples only; dictionaries cover all splits.
    """
    d = Path(dir_path)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    raw = {}
    for name in SPLITS:
        p = d / f"{name}.txt"
        if not p.exists():
            raise FileNotFoundError(f"missing {p}")
        raw[name] = _read_triples(p)
    if not raw["train"]:
        raise ParseError("empty training set")

    def build_index(dict_file: str, column: int) -> dict[str, int]:
        p = d / dict_file
        if p.exists():
            names = _read_dict(p)
            index = {n: i for i, n in enumerate(names)}
            for split in SPLITS:
                for row in raw[split]:
                    for c in ((0, 2) if column == 0 else (1,)):
                        if row[c] not in index:
                            raise ParseError(f"{split}: name {row[c]!r} missing from {dict_file}")
            return index
        index = {}
        for split in SPLITS:
            for row in raw[split]:
                for c in ((0, 2) if column == 0 else (1,)):
                    index.setdefault(row[c], len(index))
        return index

    ent = build_index("entities.dict", 0)
    rel = build_index("relations.dict", 1)
    arrays = {}
    for split in SPLITS:
        arr = np.array([(ent[h], rel[r], ent[t]) for h, r, t in raw[split]], dtype=np.int64).reshape(-1, 3)
        arrays[split] = _dedup(arr, split)

    seen = set(arrays["train"][:, 1].tolist())
    rel_names = list(rel)
    for split in ("valid", "test"):
        missing = sorted(set(arrays[split][:, 1].tolist()) - seen)
        if missing:
            log.warning("%s: relations absent from training: %s", split, [rel_names[i] for i in missing])

    graph = KnowledgeGraph(arrays["train"], len(ent), len(rel))
    return Dataset(d.name, list(ent), rel_names, arrays["train"], arrays["valid"], arrays["test"], graph)


def write_dataset(dir_path, entities, relations, train, valid, test) -> None:
    """Write a dataset in the TSV + dictionary format understood by ``load_dataset``."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    (d / "entities.dict").write_text("".join(f"{i}\t{n}\n" for i, n in enumerate(entities)), encoding="utf-8")
    (d / "relations.dict").write_text("".join(f"{i}\t{n}\n" for i, n in enumerate(relations)), encoding="utf-8")
    for name, arr in zip(SPLITS, (train, valid, test)):
        lines = [f"{entities[h]}\t{relations[r]}\t{entities[t]}\n" for h, r, t in np.asarray(arr).reshape(-1, 3)]
        (d / f"{name}.txt").write_text("".join(lines), encoding="utf-8")


@dataclass(frozen=True)
class DegreeStats:
    mean_degree: float
    var_degree: float
    n_nodes: int
    n_edges: int


def degree_stats(graph: KnowledgeGraph) -> DegreeStats:
    if graph.n_entities == 0:
        raise ValueError("graph has no nodes")
    n, m = graph.n_entities, graph.n_edges
    mean = 2.0 * m / n
    # population variance from integer moments, so Var*N + 4M^2/N == sum(d^2) holds to rounding
    sum_sq = float(np.sum(graph.degrees().astype(np.int64) ** 2))
    var = max(sum_sq / n - mean * mean, 0.0)
    return DegreeStats(mean, var, n, m)


@dataclass
class InductiveSplit:
    removed_entities: frozenset
    train_graph: KnowledgeGraph
    eval_graph: KnowledgeGraph
    ratio: float
    seed: int
    kept_edges: np.ndarray  # edge ids of the input graph that survive in train_graph

    def manifest(self) -> dict:
        return {"ratio": self.ratio, "seed": self.seed, "removed_entity_ids": sorted(int(e) for e in self.removed_entities)}


def make_inductive_split(graph: KnowledgeGraph, test_triples, ratio: float, seed: int) -> InductiveSplit:
    """Remove a seeded random subset of test-set entities from the training graph.

    The sample is a prefix of one seeded permutation, so for a fixed seed a larger
    ratio always removes a superset of entities.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    test = np.asarray(test_triples, dtype=np.int64).reshape(-1, 3)
    candidates = np.unique(test[:, [0, 2]])
    rng = np.random.default_rng(seed)
    perm = rng.permutation(candidates)
    k = int(np.floor(ratio * len(candidates) + 1e-9))
    removed = np.sort(perm[:k])
    mask = np.zeros(graph.n_entities, dtype=bool)
    mask[removed] = True
    keep = ~(mask[graph.heads] | mask[graph.tails])
    kept_edges = np.flatnonzero(keep)
    if k == 0:
        train_graph = graph
    else:
        train_graph = KnowledgeGraph(graph.as_array()[keep], graph.n_entities, graph.n_relations)
    return InductiveSplit(frozenset(int(e) for e in removed), train_graph, graph, float(ratio), int(seed), kept_edges)


def write_split_manifest(split: InductiveSplit, path) -> None:
    Path(path).write_text(json.dumps(split.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_split_manifest(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("ratio", "seed", "removed_entity_ids"):
        if key not in data:
            raise ParseError(f"{path}: manifest missing {key!r}")
    return data


def apply_split_manifest(graph: KnowledgeGraph, manifest: dict) -> InductiveSplit:
    removed = np.asarray(manifest["removed_entity_ids"], dtype=np.int64)
    mask = np.zeros(graph.n_entities, dtype=bool)
    mask[removed] = True
    keep = ~(mask[graph.heads] | mask[graph.tails])
    train_graph = KnowledgeGraph(graph.as_array()[keep], graph.n_entities, graph.n_relations) if len(removed) else graph
    return InductiveSplit(frozenset(int(e) for e in removed), train_graph, graph,
                          float(manifest["ratio"]), int(manifest["seed"]), np.flatnonzero(keep))

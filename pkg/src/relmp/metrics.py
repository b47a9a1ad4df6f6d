"""Relation ranking metrics and batched evaluation."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import KnowledgeGraph
from .model import Batch, RelationModel
from .paths import cached_path_sets


def rank_relations(scores, true_relation: int, exclude=()) -> float:
    """Rank of the true relation among all candidates, ties sharing the mean rank.

    Relations in ``exclude`` (other known-true answers) are removed from the
    candidate list first.
    """
    s = np.asarray(scores)
    keep = np.ones(len(s), dtype=bool)
    for r in exclude:
        if r != true_relation:
            keep[r] = False
    x = s[true_relation]
    others = s[keep]
    greater = int(np.sum(others > x))
    ties = int(np.sum(others == x)) - 1
    return 1.0 + greater + ties / 2.0


def rank_matrix(scores, labels, exclude_mask=None) -> np.ndarray:
    """Row-wise version of :func:`rank_relations`; ``exclude_mask[i, r]`` drops
    candidate ``r`` for row ``i`` (never the true label)."""
    s = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    x = s[np.arange(len(s)), labels][:, None]
    keep = np.ones(s.shape, dtype=bool)
    if exclude_mask is not None:
        keep &= ~np.asarray(exclude_mask, dtype=bool)
        keep[np.arange(len(s)), labels] = True
    greater = np.sum((s > x) & keep, axis=1)
    ties = np.sum((s == x) & keep, axis=1) - 1
    return 1.0 + greater + ties / 2.0


@dataclass
class RankReport:
    mrr: float
    hit1: float
    hit3: float
    ranks: np.ndarray

    @classmethod
    def from_ranks(cls, ranks) -> "RankReport":
        r = np.asarray(ranks, dtype=float)
        if len(r) == 0:
            raise ValueError("no examples to evaluate")
        return cls(float(np.mean(1.0 / r)), float(np.mean(r <= 1)), float(np.mean(r <= 3)), r)

    def to_dict(self, config_hash: str = "") -> dict:
        return {"mrr": self.mrr, "hit1": self.hit1, "hit3": self.hit3,
                "n_examples": int(len(self.ranks)), "config_hash": config_hash}


def known_relations(*triple_sets) -> dict[tuple[int, int], set[int]]:
    known: dict[tuple[int, int], set[int]] = defaultdict(set)
    for arr in triple_sets:
        for h, r, t in np.asarray(arr, dtype=np.int64).reshape(-1, 3).tolist():
            known[(h, t)].add(r)
    return known


def evaluate(model: RelationModel, graph: KnowledgeGraph, triples, batch_size: int = 512,
             known: dict | None = None, cache_dir=None) -> RankReport:
    """Rank the true relation of every triple with the query edge absent from ``graph``.

    Passing ``known`` switches to filtered ranking.
    """
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    heads, labels, tails = arr[:, 0], arr[:, 1], arr[:, 2]
    masks = np.full(len(arr), -1, dtype=np.int64)
    sets = None
    if model.paths is not None:
        sets = cached_path_sets(graph, heads, tails, masks, model.config.max_path_len, cache_dir)
    ranks = np.empty(len(arr))
    for lo in range(0, len(arr), batch_size):
        sl = slice(lo, lo + batch_size)
        batch = Batch(heads[sl], tails[sl], masks[sl], labels[sl], sets, np.arange(len(arr))[sl])
        s = model.scores(graph, batch)
        excl = None
        if known is not None:
            excl = np.zeros(s.shape, dtype=bool)
            for i, (h, t) in enumerate(zip(heads[sl].tolist(), tails[sl].tolist())):
                excl[i, list(known.get((h, t), ()))] = True
        ranks[sl] = rank_matrix(s, labels[sl], excl)
    return RankReport.from_ranks(ranks)


def write_metrics_json(path, report: RankReport, config_hash: str = "", extra: dict | None = None) -> None:
    doc = report.to_dict(config_hash)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_ranks_csv(path, triples, report: RankReport) -> None:
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["head", "tail", "true_relation", "rank"])
        for (h, r, t), rank in zip(arr.tolist(), report.ranks.tolist()):
            w.writerow([h, t, r, rank])

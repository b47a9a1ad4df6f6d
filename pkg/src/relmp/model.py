"""Relation predictor combining the context branch and the path branch."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .context import AGGREGATORS, ContextEncoder, check_context_params, init_context_params
from .kg import KnowledgeGraph
from .params import ParameterStore
from .paths import MAX_PATH_LEN, PATH_AGGREGATORS, PATH_KINDS, PathEncoder, PathSets, PathVocabulary, init_path_params


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass
class ModelConfig:
    use_context: bool = True
    use_path: bool = True
    hops: int = 2
    max_path_len: int = 3
    hidden_dim: int = 64
    context_aggregator: str = "concat"
    path_type: str = "embedding"
    path_aggregator: str = "attention"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if not (self.use_context or self.use_path):
            raise ConfigError("at least one of the context and path branches must be enabled")
        if self.use_path and self.path_aggregator == "attention" and not self.use_context:
            raise ConfigError("attention over paths needs the context branch; use --path-aggregator mean")
        if not 1 <= self.hops <= 4:
            raise ConfigError(f"hops must be in 1..4, got {self.hops}")
        if not 1 <= self.max_path_len <= MAX_PATH_LEN:
            raise ConfigError(f"max path length must be in 1..{MAX_PATH_LEN}, got {self.max_path_len}")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be positive")
        if self.context_aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown context aggregator {self.context_aggregator!r}")
        if self.path_type not in PATH_KINDS:
            raise ConfigError(f"unknown path type {self.path_type!r}")
        if self.path_aggregator not in PATH_AGGREGATORS:
            raise ConfigError(f"unknown path aggregator {self.path_aggregator!r}")
        return self

    @property
    def name(self) -> str:
        if self.use_context and self.use_path:
            return "PathCon"
        return "Con" if self.use_context else "Path"

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class LossReport(NamedTuple):
    mean_ce: float
    l2_penalty: float
    total: float


@dataclass
class Batch:
    """Queries with their masked edge (-1 for none) and, for the path branch,
    the rows of a ``PathSets`` holding their paths."""
    heads: np.ndarray
    tails: np.ndarray
    masks: np.ndarray
    labels: np.ndarray | None = None
    path_sets: PathSets | None = None
    path_rows: np.ndarray | None = None

    def __len__(self):
        return len(self.heads)


class RelationModel:
    def __init__(self, config: ModelConfig, n_relations: int, vocab: PathVocabulary | None = None,
                 store: ParameterStore | None = None, dtype=np.float64, features=None, rng=None):
        self.config = config.validate()
        self.n_relations = n_relations
        self.vocab = vocab
        self.features = None if features is None else np.asarray(features, dtype=dtype)
        feat_dim = n_relations if self.features is None else self.features.shape[1]
        if config.use_path and config.path_type == "embedding" and vocab is None:
            raise ConfigError("embedding paths need a path vocabulary")
        self.context = ContextEncoder(config.context_aggregator, config.hops, self.features) if config.use_context else None
        self.paths = PathEncoder(config.path_type, config.path_aggregator, vocab) if config.use_path else None
        if store is None:
            rng = np.random.default_rng(config.seed) if rng is None else rng
            store = ParameterStore(dtype)
            if config.use_context:
                init_context_params(store, config.context_aggregator, feat_dim, config.hidden_dim,
                                    n_relations, config.hops, rng)
            if config.use_path:
                init_path_params(store, config.path_type, n_relations, len(vocab) if vocab is not None else 0,
                                 config.hidden_dim, rng)
        elif config.use_context:
            check_context_params(store.values, config.context_aggregator, feat_dim, config.hidden_dim,
                                 n_relations, config.hops)
        self.store = store

    @property
    def dtype(self):
        return self.store.dtype

    def n_parameters(self) -> int:
        return self.store.n_parameters()

    def scores_tape(self, P, graph: KnowledgeGraph, batch: Batch):
        """Unnormalized relation scores (batch x |R|) as a tape tensor."""
        ctx = None
        if self.context is not None:
            ctx = self.context.forward(P, graph, batch.heads, batch.tails, batch.masks, self.dtype)
        if self.paths is None:
            return ctx
        if batch.path_sets is None:
            raise ValueError("the path branch needs path sets for the batch")
        rows = np.arange(len(batch)) if batch.path_rows is None else batch.path_rows
        path = self.paths.forward(P, batch.path_sets, rows, ctx, self.n_relations)
        return path if ctx is None else ctx + path

    def loss_tape(self, P, graph: KnowledgeGraph, batch: Batch, l2: float):
        """``(total, mean_ce, l2_sum)``: mean cross-entropy plus ``l2`` times the
        squared norm of every regularized tensor."""
        ce = ad.softmax_cross_entropy(self.scores_tape(P, graph, batch), batch.labels)
        reg = None
        for name, leaf in P.items():
            if self.store.regularized[name]:
                sq = ad.sum_squares(leaf)
                reg = sq if reg is None else reg + sq
        if reg is None:
            reg = ad.Tensor(np.zeros((), dtype=self.dtype))
        return ce + ad.scale(reg, l2), ce, reg

    def loss_and_grad(self, graph: KnowledgeGraph, batch: Batch, l2: float) -> LossReport:
        """Forward and backward pass; gradients land in ``store.grads``."""
        P = self.store.leaves()
        total, ce, reg = self.loss_tape(P, graph, batch, l2)
        self.store.zero_grad()
        total.backward()
        self.store.collect(P)
        return LossReport(float(ce.data), float(reg.data), float(total.data))

    def loss(self, graph: KnowledgeGraph, batch: Batch, l2: float) -> LossReport:
        P = {k: ad.Tensor(v) for k, v in self.store.values.items()}
        total, ce, reg = self.loss_tape(P, graph, batch, l2)
        return LossReport(float(ce.data), float(reg.data), float(total.data))

    def scores(self, graph: KnowledgeGraph, batch: Batch) -> np.ndarray:
        P = {k: ad.Tensor(v) for k, v in self.store.values.items()}
        return self.scores_tape(P, graph, batch).data

    def predict(self, graph: KnowledgeGraph, batch: Batch) -> np.ndarray:
        """Relation probabilities per query (rows sum to one)."""
        return softmax(self.scores(graph, batch))

    def manifest(self) -> dict:
        doc = {"model": self.config.to_dict(), "n_relations": self.n_relations}
        if self.vocab is not None:
            doc["path_vocabulary"] = [list(p) for p in self.vocab.paths]
        return doc

    @classmethod
    def from_checkpoint(cls, store: ParameterStore, doc: dict, features=None) -> "RelationModel":
        cfg = ModelConfig(**doc["model"])
        vocab = None
        if "path_vocabulary" in doc:
            vocab = PathVocabulary([tuple(p) for p in doc["path_vocabulary"]], doc["n_relations"])
        return cls(cfg, doc["n_relations"], vocab, store=store, dtype=store.dtype, features=features)


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)

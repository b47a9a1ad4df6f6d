"""Mini-batch training with per-epoch validation and best-epoch selection."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .kg import KnowledgeGraph
from .metrics import RankReport, evaluate
from .model import Batch, ModelConfig, RelationModel
from .params import AdamConfig, NumericalError, adam_step
from .paths import PathVocabulary, cached_path_sets, edge_ids_for

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.005
    l2: float = 1e-7
    dtype: str = "float32"
    eval_batch_size: int = 512


@dataclass
class EpochRecord:
    epoch: int
    mean_ce: float
    l2_penalty: float
    total: float
    valid_mrr: float | None = None
    valid_hit1: float | None = None
    valid_hit3: float | None = None
    seconds: float = 0.0


@dataclass
class TrainResult:
    model: RelationModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid: RankReport | None = None
    last_valid: RankReport | None = None

    def curve_rows(self) -> list[dict]:
        return [asdict(r) for r in self.history]


def train(graph: KnowledgeGraph, train_triples, valid_triples, model_config: ModelConfig,
          train_config: TrainConfig = TrainConfig(), valid_graph: KnowledgeGraph | None = None,
          cache_dir=None, features=None, progress=None) -> TrainResult:
    """Fit a model on ``train_triples`` (edges of ``graph``).

    Each training query masks its own edge. After every epoch the model is
    scored on ``valid_triples`` and the parameters of the best-MRR epoch are
    kept; with no validation triples the last epoch is kept.
    """
    model_config.validate()
    rng = np.random.default_rng(model_config.seed)
    arr = np.asarray(train_triples, dtype=np.int64).reshape(-1, 3)
    if len(arr) == 0:
        raise ValueError("empty training set")
    valid = np.asarray(valid_triples, dtype=np.int64).reshape(-1, 3)
    valid_graph = graph if valid_graph is None else valid_graph
    heads, labels, tails = arr[:, 0], arr[:, 1], arr[:, 2]
    masks = edge_ids_for(graph, arr)

    sets, vocab = None, None
    if model_config.use_path:
        t0 = time.perf_counter()
        sets = cached_path_sets(graph, heads, tails, masks, model_config.max_path_len, cache_dir)
        vocab = PathVocabulary.from_path_sets(sets)
        log.info("path sets for %d training pairs: %d entries, vocabulary %d (%.1fs)",
                 len(arr), len(sets.codes), len(vocab), time.perf_counter() - t0)

    model = RelationModel(model_config, graph.n_relations, vocab, dtype=np.dtype(train_config.dtype),
                          features=features, rng=rng)
    log.info("%s model with %d parameters", model_config.name, model.n_parameters())
    adam = AdamConfig(lr=train_config.lr)
    result = TrainResult(model)
    best_mrr, best_values = -math.inf, None

    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(arr))
        sums = np.zeros(3)
        n_seen = 0
        for b, lo in enumerate(range(0, len(arr), train_config.batch_size)):
            idx = order[lo:lo + train_config.batch_size]
            batch = Batch(heads[idx], tails[idx], masks[idx], labels[idx], sets, idx)
            rep = model.loss_and_grad(graph, batch, train_config.l2)
            if not all(math.isfinite(x) for x in rep):
                raise NumericalError(f"loss became non-finite at epoch {epoch}, batch {b}")
            try:
                adam_step(model.store, adam)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}, batch {b}") from None
            sums += np.array(rep) * len(idx)
            n_seen += len(idx)
        mean = sums / n_seen
        rec = EpochRecord(epoch, float(mean[0]), float(mean[1]), float(mean[2]))
        if len(valid):
            rep_v = evaluate(model, valid_graph, valid, train_config.eval_batch_size, cache_dir=cache_dir)
            rec.valid_mrr, rec.valid_hit1, rec.valid_hit3 = rep_v.mrr, rep_v.hit1, rep_v.hit3
            result.last_valid = rep_v
            if rep_v.mrr > best_mrr:
                best_mrr, best_values = rep_v.mrr, model.store.copy_values()
                result.best_epoch, result.best_valid = epoch, rep_v
        else:
            result.best_epoch = epoch
        rec.seconds = time.perf_counter() - t0
        result.history.append(rec)
        log.info("epoch %d: ce %.4f total %.4f valid mrr %s (%.1fs)", epoch, rec.mean_ce, rec.total,
                 "-" if rec.valid_mrr is None else f"{rec.valid_mrr:.4f}", rec.seconds)
        if progress is not None:
            progress(rec)
    if best_values is not None:
        model.store.load_values(best_values)
    return result

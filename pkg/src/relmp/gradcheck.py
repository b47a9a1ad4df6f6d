"""Compare tape gradients of the training loss with central finite differences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import KnowledgeGraph
from .model import Batch, RelationModel


@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float

    def ok(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_error < rtol


def check_gradients(model: RelationModel, graph: KnowledgeGraph, batch: Batch, l2: float = 0.0,
                    step: float = 1e-4, floor: float = 1e-6) -> list[GradCheck]:
    """Per-tensor worst relative error ``|a - n| / max(|a|, |n|)``, counting only
    entries whose absolute difference is at least ``floor``.

    Needs a float64 model; every scalar parameter is perturbed.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checks need float64 parameters")
    model.loss_and_grad(graph, batch, l2)
    grads = {k: g.copy() for k, g in model.store.grads.items()}
    results = []
    for name, value in model.store.values.items():
        num = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + step
            up = model.loss(graph, batch, l2).total
            value[idx] = orig - step
            down = model.loss(graph, batch, l2).total
            value[idx] = orig
            num[idx] = (up - down) / (2 * step)
        a = grads[name]
        diff = np.abs(a - num)
        rel = np.where(diff < floor, 0.0, diff / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor))
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        results.append(GradCheck(name, float(rel.max()) if rel.size else 0.0, tuple(int(i) for i in worst),
                                 float(a[worst]) if rel.size else 0.0, float(num[worst]) if rel.size else 0.0))
    return results

"""Named parameter tensors, Adam, and the checkpoint format."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor

CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Non-finite gradient or loss."""


class ParameterStore:
    """Ordered named tensors, each with a gradient buffer and Adam moments."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.regularized: dict[str, bool] = {}
        self.step = 0

    def add(self, name: str, value, regularize: bool = True) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.regularized[name] = regularize

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name) -> np.ndarray:
        return self.values[name]

    def names(self) -> list[str]:
        return list(self.values)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def leaves(self) -> dict[str, Tensor]:
        """Fresh tape leaves wrapping the current values (no copy)."""
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.values.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def collect(self, leaves: dict[str, Tensor]) -> None:
        for k, t in leaves.items():
            if t.grad is not None:
                self.grads[k] += t.grad

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.values[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self.values[k].shape} vs {v.shape}")
            self.values[k][...] = v


@dataclass
class AdamConfig:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParameterStore, cfg: AdamConfig = AdamConfig()) -> None:
    """One bias-corrected Adam update from ``store.grads``.

    The L2 term is expected to already be part of the differentiated loss.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in store.values.items():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)


def save_checkpoint(path, store: ParameterStore, manifest: dict) -> None:
    """Write ``manifest.json`` plus one little-endian float32 blob per tensor."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    tensors = []
    for i, (name, value) in enumerate(store.values.items()):
        fname = f"t{i:03d}.bin"
        (d / fname).write_bytes(np.ascontiguousarray(value, dtype="<f4").tobytes())
        tensors.append({"name": name, "shape": list(value.shape), "file": fname,
                        "regularized": store.regularized[name]})
    doc = dict(manifest)
    doc["format_version"] = CHECKPOINT_VERSION
    doc["tensors"] = tensors
    (d / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, dtype=np.float32) -> tuple[ParameterStore, dict]:
    d = Path(path)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mf}")
    doc = json.loads(mf.read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    store = ParameterStore(dtype)
    for t in doc["tensors"]:
        raw = np.frombuffer((d / t["file"]).read_bytes(), dtype="<f4")
        shape = tuple(t["shape"])
        if raw.size != int(np.prod(shape)):
            raise ValueError(f"tensor {t['name']}: expected {np.prod(shape)} values, found {raw.size}")
        store.add(t["name"], raw.reshape(shape), regularize=t.get("regularized", True))
    return store, doc

"""
Clasificación sin etiquetas en el grafo objetivo a partir de clasificadores
preentrenados en otros grafos.

- CCCM: consistencia entre las salidas de los clasificadores fuente sobre z
  y proyecciones de la salida del clasificador objetivo.
- CDR: enrutamiento dinámico (estilo cápsulas) de los vectores de etiqueta
  fuente ajustados de dimensión; el clasificador objetivo persigue v.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from diagnostics_logger import diagnostics
from graph_io import GraphDataset
from logger_config import logger
from metrics import Timer, record_metric
from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ContractError, NumericError
from src.layers import Linear, MLP, Module, xavier_uniform
from src.optim import Adam
from training import RunMode, TrainingState, fine_tune


# -- frozen source classifiers ----------------------------------------------------

@dataclass
class FrozenHead:
    source: str
    layers: List[Tuple[np.ndarray, np.ndarray]]

    @property
    def num_classes(self) -> int:
        return int(self.layers[-1][0].shape[1])

    def __call__(self, z: Tensor) -> Tensor:
        x = z
        for idx, (weight, bias) in enumerate(self.layers):
            x = ad.matmul(x, Tensor(weight)) + bias
            if idx < len(self.layers) - 1:
                x = ad.relu(x)
        return ad.softmax_rows(x)


@dataclass
class CrossClassifierBank:
    heads: List[FrozenHead]

    @classmethod
    def from_model(cls, state: TrainingState, sources: Sequence[str]) -> "CrossClassifierBank":
        heads = []
        for gid in sources:
            mlp = state.model.heads[gid].classify if gid in state.model.heads else None
            if mlp is None:
                raise ContractError(f"source '{gid}' has no trained classification head")
            heads.append(FrozenHead(gid, [(layer.weight.data.copy(), layer.bias.data.copy()) for layer in mlp.layers]))
        return cls(heads)

    @property
    def sources(self) -> List[str]:
        return [h.source for h in self.heads]

    def __len__(self) -> int:
        return len(self.heads)


def cross_source_labels(z: Tensor | np.ndarray, bank: CrossClassifierBank) -> List[Tensor]:
    """One simplex row per node and source."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    with ad.no_grad():
        return [head(z) for head in bank.heads]


# -- reasoned labels ----------------------------------------------------------------

def assign_labels(distributions: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(distributions), axis=1).astype(np.int64)


@dataclass
class ReasonedLabels:
    distributions: np.ndarray
    strategy: str
    node_ids: List[str] = field(default_factory=list)
    loss_trace: List[float] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return assign_labels(self.distributions)

    @property
    def max_prob(self) -> np.ndarray:
        return self.distributions.max(axis=1)

    @property
    def entropy(self) -> np.ndarray:
        p = np.clip(self.distributions, 1e-12, 1.0)
        return -(self.distributions * np.log(p)).sum(axis=1)

    def class_histogram(self) -> Dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.distributions.shape[1])
        return {int(c): int(n) for c, n in enumerate(counts)}

    def to_csv(self, path: str | os.PathLike) -> int:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        ids = self.node_ids or [str(i) for i in range(self.distributions.shape[0])]
        with target.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["node_id", "predicted_class", "max_prob", "entropy"])
            for node, label, prob, ent in zip(ids, self.labels, self.max_prob, self.entropy):
                writer.writerow([node, int(label), repr(float(prob)), repr(float(ent))])
        return len(ids)


# -- target preparation -----------------------------------------------------------

def prepare_target(
    state: TrainingState,
    target: str,
    mode: RunMode,
    tasks: Sequence[str] = ("reconstruct", "structure"),
    epochs: int = 0,
    lr: float = 0.001,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """Unsupervised fine-tune on the target, then eval-mode representations."""
    mode.check_tasks(target, tasks)
    data = state.data(target)
    if not data.dataset.guard.locked:
        data.dataset.guard.lock("zero-label target")
    if epochs > 0 and tasks:
        fine_tune(state, target, tasks, 1.0, state.seed, epochs, lr, weight_decay, mode=mode)
    reps = state.model.encode(target, data.batch, data.dataset.features)
    diagnostics.info("TARGET_PREPARED", {"target": target, "nodes": int(reps.shape[0]), "width": int(reps.shape[1])})
    return reps


# -- CCCM -------------------------------------------------------------------------

class ProjectionMaps(Module):
    """FC^(m->l): target label space to each source label space."""

    def __init__(self, num_classes: int, bank: CrossClassifierBank, rng: np.random.Generator) -> None:
        super().__init__()
        self.maps: List[Linear] = []
        for head in bank.heads:
            self.maps.append(self.add_child(f"to_{head.source}", Linear(num_classes, head.num_classes, rng)))


def consistency_loss(target_probs: Tensor, source_probs: Sequence[Tensor], maps: ProjectionMaps) -> Tensor:
    """Mean over nodes of the summed L2 distances between source and projected target labels."""
    total = None
    for ybar, fc in zip(source_probs, maps.maps):
        yhat = ad.softmax_rows(fc(target_probs))
        dist = ad.vector_norm(ybar - yhat, axis=-1, keepdims=False)
        total = dist if total is None else total + dist
    return ad.mean(total)


def _check_reasoning_inputs(representations: np.ndarray, bank: CrossClassifierBank, num_classes: int) -> None:
    if len(bank) == 0:
        raise ContractError("reasoning needs at least one source classifier")
    if num_classes < 1:
        raise ContractError(f"target needs at least one class, got {num_classes}")
    if representations.ndim != 2 or representations.shape[0] == 0:
        raise ContractError(f"representations must be a non-empty matrix, got {representations.shape}")


def _adam_loop(loss_fn, params: Dict[str, Tensor], epochs: int, lr: float, strategy: str) -> List[float]:
    optimizer = Adam(lr=lr)
    trace: List[float] = []
    for epoch in range(epochs):
        optimizer.zero_grad(params)
        loss = loss_fn()
        value = loss.item()
        if not math.isfinite(value):
            diagnostics.error("REASONING_NUMERIC_ABORT", {"strategy": strategy, "epoch": epoch})
            raise NumericError(f"non-finite {strategy} loss at epoch {epoch}")
        loss.backward()
        optimizer.step(params)
        trace.append(value)
    return trace


def _finish(strategy: str, distributions: np.ndarray, trace: List[float], node_ids: Optional[List[str]]) -> ReasonedLabels:
    result = ReasonedLabels(distributions, strategy, list(node_ids or []), trace)
    payload = {
        "strategy": strategy,
        "final_loss": trace[-1] if trace else None,
        "mean_entropy": float(result.entropy.mean()),
        "histogram": result.class_histogram(),
    }
    diagnostics.info("REASONING_DONE", payload)
    record_metric("reasoning_mean_entropy", payload["mean_entropy"], {"strategy": strategy})
    return result


def cccm_fit(
    representations: np.ndarray,
    bank: CrossClassifierBank,
    num_classes: int,
    epochs: int = 200,
    lr: float = 0.01,
    seed: int = 0,
    head_depth: int = 1,
    node_ids: Optional[List[str]] = None,
) -> ReasonedLabels:
    _check_reasoning_inputs(representations, bank, num_classes)
    rng = np.random.default_rng([seed, 101])
    z = Tensor(representations)
    width = representations.shape[1]
    head = MLP(width, num_classes, rng, head_depth, width)
    maps = ProjectionMaps(num_classes, bank, rng)
    source_probs = cross_source_labels(z, bank)
    params = {**head.parameter_dict("target."), **maps.parameter_dict("maps.")}

    def loss_fn() -> Tensor:
        return consistency_loss(ad.softmax_rows(head(z)), source_probs, maps)

    with Timer("reasoning_fit_ms", {"strategy": "cccm"}):
        trace = _adam_loop(loss_fn, params, epochs, lr, "cccm")
    with ad.no_grad():
        probs = ad.softmax_rows(head(z)).data
    return _finish("cccm", probs, trace, node_ids)


# -- CDR --------------------------------------------------------------------------

def squash(s: Tensor) -> Tensor:
    """v = s * |s| / (1 + |s|^2); zero maps to zero."""
    norm = ad.vector_norm(s, axis=-1, keepdims=True)
    return s * norm / (1.0 + norm * norm)


def cdr_route(u_set: Sequence[Tensor], iterations: int = 3) -> Tuple[Tensor, np.ndarray]:
    """Route per-node source vectors; returns (v, final couplings c)."""
    if len(u_set) == 0:
        raise ContractError("routing needs at least one source vector")
    if iterations < 1:
        raise ContractError(f"routing iterations must be >= 1, got {iterations}")
    u = ad.stack(list(u_set), axis=-2)
    logits = np.zeros(u.shape[:-1])
    couplings = np.zeros_like(logits)
    v: Optional[Tensor] = None
    for _ in range(iterations):
        shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
        couplings = shifted / shifted.sum(axis=-1, keepdims=True)
        s = ad.tsum(u * couplings[..., None], axis=-2)
        v = squash(s)
        # b se actualiza como asignación, fuera de la cinta
        logits = logits + np.einsum("...d,...ld->...l", v.data, u.data)
    return v, couplings


def cdr_fit(
    representations: np.ndarray,
    bank: CrossClassifierBank,
    num_classes: int,
    epochs: int = 200,
    lr: float = 0.01,
    routing_iterations: int = 3,
    seed: int = 0,
    head_depth: int = 1,
    node_ids: Optional[List[str]] = None,
) -> ReasonedLabels:
    _check_reasoning_inputs(representations, bank, num_classes)
    rng = np.random.default_rng([seed, 202])
    z = Tensor(representations)
    width = representations.shape[1]
    head = MLP(width, num_classes, rng, head_depth, width)
    adjusters = {
        f"adjust.{h.source}": ad.parameter(xavier_uniform(rng, h.num_classes, num_classes), name=f"adjust.{h.source}")
        for h in bank.heads
    }
    source_probs = cross_source_labels(z, bank)
    params = {**head.parameter_dict("target."), **adjusters}

    def loss_fn() -> Tensor:
        target_probs = ad.softmax_rows(head(z))
        u_set = [ad.matmul(ybar, adjusters[f"adjust.{h.source}"]) for ybar, h in zip(source_probs, bank.heads)]
        v, _ = cdr_route(u_set, routing_iterations)
        return ad.mean(ad.vector_norm(target_probs - v, axis=-1, keepdims=False))

    with Timer("reasoning_fit_ms", {"strategy": "cdr"}):
        trace = _adam_loop(loss_fn, params, epochs, lr, "cdr")
    with ad.no_grad():
        probs = ad.softmax_rows(head(z)).data
    return _finish("cdr", probs, trace, node_ids)


# -- final evaluation ---------------------------------------------------------------

def reasoned_accuracy(reasoned: ReasonedLabels, dataset: GraphDataset, split: str = "test") -> float:
    """The only place target labels are read in zero-label runs."""
    rows = dataset.split(split)
    if rows.size == 0:
        raise ContractError(f"split '{split}' of '{dataset.graph_id}' is empty")
    with dataset.guard.released():
        truth = dataset.labels_for(rows)
    acc = float(np.mean(reasoned.labels[rows] == truth))
    logger.info("Reasoning %s on %s/%s: accuracy %.4f", reasoned.strategy, dataset.graph_id, split, acc)
    return acc

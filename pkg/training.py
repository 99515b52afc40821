"""
Entrenamiento híbrido iterativo sobre varios grafos y tareas.

Cada época es de batch completo. Si el número de filas supera `chunk_size`
se usa un paso exacto en dos fases: (1) forward por trozos sin cinta para
obtener Z, (2) pérdida y dL/dZ sobre una hoja Z, (3) re-forward de cada trozo
con el mismo generador y backward de sum(Z_c * dL/dZ_c).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from checkpoint_store import Checkpoint
from diagnostics_logger import diagnostics, log_epoch_metrics
from g5_model import (
    TASKS,
    G5Model,
    classify,
    reconstruct,
    reconstruction_loss,
    sample_negative_edges,
    structure_loss,
)
from graph_io import GraphDataset, sample_training_ratio
from logger_config import logger
from metrics import MetricRecord, Timer, record_metric
from preprocess import SubgraphBatch
from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ConfigError, ContractError, ModeViolation, NumericError, PipelineOrderError
from src.optim import Adam
from src.settings import ModelSettings, RunConfig

MODES = ("isolated", "mixed", "transfer", "apocalypse")


@dataclass
class TaskSegment:
    task: str
    epochs: int


@dataclass
class GraphPlan:
    graph_id: str
    segments: List[TaskSegment]
    lr: float
    weight_decay: float


@dataclass
class TaskSchedule:
    plans: List[GraphPlan]
    rounds: int
    universal_k: int
    seed: int
    early_stop_shift: Optional[float] = 0.01

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ContractError(f"rounds must be >= 1, got {self.rounds}")
        for plan in self.plans:
            for seg in plan.segments:
                if seg.task not in TASKS:
                    raise ContractError(f"unknown task '{seg.task}' for graph '{plan.graph_id}'")
                if seg.epochs < 1:
                    raise ContractError(f"segment {plan.graph_id}/{seg.task} needs a positive epoch count")

    @classmethod
    def from_config(cls, config: RunConfig, graph_ids: Sequence[str], tasks: Optional[Sequence[str]] = None) -> "TaskSchedule":
        rounds = config.schedule.rounds
        order = list(tasks or config.schedule.task_order)
        plans = []
        for gid in graph_ids:
            g = config.graph(gid)
            # épocas totales repartidas entre rondas, redondeo hacia arriba
            per_segment = math.ceil(int(g.epochs) / rounds)
            plans.append(GraphPlan(gid, [TaskSegment(t, per_segment) for t in order], float(g.lr), config.model.weight_decay))
        return cls(plans, rounds, config.resolved_universal_k(), config.seed, config.schedule.early_stop_shift)

    def describe(self) -> List[str]:
        lines = [f"rounds={self.rounds} universal_k={self.universal_k} seed={self.seed} early_stop_shift={self.early_stop_shift}"]
        for plan in self.plans:
            segs = " -> ".join(f"{s.task}x{s.epochs}" for s in plan.segments)
            lines.append(f"  {plan.graph_id}: lr={plan.lr:g} wd={plan.weight_decay:g} [{segs}]")
        return lines


@dataclass
class RunMode:
    name: str
    sources: List[str] = field(default_factory=list)
    target: Optional[str] = None
    ratio: float = 1.0

    def __post_init__(self) -> None:
        if self.name not in MODES:
            raise ContractError(f"unknown run mode '{self.name}'")

    def check_tasks(self, graph_id: str, tasks: Sequence[str]) -> None:
        if self.name == "apocalypse" and graph_id == self.target and "classify" in tasks:
            raise ModeViolation(f"apocalypse mode forbids supervised tasks on target '{graph_id}'")


@dataclass
class GraphData:
    dataset: GraphDataset
    batch: SubgraphBatch


@dataclass
class TrainingState:
    model: G5Model
    optimizer: Adam
    graphs: Dict[str, GraphData]
    run_id: str = "run"
    seed: int = 0
    records: List[MetricRecord] = field(default_factory=list)
    epochs_seen: Dict[str, int] = field(default_factory=dict)
    rounds_done: int = 0

    def schedule_position(self) -> Dict[str, Any]:
        """Where the run stands: finished rounds plus epochs per graph/task segment."""
        return {"rounds_done": self.rounds_done, "epochs_seen": dict(sorted(self.epochs_seen.items()))}

    def data(self, graph_id: str) -> GraphData:
        if graph_id not in self.graphs:
            raise PipelineOrderError(f"graph '{graph_id}' has not been preprocessed into this run")
        return self.graphs[graph_id]

    def record(self, graph: str, task: str, epoch: int, split: str, metric: str, value: float) -> None:
        self.records.append(MetricRecord(self.run_id, graph, task, epoch, split, metric, float(value)))


def new_state(settings: ModelSettings, universal_k: int, graphs: Dict[str, GraphData], config: RunConfig, run_id: str = "run") -> TrainingState:
    model = G5Model(settings, universal_k, config.seed)
    for gid, data in graphs.items():
        g = config.graph(gid)
        model.add_graph(gid, data.dataset.feature_dim, data.dataset.num_classes, data.batch.k, g.depth)
    optimizer = Adam(lr=0.001, weight_decay=settings.weight_decay)
    return TrainingState(model, optimizer, dict(graphs), run_id, config.seed)


# -- one epoch ----------------------------------------------------------------------

def _rng(state: TrainingState, *stream: int) -> np.random.Generator:
    return np.random.default_rng([state.seed, *stream])


def _chunked_backward(
    state: TrainingState,
    graph_id: str,
    rows: np.ndarray,
    loss_fn: Callable[[Tensor], Tensor],
    stream: Sequence[int],
) -> float:
    model = state.model
    data = state.data(graph_id)
    features = data.dataset.features
    chunk = model.settings.chunk_size
    if rows.size <= chunk:
        z = model.represent(graph_id, data.batch, features, rows, training=True, rng=_rng(state, *stream, 0))
        loss = loss_fn(z)
        loss.backward()
        return loss.item()

    bounds = [(i, start, min(rows.size, start + chunk)) for i, start in enumerate(range(0, rows.size, chunk))]
    z_all = np.zeros((rows.size, model.settings.hidden_size))
    with ad.no_grad():
        for i, lo, hi in bounds:
            z_all[lo:hi] = model.represent(graph_id, data.batch, features, rows[lo:hi], True, _rng(state, *stream, i)).data
    leaf = ad.parameter(z_all, name="z")
    loss = loss_fn(leaf)
    loss.backward()
    upstream = leaf.grad
    for i, lo, hi in bounds:
        z_chunk = model.represent(graph_id, data.batch, features, rows[lo:hi], True, _rng(state, *stream, i))
        ad.tsum(z_chunk * upstream[lo:hi]).backward()
    return loss.item()


def _epoch_loss(state: TrainingState, graph_id: str, task: str, labeled: Optional[np.ndarray], targets: Optional[np.ndarray], stream: Sequence[int]) -> float:
    data = state.data(graph_id)
    heads = state.model.heads[graph_id]
    n = data.dataset.num_nodes
    if task == "reconstruct":
        features = data.dataset.features
        return _chunked_backward(
            state, graph_id, np.arange(n),
            lambda z: reconstruction_loss(reconstruct(z, heads.reconstruct), features), stream,
        )
    if task == "structure":
        positives = data.dataset.edges
        negatives = sample_negative_edges(data.dataset, positives.shape[0], _rng(state, *stream, 10_000))
        return _chunked_backward(state, graph_id, np.arange(n), lambda z: structure_loss(z, positives, negatives), stream)
    onehot = np.eye(data.dataset.num_classes)[targets]
    return _chunked_backward(state, graph_id, labeled, lambda z: ad.cross_entropy(classify(z, heads.classify), onehot), stream)


def train_task(
    state: TrainingState,
    graph_id: str,
    task: str,
    epochs: int,
    lr: float,
    weight_decay: float,
    labeled: Optional[np.ndarray] = None,
    round_idx: int = 0,
) -> List[float]:
    """Full-batch epochs of one task; returns the per-epoch loss trace."""
    if task not in TASKS:
        raise ContractError(f"unknown task '{task}'")
    data = state.data(graph_id)
    targets = None
    if task == "classify":
        if labeled is None:
            labeled = data.dataset.split("train") if "train" in data.dataset.splits else np.zeros(0, dtype=np.int64)
        labeled = np.asarray(labeled, dtype=np.int64)
        if labeled.size == 0 or data.dataset.num_classes == 0:
            raise ContractError(
                f"classify on '{graph_id}' has no labeled nodes; use apocalypse mode for zero-label graphs"
            )
        targets = data.dataset.labels_for(labeled)
    if task == "structure" and data.dataset.num_edges == 0:
        raise ContractError(f"structure recovery on '{graph_id}' needs at least one edge")

    params = state.model.task_parameters(graph_id, task)
    state.optimizer.configure(lr, weight_decay)
    state.optimizer.zero_grad(params)
    key = f"{graph_id}/{task}"
    offset = state.epochs_seen.get(key, 0)
    graph_tag = zlib.crc32(graph_id.encode("utf-8"))
    trace: List[float] = []
    for epoch in range(epochs):
        stream = (round_idx, graph_tag, TASKS.index(task), offset + epoch)
        loss = _epoch_loss(state, graph_id, task, labeled, targets, stream)
        if not math.isfinite(loss):
            diagnostics.error("TRAIN_NUMERIC_ABORT", {"graph": graph_id, "task": task, "epoch": offset + epoch, "loss": repr(loss)})
            raise NumericError(f"non-finite {task} loss on '{graph_id}' at epoch {offset + epoch}")
        state.optimizer.step(params)
        trace.append(loss)
        log_epoch_metrics(state.run_id, graph_id, task, offset + epoch, loss, lr=lr, round=round_idx,
                          labeled=None if labeled is None else int(labeled.size))
        state.record(graph_id, task, offset + epoch, "train", "loss", loss)
    state.epochs_seen[key] = offset + epochs
    return trace


# -- evaluation ----------------------------------------------------------------------

def predict_proba(state: TrainingState, graph_id: str, rows: np.ndarray) -> np.ndarray:
    data = state.data(graph_id)
    head = state.model.heads[graph_id].classify
    if head is None:
        raise ContractError(f"graph '{graph_id}' has no classification head")
    z = state.model.encode(graph_id, data.batch.rows(rows), data.dataset.features)
    with ad.no_grad():
        return classify(Tensor(z), head).data


def evaluate_accuracy(state: TrainingState, graph_id: str, split: str = "test") -> float:
    data = state.data(graph_id)
    rows = data.dataset.split(split)
    if rows.size == 0:
        raise ContractError(f"split '{split}' of '{graph_id}' is empty")
    truth = data.dataset.labels_for(rows)
    pred = np.argmax(predict_proba(state, graph_id, rows), axis=1)
    return float(np.mean(pred == truth))


def evaluate_splits(state: TrainingState, graph_id: str, epoch: int, splits: Sequence[str] = ("train", "val", "test")) -> Dict[str, float]:
    scores: Dict[str, float] = {}
    for split in splits:
        if split not in state.data(graph_id).dataset.splits or state.data(graph_id).dataset.splits[split].size == 0:
            continue
        acc = evaluate_accuracy(state, graph_id, split)
        scores[split] = acc
        state.record(graph_id, "classify", epoch, split, "accuracy", acc)
    record_metric("accuracy", scores.get("test", float("nan")), {"graph": graph_id, "run": state.run_id, **{f"acc_{k}": v for k, v in scores.items()}})
    return scores


# -- hybrid schedule --------------------------------------------------------------

def hybrid_pretrain(
    state: TrainingState,
    sources: Sequence[str],
    schedule: TaskSchedule,
    on_round_end: Optional[Callable[[int, TrainingState], None]] = None,
) -> TrainingState:
    planned = [p.graph_id for p in schedule.plans]
    for gid in sources:
        state.data(gid)
        if gid not in planned:
            raise ContractError(f"source '{gid}' has no plan in the schedule")
    previous: Optional[Dict[str, float]] = None
    for round_idx in range(schedule.rounds):
        current: Dict[str, float] = {}
        for plan in schedule.plans:
            if plan.graph_id not in sources:
                continue
            for seg in plan.segments:
                labels = {"graph": plan.graph_id, "task": seg.task, "round": round_idx}
                with Timer("train_segment_ms", labels):
                    trace = train_task(state, plan.graph_id, seg.task, seg.epochs, plan.lr, plan.weight_decay, round_idx=round_idx)
                current[f"{plan.graph_id}/{seg.task}"] = trace[-1]
            if any(s.task == "classify" for s in plan.segments):
                epoch = state.epochs_seen.get(f"{plan.graph_id}/classify", 0)
                scores = evaluate_splits(state, plan.graph_id, epoch)
                diagnostics.info("TRAIN_ROUND_EVAL", {"graph": plan.graph_id, "round": round_idx, **scores})
        state.rounds_done = round_idx + 1
        if on_round_end is not None:
            on_round_end(round_idx, state)
        if previous is not None and schedule.early_stop_shift is not None:
            shifts = [abs(current[k] - previous[k]) / max(abs(previous[k]), 1e-12) for k in current if k in previous]
            if shifts and max(shifts) < schedule.early_stop_shift:
                diagnostics.info("TRAIN_EARLY_STOP", {"round": round_idx, "max_shift": max(shifts)})
                break
        previous = current
    return state


# -- transfer ---------------------------------------------------------------------

def transfer_init(
    checkpoint: Checkpoint,
    target: GraphData,
    config: RunConfig,
    run_id: str = "run",
    sources: Optional[Sequence[str]] = None,
) -> TrainingState:
    """Core (and source graphs, for reasoning) from the checkpoint; fresh target component and heads."""
    arch = checkpoint.metadata.get("architecture") or {}
    portal = int(arch.get("universal_k", -1))
    expected = config.resolved_universal_k()
    if portal != expected:
        raise ConfigError(f"checkpoint portal k={portal} does not match run config k={expected}")
    target_id = target.dataset.graph_id
    if target_id in arch.get("graphs", {}):
        raise ConfigError(f"target '{target_id}' was already trained into the checkpoint")
    settings = ModelSettings.model_validate(arch["model"])
    model = G5Model(settings, portal, config.seed)
    keep = list(arch["graphs"]) if sources is None else list(sources)
    for gid in keep:
        spec = arch["graphs"].get(gid)
        if spec is None:
            raise ConfigError(f"source '{gid}' is not in the checkpoint")
        model.add_graph(gid, spec["feature_dim"], spec["num_classes"], spec["k"], spec["depth"])
    model.load_state_dict(checkpoint.tensors, prefixes=["core.", *[f"graph.{gid}." for gid in keep]])
    model.add_graph(target_id, target.dataset.feature_dim, target.dataset.num_classes, target.batch.k, config.graph(target_id).depth)
    diagnostics.info("TRANSFER_INIT", {"target": target_id, "sources": keep, "portal_k": portal})
    optimizer = Adam(lr=0.001, weight_decay=settings.weight_decay)
    return TrainingState(model, optimizer, {target_id: target}, run_id, config.seed)


def fine_tune(
    state: TrainingState,
    target: str,
    tasks: Sequence[str],
    ratio: float,
    seed: int,
    epochs: int,
    lr: float,
    weight_decay: float,
    mode: Optional[RunMode] = None,
) -> TrainingState:
    """Supervised segments see only the sampled label subset; unsupervised ones use the whole graph."""
    if mode is not None:
        mode.check_tasks(target, tasks)
    labeled = None
    if "classify" in tasks:
        dataset = state.data(target).dataset
        labeled = sample_training_ratio(dataset, ratio, seed)
        if labeled.size == 0:
            pool = dataset.split("train").size
            raise ContractError(
                f"training ratio {ratio:g} of the {pool} train nodes of '{target}' selects 0 labeled nodes; "
                f"raise --ratio to at least {1.0 / pool:.4f}"
            )
        logger.info("Fine-tune %s with %d labeled nodes (ratio %.2f)", target, labeled.size, ratio)
    for task in tasks:
        if epochs <= 0:
            break
        with Timer("finetune_segment_ms", {"graph": target, "task": task}):
            train_task(state, target, task, epochs, lr, weight_decay, labeled=labeled if task == "classify" else None)
    return state

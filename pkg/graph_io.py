"""
Carga de grafos de citas (formato Planetoid crudo) y gestión de particiones.

- `load_citation_graph`: `.content` + `.cites` → `GraphDataset` simple y no dirigido.
- `make_split` / `sample_training_ratio`: particiones deterministas por semilla.
- `LabelGuard`: bloquea la lectura de etiquetas (modo sin etiquetas en el objetivo).
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from diagnostics_logger import diagnostics
from logger_config import logger
from src.errors import ContractError, EmptyDatasetError, LabelAccessError, ParseError

SPLIT_NAMES = ("train", "val", "test")

# Protocolo Planetoid: 20 nodos etiquetados por clase, 500 de validación y 1000 de test
PLANETOID_PER_CLASS = 20
PLANETOID_VAL = 500
PLANETOID_TEST = 1000


class LabelGuard:
    """Lock on label reads; while locked every read raises `LabelAccessError`."""

    def __init__(self) -> None:
        self.locked = False
        self.reason: Optional[str] = None
        self.denied = 0

    def lock(self, reason: str) -> None:
        self.locked = True
        self.reason = reason

    def unlock(self) -> None:
        self.locked = False
        self.reason = None

    @contextlib.contextmanager
    def released(self) -> Iterator[None]:
        previous, reason = self.locked, self.reason
        self.unlock()
        try:
            yield
        finally:
            if previous:
                self.lock(reason or "restored")

    def check(self, graph_id: str) -> None:
        if self.locked:
            self.denied += 1
            diagnostics.warn("LABEL_ACCESS_DENIED", {"graph": graph_id, "reason": self.reason})
            raise LabelAccessError(f"labels of '{graph_id}' are locked ({self.reason})")


@dataclass(eq=False)
class GraphDataset:
    graph_id: str
    node_ids: List[str]
    features: np.ndarray
    _labels: np.ndarray
    edges: np.ndarray
    class_names: List[str] = field(default_factory=list)
    splits: Dict[str, np.ndarray] = field(default_factory=dict)
    edge_weight: float = 1.0
    guard: LabelGuard = field(default_factory=LabelGuard)

    def __post_init__(self) -> None:
        n = len(self.node_ids)
        if self.features.shape[0] != n:
            raise ContractError(f"{self.graph_id}: {self.features.shape[0]} feature rows for {n} nodes")
        if self._labels.shape != (n,):
            raise ContractError(f"{self.graph_id}: label vector length {self._labels.shape} for {n} nodes")
        for name, idx in self.splits.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ContractError(f"{self.graph_id}: split '{name}' holds an index outside 0..{n - 1}")
        self._adjacency: Optional[sp.csr_matrix] = None

    # -- shape ---------------------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    # -- labels (guarded) -----------------------------------------------------
    @property
    def labels(self) -> np.ndarray:
        self.guard.check(self.graph_id)
        return self._labels

    def labels_for(self, indices: np.ndarray) -> np.ndarray:
        labels = self.labels[np.asarray(indices, dtype=np.int64)]
        if (labels < 0).any():
            raise ContractError(f"{self.graph_id}: unlabeled nodes inside a supervised split")
        return labels

    def labeled_mask(self) -> np.ndarray:
        """Presence of a label only; does not reveal classes."""
        return self._labels >= 0

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise ContractError(f"{self.graph_id}: split '{name}' not defined (call make_split first)")
        return self.splits[name]

    # -- structure ------------------------------------------------------------
    def adjacency(self) -> sp.csr_matrix:
        if self._adjacency is None:
            n = self.num_nodes
            if self.num_edges:
                rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
                cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
                data = np.full(rows.shape[0], self.edge_weight)
            else:
                rows = cols = np.zeros(0, dtype=np.int64)
                data = np.zeros(0)
            self._adjacency = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        return self._adjacency

    def degrees(self) -> np.ndarray:
        return np.asarray((self.adjacency() != 0).sum(axis=1)).reshape(-1).astype(np.int64)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.graph_id.encode("utf-8"))
        digest.update(np.ascontiguousarray(self.features).tobytes())
        digest.update(np.ascontiguousarray(self.edges).tobytes())
        return digest.hexdigest()

    def with_splits(self, splits: Dict[str, np.ndarray]) -> "GraphDataset":
        return dataclasses.replace(self, splits={k: np.asarray(v, dtype=np.int64) for k, v in splits.items()})

    # -- construction ---------------------------------------------------------
    @classmethod
    def from_arrays(
        cls,
        graph_id: str,
        features: np.ndarray,
        edges: Sequence[Sequence[int]],
        labels: Optional[Sequence[int]] = None,
        num_classes: Optional[int] = None,
        splits: Optional[Dict[str, Sequence[int]]] = None,
    ) -> "GraphDataset":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ContractError(f"{graph_id}: features must be a matrix, got shape {features.shape}")
        n = features.shape[0]
        label_arr = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(label_arr.max()) + 1 if (label_arr >= 0).any() else 0
        return cls(
            graph_id=graph_id,
            node_ids=[str(i) for i in range(n)],
            features=features,
            _labels=label_arr,
            edges=canonical_edges(np.asarray(edges, dtype=np.int64).reshape(-1, 2), n),
            class_names=[str(c) for c in range(num_classes)],
            splits={k: np.asarray(v, dtype=np.int64) for k, v in (splits or {}).items()},
        )


def canonical_edges(pairs: np.ndarray, num_nodes: int) -> np.ndarray:
    """Undirected, self-loop free, unique (u < v) pairs sorted lexicographically."""
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if pairs.min() < 0 or pairs.max() >= num_nodes:
        raise ContractError(f"edge endpoint outside 0..{num_nodes - 1}")
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keep = lo != hi
    stacked = np.stack([lo[keep], hi[keep]], axis=1)
    return np.unique(stacked, axis=0).astype(np.int64) if stacked.size else np.zeros((0, 2), dtype=np.int64)


@dataclass
class MultiSourceSet:
    graphs: List[GraphDataset]

    def __post_init__(self) -> None:
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise ContractError(f"graph ids must be unique, got {ids}")

    @property
    def ids(self) -> List[str]:
        return [g.graph_id for g in self.graphs]

    def get(self, graph_id: str) -> GraphDataset:
        for g in self.graphs:
            if g.graph_id == graph_id:
                return g
        raise ContractError(f"graph '{graph_id}' not in the multi-source set")

    def __iter__(self) -> Iterator[GraphDataset]:
        return iter(self.graphs)

    def __len__(self) -> int:
        return len(self.graphs)


def _read_lines(path: Path) -> List[str]:
    with path.open("r", encoding="utf-8") as handle:
        return handle.read().splitlines()


def load_citation_graph(content_path: str | Path, cites_path: str | Path, graph_id: str) -> GraphDataset:
    content_path, cites_path = Path(content_path), Path(cites_path)
    content_lines = _read_lines(content_path)
    rows = [(no, line.split()) for no, line in enumerate(content_lines, start=1) if line.strip()]
    if not rows:
        raise EmptyDatasetError(f"{content_path}: no node lines")

    width = len(rows[0][1])
    if width < 2:
        raise ParseError(str(content_path), rows[0][0], "expected '<id> <features...> <label>'")
    index: Dict[str, int] = {}
    features = np.zeros((len(rows), width - 2), dtype=np.float64)
    raw_labels: List[str] = []
    for pos, (line_no, tokens) in enumerate(rows):
        if len(tokens) != width:
            raise ParseError(str(content_path), line_no, f"expected {width} fields, found {len(tokens)}")
        node_id = tokens[0]
        if node_id in index:
            raise ParseError(str(content_path), line_no, f"duplicate node id '{node_id}'")
        try:
            features[pos] = [float(tok) for tok in tokens[1:-1]]
        except ValueError as exc:
            raise ParseError(str(content_path), line_no, f"non-numeric feature ({exc})") from exc
        index[node_id] = pos
        raw_labels.append(tokens[-1])

    class_names = sorted(set(raw_labels))
    class_index = {name: i for i, name in enumerate(class_names)}
    labels = np.array([class_index[name] for name in raw_labels], dtype=np.int64)

    pairs: List[tuple[int, int]] = []
    unknown = 0
    for line_no, line in enumerate(_read_lines(cites_path), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise ParseError(str(cites_path), line_no, f"expected '<citing> <cited>', found {len(tokens)} fields")
        citing, cited = tokens
        if citing not in index or cited not in index:
            unknown += 1
            continue
        pairs.append((index[cited], index[citing]))

    n = len(rows)
    edges = canonical_edges(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), n)
    if unknown:
        diagnostics.warn("CITES_UNKNOWN_ENDPOINTS", {"graph": graph_id, "dropped": unknown, "path": str(cites_path)})
    logger.info(
        "Loaded %s: %d nodes, %d undirected edges, %d features, %d classes",
        graph_id, n, edges.shape[0], features.shape[1], len(class_names),
    )
    return GraphDataset(
        graph_id=graph_id,
        node_ids=list(index.keys()),
        features=features,
        _labels=labels,
        edges=edges,
        class_names=class_names,
    )


def _floor_count(ratio: float, size: int) -> int:
    # tolerancia para productos como 0.29 * 100
    return int(math.floor(ratio * size + 1e-9))


def _check_ratio(ratio: float, what: str) -> None:
    if not (0.0 < ratio <= 1.0):
        raise ContractError(f"{what} must lie in (0, 1], got {ratio}")


def make_split(
    dataset: GraphDataset,
    seed: int,
    policy: str = "planetoid",
    train_ratio: float = 0.6,
    val_ratio: float = 0.2,
) -> GraphDataset:
    """Attach disjoint train/val/test index lists.

    `planetoid` takes the first 20 labeled nodes of each class (file order) for
    train, then the next 500 and 1000 of the remaining labeled nodes for val and
    test. `random` permutes labeled nodes with `seed`.
    """
    if policy == "planetoid":
        splits = _per_class_split(dataset)
    elif policy == "random":
        _check_ratio(train_ratio, "train ratio")
        if not (0.0 <= val_ratio < 1.0) or train_ratio + val_ratio > 1.0:
            raise ContractError(f"invalid ratios train={train_ratio} val={val_ratio}")
        pool = np.flatnonzero(dataset.labeled_mask())
        perm = pool[np.random.default_rng(seed).permutation(pool.size)]
        n_train = _floor_count(train_ratio, pool.size)
        n_val = _floor_count(val_ratio, pool.size)
        splits = {
            "train": np.sort(perm[:n_train]),
            "val": np.sort(perm[n_train:n_train + n_val]),
            "test": np.sort(perm[n_train + n_val:]),
        }
    else:
        raise ContractError(f"unknown split policy '{policy}'")
    logger.info(
        "Split %s (%s): %s", dataset.graph_id, policy, {k: int(v.size) for k, v in splits.items()}
    )
    return dataset.with_splits(splits)


def _per_class_split(
    dataset: GraphDataset,
    per_class: int = PLANETOID_PER_CLASS,
    n_val: int = PLANETOID_VAL,
    n_test: int = PLANETOID_TEST,
) -> Dict[str, np.ndarray]:
    labels = dataset._labels
    train: List[int] = []
    for cls in range(dataset.num_classes):
        train.extend(np.flatnonzero(labels == cls)[:per_class].tolist())
    train_arr = np.sort(np.asarray(train, dtype=np.int64))
    rest = np.setdiff1d(np.flatnonzero(labels >= 0), train_arr)
    return {"train": train_arr, "val": rest[:n_val], "test": rest[n_val:n_val + n_test]}


def sample_training_ratio(dataset: GraphDataset, ratio: float, seed: int) -> np.ndarray:
    """Prefix of a seeded permutation of the train split; nested across ratios."""
    _check_ratio(ratio, "training ratio")
    train = dataset.split("train")
    if train.size == 0:
        raise ContractError(f"{dataset.graph_id}: empty training split")
    perm = np.random.default_rng(seed).permutation(train.size)
    count = _floor_count(ratio, train.size)
    return train[perm[:count]]

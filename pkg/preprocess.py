"""
Precomputation for linkless subgraphs: intimacy (personalized PageRank),
top-k contexts, WL role codes and hop distances, plus the on-disk cache.

Intimacy is S = alpha * (I - (1 - alpha) * A_norm)^-1 with A_norm = A D^-1.
Small graphs use a dense solve; larger ones iterate row blocks of S with a
sparse A_norm so the full |V| x |V| matrix is never materialized.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

from checkpoint_store import load_preprocess_cache, save_preprocess_cache
from diagnostics_logger import diagnostics
from graph_io import GraphDataset
from logger_config import logger
from metrics import Timer, record_metric
from src.errors import ContractError, G5Error, NumericError, PipelineOrderError
from src.settings import PreprocessSettings

CACHE_SCHEMA = 1


# -- intimacy ------------------------------------------------------------------

def normalize_adjacency(dataset: GraphDataset) -> sp.csr_matrix:
    """Column-stochastic A D^-1; isolated nodes transition to themselves."""
    adj = dataset.adjacency().astype(np.float64).tocsr()
    deg = np.asarray(adj.sum(axis=0)).reshape(-1)
    isolated = deg == 0
    inv = np.where(isolated, 0.0, 1.0 / np.where(isolated, 1.0, deg))
    norm = adj @ sp.diags(inv)
    if isolated.any():
        norm = norm + sp.diags(isolated.astype(np.float64))
    return sp.csr_matrix(norm)


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 1.0):
        raise ContractError(f"alpha must lie in (0, 1), got {alpha}")


def _dense_intimacy(a_norm: sp.csr_matrix, alpha: float) -> np.ndarray:
    n = a_norm.shape[0]
    system = np.eye(n) - (1.0 - alpha) * a_norm.toarray()
    try:
        return np.linalg.solve(system, alpha * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"intimacy system is singular: {exc}") from exc


def _power_rows(a_norm_t: sp.csr_matrix, rows: np.ndarray, alpha: float, tol: float, max_iter: int) -> np.ndarray:
    """Rows `rows` of S via Y <- alpha E + (1 - alpha) A_norm^T Y (a max-norm contraction)."""
    n = a_norm_t.shape[0]
    seed = np.zeros((n, rows.size))
    seed[rows, np.arange(rows.size)] = alpha
    y = seed.copy()
    for _ in range(max_iter):
        nxt = seed + (1.0 - alpha) * (a_norm_t @ y)
        delta = float(np.abs(nxt - y).max()) if y.size else 0.0
        y = nxt
        if delta < tol:
            break
    else:
        raise NumericError(f"power iteration did not reach tol={tol} in {max_iter} iterations")
    return y.T


def compute_intimacy(dataset: GraphDataset, alpha: float = 0.15, method: str = "dense", tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Full intimacy matrix; columns sum to 1."""
    _check_alpha(alpha)
    a_norm = normalize_adjacency(dataset)
    if method == "dense":
        return _dense_intimacy(a_norm, alpha)
    if method == "power":
        rows = np.arange(dataset.num_nodes)
        return _power_rows(sp.csr_matrix(a_norm.T), rows, alpha, tol, max_iter)
    raise ContractError(f"unknown intimacy method '{method}'")


def iter_intimacy_rows(
    dataset: GraphDataset,
    alpha: float,
    method: str = "auto",
    dense_limit: int = 5000,
    block_size: int = 512,
    tol: float = 1e-10,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (row ids, S[rows, :]) blocks."""
    _check_alpha(alpha)
    n = dataset.num_nodes
    if method == "auto":
        method = "dense" if n <= dense_limit else "power"
    if method == "dense":
        full = compute_intimacy(dataset, alpha, "dense")
        for start in range(0, n, block_size):
            rows = np.arange(start, min(n, start + block_size))
            yield rows, full[rows]
        return
    if method != "power":
        raise ContractError(f"unknown intimacy method '{method}'")
    a_norm_t = sp.csr_matrix(normalize_adjacency(dataset).T)
    for start in range(0, n, block_size):
        rows = np.arange(start, min(n, start + block_size))
        yield rows, _power_rows(a_norm_t, rows, alpha, tol, 10_000)


# -- contexts ------------------------------------------------------------------

def _rank_rows(values: np.ndarray, row_ids: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    n = values.shape[1]
    width = min(k, n - 1)
    masked = values.copy()
    masked[np.arange(row_ids.size), row_ids] = -np.inf
    ids = np.broadcast_to(np.arange(n), masked.shape)
    # descendente por intimidad, empate por id ascendente
    order = np.lexsort((ids, -masked), axis=-1)[:, :width]
    return order.astype(np.int64), np.take_along_axis(values, order, axis=1)


def top_k_context(S: np.ndarray, v: int, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """The k nodes with highest S[v, :] other than v, ties by ascending id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    ids, values = _rank_rows(np.asarray(S[v:v + 1], dtype=np.float64), np.array([v]), k)
    return ids[0], values[0]


@dataclass
class ContextTable:
    ids: np.ndarray
    values: np.ndarray

    @property
    def width(self) -> int:
        return int(self.ids.shape[1])


def build_context_table(
    dataset: GraphDataset,
    k: int,
    alpha: float = 0.15,
    method: str = "auto",
    dense_limit: int = 5000,
    block_size: int = 512,
    tol: float = 1e-10,
) -> ContextTable:
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    n = dataset.num_nodes
    width = min(k, n - 1)
    ids = np.zeros((n, width), dtype=np.int64)
    values = np.zeros((n, width), dtype=np.float64)
    for rows, block in iter_intimacy_rows(dataset, alpha, method, dense_limit, block_size, tol):
        ids[rows], values[rows] = _rank_rows(block, rows, k)
    return ContextTable(ids=ids, values=values)


# -- WL codes ------------------------------------------------------------------

def wl_refine(dataset: GraphDataset, iterations: int = 2) -> np.ndarray:
    """1-WL refinement from degree colors; signatures compressed by sorted order."""
    if iterations < 1:
        raise ContractError(f"WL iterations must be >= 1, got {iterations}")
    adj = dataset.adjacency().tocsr()
    colors = dataset.degrees().astype(np.int64)
    for _ in range(iterations):
        signatures = []
        for v in range(dataset.num_nodes):
            neigh = adj.indices[adj.indptr[v]:adj.indptr[v + 1]]
            signatures.append((int(colors[v]), tuple(sorted(int(c) for c in colors[neigh]))))
        palette = {sig: idx for idx, sig in enumerate(sorted(set(signatures)))}
        refined = np.array([palette[sig] for sig in signatures], dtype=np.int64)
        if np.array_equal(refined, colors):
            break
        colors = refined
    return colors


# -- hop distances -------------------------------------------------------------

def hop_distances(
    dataset: GraphDataset,
    targets: Sequence[int],
    contexts: np.ndarray,
    cap: int = 20,
    block_size: int = 512,
) -> np.ndarray:
    """BFS hop count target -> each context node; unreachable or farther than `cap` gives `cap`."""
    if cap < 1:
        raise ContractError(f"hop cap must be >= 1, got {cap}")
    targets = np.asarray(targets, dtype=np.int64)
    contexts = np.asarray(contexts, dtype=np.int64).reshape(targets.size, -1)
    out = np.zeros(contexts.shape, dtype=np.int64)
    if contexts.size == 0:
        return out
    adj = dataset.adjacency()
    for start in range(0, targets.size, block_size):
        stop = min(targets.size, start + block_size)
        dist = shortest_path(adj, method="D", directed=False, unweighted=True, indices=targets[start:stop])
        dist = np.atleast_2d(dist)
        picked = np.take_along_axis(dist, contexts[start:stop], axis=1)
        picked = np.where(np.isfinite(picked), picked, cap)
        out[start:stop] = np.minimum(picked, cap).astype(np.int64)
    return out


# -- subgraph batches ----------------------------------------------------------

@dataclass
class PreprocessArtifacts:
    graph_id: str
    context: Optional[ContextTable] = None
    wl_codes: Optional[np.ndarray] = None
    hops: Optional[np.ndarray] = None
    meta: Dict[str, Any] = field(default_factory=dict)


@dataclass
class SubgraphRecord:
    node_ids: np.ndarray
    features: np.ndarray
    wl: np.ndarray
    rank: np.ndarray
    hop: np.ndarray


@dataclass
class SubgraphBatch:
    """Row i holds target i at position 0 followed by its ranked context."""

    graph_id: str
    k: int
    nodes: np.ndarray
    wl: np.ndarray
    rank: np.ndarray
    hop: np.ndarray
    intimacy: np.ndarray

    @property
    def num_records(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def width(self) -> int:
        return int(self.nodes.shape[1])

    def record(self, i: int, features: np.ndarray) -> SubgraphRecord:
        return SubgraphRecord(
            node_ids=self.nodes[i],
            features=features[self.nodes[i]],
            wl=self.wl[i],
            rank=self.rank[i],
            hop=self.hop[i],
        )

    def rows(self, index: np.ndarray) -> "SubgraphBatch":
        return SubgraphBatch(
            graph_id=self.graph_id,
            k=self.k,
            nodes=self.nodes[index],
            wl=self.wl[index],
            rank=self.rank[index],
            hop=self.hop[index],
            intimacy=self.intimacy[index],
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"nodes": self.nodes, "wl": self.wl, "rank": self.rank, "hop": self.hop, "intimacy": self.intimacy}


def build_subgraph_batch(dataset: GraphDataset, k: int, artifacts: Optional[PreprocessArtifacts]) -> SubgraphBatch:
    if artifacts is None:
        raise PipelineOrderError(f"{dataset.graph_id}: no preprocessing artifacts")
    missing = [name for name in ("context", "wl_codes", "hops") if getattr(artifacts, name) is None]
    if missing:
        raise PipelineOrderError(f"{dataset.graph_id}: missing artifacts {missing}; run preprocessing first")
    if artifacts.graph_id != dataset.graph_id:
        raise PipelineOrderError(f"artifacts for '{artifacts.graph_id}' used with '{dataset.graph_id}'")
    n = dataset.num_nodes
    width = min(k, n - 1)
    context = artifacts.context
    if context.ids.shape[0] != n or context.width < width or artifacts.hops.shape[1] < width:
        raise PipelineOrderError(f"{dataset.graph_id}: artifacts built for a smaller k than {k}")
    targets = np.arange(n, dtype=np.int64)[:, None]
    # prefijo: el contexto de k menor es prefijo del de k mayor
    nodes = np.concatenate([targets, context.ids[:, :width]], axis=1)
    hop = np.concatenate([np.zeros((n, 1), dtype=np.int64), artifacts.hops[:, :width]], axis=1)
    rank = np.broadcast_to(np.arange(width + 1, dtype=np.int64), nodes.shape).copy()
    return SubgraphBatch(
        graph_id=dataset.graph_id,
        k=k,
        nodes=nodes,
        wl=artifacts.wl_codes[nodes],
        rank=rank,
        hop=hop,
        intimacy=context.values[:, :width].copy(),
    )


def compute_artifacts(dataset: GraphDataset, k: int, settings: PreprocessSettings) -> PreprocessArtifacts:
    labels = {"graph": dataset.graph_id, "k": k}
    with Timer("preprocess_intimacy_ms", labels):
        context = build_context_table(
            dataset, k, settings.alpha, settings.intimacy_method,
            settings.dense_limit, settings.block_size, settings.power_tol,
        )
    with Timer("preprocess_wl_ms", labels):
        wl_codes = wl_refine(dataset, settings.wl_iterations)
    with Timer("preprocess_hops_ms", labels):
        hops = hop_distances(dataset, np.arange(dataset.num_nodes), context.ids, settings.hop_cap, settings.block_size)
    record_metric("preprocess_wl_codes", int(wl_codes.max()) + 1 if wl_codes.size else 0, labels)
    return PreprocessArtifacts(graph_id=dataset.graph_id, context=context, wl_codes=wl_codes, hops=hops)


def cache_path(cache_dir: str | Path, graph_id: str, k: int, settings: PreprocessSettings) -> Path:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", graph_id)
    name = f"{safe}_k{k}_a{settings.alpha:g}_wl{settings.wl_iterations}_hop{settings.hop_cap}.g5c"
    return Path(cache_dir) / name


def _cache_meta(dataset: GraphDataset, k: int, settings: PreprocessSettings) -> Dict[str, Any]:
    return {
        "schema": CACHE_SCHEMA,
        "graph": dataset.graph_id,
        "k": int(k),
        "alpha": float(settings.alpha),
        "wl_iterations": int(settings.wl_iterations),
        "hop_cap": int(settings.hop_cap),
        "fingerprint": dataset.fingerprint(),
    }


def preprocess_graph(
    dataset: GraphDataset,
    k: int,
    settings: PreprocessSettings,
    cache_dir: Optional[str | Path] = None,
    refresh: bool = False,
) -> Tuple[SubgraphBatch, bool]:
    """Return (batch, cache_was_fresh). Without `cache_dir` nothing touches disk."""
    expected = _cache_meta(dataset, k, settings)
    path = cache_path(cache_dir, dataset.graph_id, k, settings) if cache_dir is not None else None
    if path is not None and path.exists() and not refresh:
        try:
            meta, arrays = load_preprocess_cache(path)
            stored = {key: meta.get(key) for key in expected}
            if stored == expected:
                diagnostics.info("PREPROCESS_CACHE_FRESH", {"graph": dataset.graph_id, "path": str(path)})
                return SubgraphBatch(graph_id=dataset.graph_id, k=k, **arrays), True
            diagnostics.warn("PREPROCESS_CACHE_STALE", {"graph": dataset.graph_id, "path": str(path)})
        except G5Error as exc:
            diagnostics.warn("PREPROCESS_CACHE_UNREADABLE", {"graph": dataset.graph_id, "path": str(path), "error": str(exc)})

    artifacts = compute_artifacts(dataset, k, settings)
    batch = build_subgraph_batch(dataset, k, artifacts)
    if path is not None:
        save_preprocess_cache(path, expected, batch.arrays())
        logger.info("Preprocess cache written: %s", path)
    return batch, False

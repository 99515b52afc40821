"""
Red G5: componentes de entrada por grafo, núcleo universal compartido,
unificación de tamaño, fusión por media y cabezas por tarea.

Forma de cada paso (B nodos objetivo, T = k_m + 1 filas por subgrafo):
    embed (B, T, d_h) -> input_forward (B, T, d_h) -> unify (B, k + 1, d_h)
    -> universal_forward (B, k + 1, d_h) -> fuse (B, d_h)
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from checkpoint_store import Checkpoint
from graph_io import GraphDataset
from preprocess import SubgraphBatch, SubgraphRecord
from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ConfigError, ContractError, ShapeError
from src.layers import LayerNorm, Linear, MLP, Module
from src.settings import ModelSettings

TASKS = ("reconstruct", "structure", "classify")


# -- fixed sinusoidal encoders ----------------------------------------------------

def position_table(indices: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal codes for an integer array; output shape indices.shape + (dim,)."""
    if dim % 2:
        raise ContractError(f"position embedding dim must be even, got {dim}")
    idx = np.asarray(indices, dtype=np.float64)[..., None]
    freq = np.power(float(base), -np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = idx * freq
    out = np.empty(idx.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def position_embedding(index: int, dim: int, base: float = 10000.0) -> np.ndarray:
    if index < 0:
        raise ContractError(f"position index must be >= 0, got {index}")
    return position_table(np.asarray(index), dim, base)


# -- G-Transformer ------------------------------------------------------------------

class GTransformerLayer(Module):
    """Multi-head self-attention over subgraph rows with a graph-raw residual.

    attention -> (+ W_raw X_raw) -> add & norm -> feed-forward -> add & norm
    """

    def __init__(self, settings: ModelSettings, rng: np.random.Generator) -> None:
        super().__init__()
        d = settings.hidden_size
        if d % settings.heads:
            raise ConfigError(f"hidden size {d} not divisible by {settings.heads} heads")
        self.width = d
        self.heads = settings.heads
        self.head_dim = d // settings.heads
        self.hidden_dropout = settings.hidden_dropout
        self.attention_dropout = settings.attention_dropout
        self.query = self.add_child("query", Linear(d, d, rng))
        self.key = self.add_child("key", Linear(d, d, rng))
        self.value = self.add_child("value", Linear(d, d, rng))
        self.output = self.add_child("output", Linear(d, d, rng))
        self.graph_raw: Optional[Linear] = None
        if settings.residual == "graph_raw":
            self.graph_raw = self.add_child("graph_raw", Linear(d, d, rng))
        self.norm1 = self.add_child("norm1", LayerNorm(d))
        self.ff_in = self.add_child("ff_in", Linear(d, settings.intermediate_size, rng))
        self.ff_out = self.add_child("ff_out", Linear(settings.intermediate_size, d, rng))
        self.norm2 = self.add_child("norm2", LayerNorm(d))

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).swapaxes(1, 2)

    def attention(
        self,
        z: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        valid: Optional[np.ndarray] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Return (concatenated head contexts before the output projection, weights (B, h, T, T))."""
        b, t, _ = z.shape
        q = self._split_heads(self.query(z))
        k = self._split_heads(self.key(z))
        v = self._split_heads(self.value(z))
        scores = ad.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if valid is not None:
            bias = np.where(np.asarray(valid, dtype=bool), 0.0, -1e9)[:, None, None, :]
            scores = scores + bias
        weights = ad.softmax(scores, axis=-1)
        dropped = ad.dropout(weights, self.attention_dropout, rng, training)
        context = ad.matmul(dropped, v).swapaxes(1, 2).reshape(b, t, self.width)
        return context, weights

    def __call__(
        self,
        z: Tensor,
        x_raw: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        valid: Optional[np.ndarray] = None,
    ) -> Tensor:
        if z.shape != x_raw.shape:
            raise ShapeError("G-Transformer input and raw residual differ", z.shape, x_raw.shape)
        if z.shape[-1] != self.width:
            raise ShapeError("G-Transformer width mismatch", z.shape, (self.width,))
        squeeze = z.ndim == 2
        if squeeze:
            z = z.reshape(1, *z.shape)
            x_raw = x_raw.reshape(1, *x_raw.shape)
        context, _ = self.attention(z, training, rng, valid)
        attended = ad.dropout(self.output(context), self.hidden_dropout, rng, training)
        if self.graph_raw is not None:
            attended = attended + self.graph_raw(x_raw)
        h = self.norm1(z + attended)
        ff = self.ff_out(ad.gelu(self.ff_in(h)))
        ff = ad.dropout(ff, self.hidden_dropout, rng, training)
        out = self.norm2(h + ff)
        if squeeze:
            out = out.reshape(out.shape[1], out.shape[2])
        return out


def g_transformer_layer(
    z: Tensor,
    x_raw: Tensor,
    layer: GTransformerLayer,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    valid: Optional[np.ndarray] = None,
) -> Tensor:
    return layer(z, x_raw, training, rng, valid)


# -- per-graph input component ----------------------------------------------------

class InputComponent(Module):
    def __init__(self, graph_id: str, feature_dim: int, k: int, depth: int, settings: ModelSettings, rng: np.random.Generator) -> None:
        super().__init__()
        self.graph_id = graph_id
        self.feature_dim = feature_dim
        self.k = k
        self.width = settings.hidden_size
        self.position_base = settings.position_base
        self.feature_embed = self.add_child("feature_embed", Linear(feature_dim, settings.hidden_size, rng))
        self.layers: List[GTransformerLayer] = []
        for idx in range(depth):
            self.layers.append(self.add_child(f"layer{idx}", GTransformerLayer(settings, rng)))

    def positions(self, wl: np.ndarray, rank: np.ndarray, hop: np.ndarray) -> np.ndarray:
        base = self.position_base
        return position_table(wl, self.width, base) + position_table(rank, self.width, base) + position_table(hop, self.width, base)


def embed_subgraph(record: SubgraphRecord, comp: InputComponent) -> Tensor:
    """Row j = e_x + e_wl + e_rank + e_hop for the node at position j (target at 0)."""
    features = np.asarray(record.features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != comp.feature_dim:
        raise ShapeError(f"feature width mismatch for graph '{comp.graph_id}'", features.shape, (comp.feature_dim,))
    e_x = comp.feature_embed(Tensor(features))
    return e_x + comp.positions(record.wl, record.rank, record.hop)


def embed_batch(batch: SubgraphBatch, features: np.ndarray, comp: InputComponent, rows: Optional[np.ndarray] = None) -> Tensor:
    """Batched embed_subgraph; the feature map runs once per distinct node."""
    if features.shape[1] != comp.feature_dim:
        raise ShapeError(f"feature width mismatch for graph '{comp.graph_id}'", features.shape, (comp.feature_dim,))
    part = batch if rows is None else batch.rows(rows)
    uniq, inverse = np.unique(part.nodes, return_inverse=True)
    mapped = comp.feature_embed(Tensor(features[uniq]))
    e_x = ad.take_rows(mapped, np.asarray(inverse).reshape(part.nodes.shape))
    return e_x + comp.positions(part.wl, part.rank, part.hop)


def input_forward(h0: Tensor, comp: InputComponent, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    if h0.shape[-1] != comp.width:
        raise ShapeError("input component width mismatch", h0.shape, (comp.width,))
    h = h0
    for layer in comp.layers:
        h = layer(h, h0, training, rng)
    return h


# -- unification / core / fusion --------------------------------------------------

def unify(h: Tensor, k: int) -> Tensor:
    """Prune trailing rows or zero-pad to k + 1 rows; row 0 (the target) always survives."""
    if k < 0:
        raise ContractError(f"portal size must be >= 0, got {k}")
    rows = h.shape[-2]
    if rows < 1:
        raise ContractError("unify needs at least the target row")
    if rows == k + 1:
        return h
    if rows > k + 1:
        return h[..., : k + 1, :]
    pad_shape = h.shape[:-2] + (k + 1 - rows, h.shape[-1])
    return ad.concat([h, Tensor(np.zeros(pad_shape))], axis=-2)


class UniversalCore(Module):
    def __init__(self, k: int, settings: ModelSettings, rng: np.random.Generator) -> None:
        super().__init__()
        self.k = k
        self.width = settings.hidden_size
        self.layers: List[GTransformerLayer] = []
        for idx in range(settings.depth):
            self.layers.append(self.add_child(f"layer{idx}", GTransformerLayer(settings, rng)))


def universal_forward(
    z0: Tensor,
    core: UniversalCore,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    valid: Optional[np.ndarray] = None,
) -> Tensor:
    if z0.shape[-2] != core.k + 1:
        raise ShapeError(f"universal core expects {core.k + 1} rows (portal k={core.k})", z0.shape)
    z = z0
    for layer in core.layers:
        z = layer(z, z0, training, rng, valid)
    return z


def fuse(z: Tensor) -> Tensor:
    if z.shape[-2] == 0:
        raise ContractError("fuse needs a non-empty matrix")
    return ad.mean(z, axis=-2)


# -- heads --------------------------------------------------------------------------

class HeadSet(Module):
    """Reconstruction and classification heads of one graph; the link scorer is parameter free."""

    def __init__(self, feature_dim: int, num_classes: int, settings: ModelSettings, rng: np.random.Generator) -> None:
        super().__init__()
        d = settings.hidden_size
        self.reconstruct = self.add_child("reconstruct", MLP(d, feature_dim, rng, settings.head_depth, d))
        self.classify: Optional[MLP] = None
        if num_classes > 0:
            self.classify = self.add_child("classify", MLP(d, num_classes, rng, settings.head_depth, d))


def classify(z: Tensor, head: MLP) -> Tensor:
    return ad.softmax_rows(head(z))


def reconstruct(z: Tensor, head: MLP) -> Tensor:
    return head(z)


def reconstruction_loss(estimate: Tensor, features: np.ndarray) -> Tensor:
    return ad.mse_loss(estimate, Tensor(features))


def link_logits(z_u: Tensor, z_v: Tensor) -> Tensor:
    return ad.tsum(z_u * z_v, axis=-1) * (1.0 / math.sqrt(z_u.shape[-1]))


def score_links(z_u: Tensor, z_v: Tensor) -> Tensor:
    if z_u.shape != z_v.shape:
        raise ShapeError("link endpoints differ in shape", z_u.shape, z_v.shape)
    return ad.sigmoid(link_logits(z_u, z_v))


def sample_negative_edges(dataset: GraphDataset, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform non-edges (u < v), with replacement; empty when the graph is complete."""
    n = dataset.num_nodes
    possible = n * (n - 1) // 2 - dataset.num_edges
    if count <= 0 or possible <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    existing = dataset.edges[:, 0] * n + dataset.edges[:, 1]
    out: List[np.ndarray] = []
    have = 0
    while have < count:
        draw = rng.integers(0, n, size=(2 * (count - have) + 8, 2))
        lo, hi = np.minimum(draw[:, 0], draw[:, 1]), np.maximum(draw[:, 0], draw[:, 1])
        ok = (lo != hi) & ~np.isin(lo * n + hi, existing)
        pairs = np.stack([lo[ok], hi[ok]], axis=1)[: count - have]
        out.append(pairs)
        have += pairs.shape[0]
    return np.concatenate(out, axis=0).astype(np.int64)


def structure_loss(z: Tensor, positives: np.ndarray, negatives: np.ndarray) -> Tensor:
    """BCE over positive edges (label 1) and sampled non-edges (label 0); z rows indexed by node id."""
    pairs = np.concatenate([positives, negatives], axis=0).astype(np.int64)
    if pairs.shape[0] == 0:
        raise ContractError("structure recovery needs at least one edge")
    labels = np.concatenate([np.ones(positives.shape[0]), np.zeros(negatives.shape[0])])
    logits = link_logits(ad.take_rows(z, pairs[:, 0]), ad.take_rows(z, pairs[:, 1]))
    return ad.binary_cross_entropy_with_logits(logits, labels)


# -- full model -------------------------------------------------------------------

@dataclass
class GraphSpec:
    feature_dim: int
    num_classes: int
    k: int
    depth: int


def _graph_seed(seed: int, graph_id: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(graph_id.encode("utf-8")), stream])


class G5Model(Module):
    """Shared universal core plus per-graph input components and heads."""

    def __init__(self, settings: ModelSettings, universal_k: int, seed: int = 0) -> None:
        super().__init__()
        self.settings = settings
        self.universal_k = universal_k
        self.seed = seed
        self.core = self.add_child("core", UniversalCore(universal_k, settings, np.random.default_rng([seed, 0])))
        self.components: Dict[str, InputComponent] = {}
        self.heads: Dict[str, HeadSet] = {}
        self.graphs: Dict[str, GraphSpec] = {}

    def add_graph(self, graph_id: str, feature_dim: int, num_classes: int, k: int, depth: int = 1) -> None:
        if graph_id in self.graphs:
            raise ContractError(f"graph '{graph_id}' already has an input component")
        self.graphs[graph_id] = GraphSpec(feature_dim, num_classes, k, depth)
        self.components[graph_id] = self.add_child(
            f"graph.{graph_id}.input",
            InputComponent(graph_id, feature_dim, k, depth, self.settings, _graph_seed(self.seed, graph_id, 1)),
        )
        self.heads[graph_id] = self.add_child(
            f"graph.{graph_id}.heads",
            HeadSet(feature_dim, num_classes, self.settings, _graph_seed(self.seed, graph_id, 2)),
        )

    def component(self, graph_id: str) -> InputComponent:
        if graph_id not in self.components:
            raise ContractError(f"no input component for graph '{graph_id}'")
        return self.components[graph_id]

    # -- parameter ownership -------------------------------------------------------
    def core_parameters(self) -> Dict[str, Tensor]:
        return self.core.parameter_dict("core.")

    def graph_parameters(self, graph_id: str) -> Dict[str, Tensor]:
        self.component(graph_id)
        return {
            **self.components[graph_id].parameter_dict(f"graph.{graph_id}.input."),
            **self.heads[graph_id].parameter_dict(f"graph.{graph_id}.heads."),
        }

    def task_parameters(self, graph_id: str, task: str) -> Dict[str, Tensor]:
        """Parameters one (graph, task) segment may update."""
        params = {**self.core_parameters(), **self.components[graph_id].parameter_dict(f"graph.{graph_id}.input.")}
        heads = self.heads[graph_id]
        if task == "reconstruct":
            params.update(heads.reconstruct.parameter_dict(f"graph.{graph_id}.heads.reconstruct."))
        elif task == "classify":
            if heads.classify is None:
                raise ContractError(f"graph '{graph_id}' has no classification head")
            params.update(heads.classify.parameter_dict(f"graph.{graph_id}.heads.classify."))
        elif task != "structure":
            raise ContractError(f"unknown task '{task}'")
        return params

    # -- forward ----------------------------------------------------------------------
    def valid_rows(self, batch: SubgraphBatch) -> Optional[np.ndarray]:
        if not self.settings.mask_padding:
            return None
        present = min(batch.width, self.universal_k + 1)
        valid = np.zeros(self.universal_k + 1, dtype=bool)
        valid[:present] = True
        return np.broadcast_to(valid, (batch.num_records, self.universal_k + 1))

    def represent(
        self,
        graph_id: str,
        batch: SubgraphBatch,
        features: np.ndarray,
        rows: Optional[np.ndarray] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        comp = self.component(graph_id)
        part = batch if rows is None else batch.rows(rows)
        h0 = embed_batch(part, features, comp)
        h = input_forward(h0, comp, training, rng)
        z0 = unify(h, self.universal_k)
        z = universal_forward(z0, self.core, training, rng, self.valid_rows(part))
        return fuse(z)

    def encode(self, graph_id: str, batch: SubgraphBatch, features: np.ndarray, chunk_size: Optional[int] = None) -> np.ndarray:
        """Eval-mode representations for every record, chunked."""
        chunk = chunk_size or self.settings.chunk_size
        out = np.zeros((batch.num_records, self.settings.hidden_size))
        with ad.no_grad():
            for start in range(0, batch.num_records, chunk):
                rows = np.arange(start, min(batch.num_records, start + chunk))
                out[rows] = self.represent(graph_id, batch, features, rows).data
        return out

    # -- persistence ----------------------------------------------------------------
    def architecture(self) -> Dict[str, Any]:
        return {
            "model": self.settings.model_dump(),
            "universal_k": self.universal_k,
            "seed": self.seed,
            "graphs": {gid: vars(spec).copy() for gid, spec in self.graphs.items()},
        }

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, tensors: Mapping[str, np.ndarray], prefixes: Optional[Sequence[str]] = None) -> List[str]:
        """Copy matching tensors in; with `prefixes`, only names under them are required."""
        loaded = []
        for name, param in self.named_parameters():
            if prefixes is not None and not any(name.startswith(p) for p in prefixes):
                continue
            if name not in tensors:
                raise ContractError(f"checkpoint lacks parameter '{name}'")
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != param.shape:
                raise ShapeError(f"checkpoint tensor '{name}' has the wrong shape", value.shape, param.shape)
            param.data[...] = value
            loaded.append(name)
        return loaded

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
        meta = {"architecture": self.architecture()}
        meta.update(metadata or {})
        return Checkpoint(tensors=self.state_dict(), metadata=meta)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "G5Model":
        arch = checkpoint.metadata.get("architecture")
        if not arch:
            raise ContractError("checkpoint has no architecture block")
        model = cls(ModelSettings.model_validate(arch["model"]), int(arch["universal_k"]), int(arch.get("seed", 0)))
        for gid, spec in arch["graphs"].items():
            model.add_graph(gid, spec["feature_dim"], spec["num_classes"], spec["k"], spec["depth"])
        model.load_state_dict(checkpoint.tensors)
        return model


# -- analytic parameter count -----------------------------------------------------

def layer_parameter_count(settings: ModelSettings) -> int:
    d, f = settings.hidden_size, settings.intermediate_size
    count = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    if settings.residual == "graph_raw":
        count += d * d + d
    return count


def _mlp_count(d: int, out: int, depth: int) -> int:
    return (depth - 1) * (d * d + d) + d * out + out


def count_parameters(settings: ModelSettings, graphs: Iterable[GraphSpec]) -> int:
    """Closed-form count of (core, components, heads) for the given graphs."""
    d = settings.hidden_size
    total = settings.depth * layer_parameter_count(settings)
    for spec in graphs:
        total += spec.feature_dim * d + d + spec.depth * layer_parameter_count(settings)
        total += _mlp_count(d, spec.feature_dim, settings.head_depth)
        if spec.num_classes > 0:
            total += _mlp_count(d, spec.num_classes, settings.head_depth)
    return total

import math

import numpy as np
import pytest

from checkpoint_store import MAGIC, encode_payload, load_checkpoint, save_checkpoint
from conftest import make_labeled_graph
from g5_model import (
    G5Model,
    GraphSpec,
    GTransformerLayer,
    InputComponent,
    classify,
    count_parameters,
    embed_batch,
    embed_subgraph,
    fuse,
    position_embedding,
    position_table,
    reconstruct,
    reconstruction_loss,
    sample_negative_edges,
    score_links,
    structure_loss,
    unify,
    universal_forward,
)
from graph_io import GraphDataset
from preprocess import SubgraphBatch, SubgraphRecord, preprocess_graph
from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ConfigError, ContractError, ShapeError


def test_position_embedding_of_zero():
    np.testing.assert_allclose(position_embedding(0, 4), [0.0, 1.0, 0.0, 1.0])
    with pytest.raises(ContractError):
        position_embedding(0, 3)
    with pytest.raises(ContractError):
        position_embedding(-1, 4)


def test_zero_features_embed_to_three_zero_codes(small_settings, rng):
    comp = InputComponent("g", 3, 2, 1, small_settings, rng)
    zeros = np.zeros(3, dtype=np.int64)
    record = SubgraphRecord(np.arange(3), np.zeros((3, 3)), zeros, zeros, zeros)
    out = embed_subgraph(record, comp)
    expected = 3 * position_embedding(0, small_settings.hidden_size)
    np.testing.assert_allclose(out.data, np.tile(expected, (3, 1)))


def test_layer_keeps_shape_and_checks_inputs(small_settings, rng):
    layer = GTransformerLayer(small_settings, rng)
    z = Tensor(rng.normal(size=(2, 4, 8)))
    assert layer(z, z).shape == (2, 4, 8)
    assert layer(Tensor(z.data[0]), Tensor(z.data[0])).shape == (4, 8)
    with pytest.raises(ShapeError):
        layer(z, Tensor(np.zeros((2, 3, 8))))


def test_heads_must_divide_hidden_size(small_settings, rng):
    with pytest.raises(ConfigError):
        GTransformerLayer(small_settings.model_copy(update={"heads": 3}), rng)


def test_attention_rows_are_distributions_and_respect_mask(small_settings, rng):
    layer = GTransformerLayer(small_settings, rng)
    z = Tensor(rng.normal(size=(1, 4, 8)))
    _, weights = layer.attention(z)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0)
    valid = np.array([[True, True, False, False]])
    _, masked = layer.attention(z, valid=valid)
    assert masked.data[..., 2:].max() < 1e-12


def test_layer_is_permutation_equivariant(small_settings, rng):
    layer = GTransformerLayer(small_settings, rng)
    z = rng.normal(size=(1, 5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    out = layer(Tensor(z), Tensor(z)).data
    out_perm = layer(Tensor(z[:, perm]), Tensor(z[:, perm])).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-10)


def test_layer_gradients_match_finite_differences(small_settings, rng):
    layer = GTransformerLayer(small_settings, rng)
    z = Tensor(rng.normal(size=(2, 3, 8)))
    params = [p for _, p in layer.named_parameters()]
    err = ad.check_gradients(lambda: ad.tsum(layer(z, z) * z), params, np.random.default_rng(2), coords=4)
    assert err < 1e-4


def test_unify_prunes_pads_or_returns_input():
    h = Tensor(np.arange(24.0).reshape(2, 4, 3))
    assert unify(h, 3) is h
    np.testing.assert_array_equal(unify(h, 1).data, h.data[:, :2])
    padded = unify(h, 5).data
    assert padded.shape == (2, 6, 3)
    np.testing.assert_array_equal(padded[:, 4:], 0.0)


def test_universal_forward_rejects_wrong_portal(small_settings):
    model = G5Model(small_settings, universal_k=3)
    with pytest.raises(ShapeError):
        universal_forward(Tensor(np.zeros((1, 3, 8))), model.core)


def test_fuse_is_row_mean():
    z = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    np.testing.assert_allclose(fuse(z).data, [[2.0, 3.0]])


def test_link_score_is_symmetric_sigmoid():
    a, b = Tensor([[1.0, 0.0, 2.0, 1.0]]), Tensor([[0.5, 1.0, 1.0, 0.0]])
    ab, ba = score_links(a, b).item(), score_links(b, a).item()
    assert ab == ba
    assert ab == pytest.approx(1.0 / (1.0 + math.exp(-2.5 / 2.0)))


def test_negative_edges_avoid_existing_links(labeled_graph):
    neg = sample_negative_edges(labeled_graph, 50, np.random.default_rng(0))
    existing = {tuple(e) for e in labeled_graph.edges.tolist()}
    assert neg.shape == (50, 2)
    assert all(u < v and (u, v) not in existing for u, v in neg.tolist())
    complete = GraphDataset.from_arrays("k3", np.eye(3), [(0, 1), (1, 2), (0, 2)])
    assert sample_negative_edges(complete, 5, np.random.default_rng(0)).shape == (0, 2)


def test_structure_loss_needs_pairs():
    with pytest.raises(ContractError):
        structure_loss(Tensor(np.ones((2, 2))), np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2), dtype=np.int64))


def _model_with_graph(settings, dataset, k, preprocess_settings):
    batch, _ = preprocess_graph(dataset, k, preprocess_settings)
    model = G5Model(settings, universal_k=k, seed=0)
    model.add_graph(dataset.graph_id, dataset.feature_dim, dataset.num_classes, k, 1)
    return model, batch


def test_represent_shape_and_parameter_count(small_settings, labeled_graph, preprocess_settings):
    model, batch = _model_with_graph(small_settings, labeled_graph, 4, preprocess_settings)
    z = model.represent("toy", batch, labeled_graph.features, rows=np.arange(5))
    assert z.shape == (5, small_settings.hidden_size)
    specs = [GraphSpec(labeled_graph.feature_dim, labeled_graph.num_classes, 4, 1)]
    assert model.num_parameters() == count_parameters(small_settings, specs)


def test_encode_chunks_agree_with_single_pass(small_settings, labeled_graph, preprocess_settings):
    model, batch = _model_with_graph(small_settings, labeled_graph, 4, preprocess_settings)
    whole = model.encode("toy", batch, labeled_graph.features, chunk_size=1000)
    chunked = model.encode("toy", batch, labeled_graph.features, chunk_size=7)
    np.testing.assert_allclose(whole, chunked, atol=1e-12)


def test_full_model_gradients(small_settings, preprocess_settings):
    dataset = make_labeled_graph(n=8, extra_edges=4)
    model, batch = _model_with_graph(small_settings, dataset, 3, preprocess_settings)
    head = model.heads["toy"].reconstruct
    params = [
        model.core.layers[0].query.weight,
        model.component("toy").feature_embed.weight,
        model.component("toy").layers[0].graph_raw.weight,
        head.layers[0].weight,
    ]

    def loss_fn():
        z = model.represent("toy", batch, dataset.features)
        return reconstruction_loss(reconstruct(z, head), dataset.features)

    assert ad.check_gradients(loss_fn, params, np.random.default_rng(3), coords=5) < 1e-4


def test_checkpoint_round_trip_preserves_outputs(small_settings, labeled_graph, preprocess_settings):
    model, batch = _model_with_graph(small_settings, labeled_graph, 4, preprocess_settings)
    restored = G5Model.from_checkpoint(model.to_checkpoint({"run": "x"}))
    np.testing.assert_array_equal(
        model.encode("toy", batch, labeled_graph.features),
        restored.encode("toy", batch, labeled_graph.features),
    )


def test_graphs_with_different_k_share_one_core(small_settings, preprocess_settings):
    a, b = make_labeled_graph("a", seed=1), make_labeled_graph("b", n=20, feature_dim=4, seed=2)
    batch_a, _ = preprocess_graph(a, 2, preprocess_settings)
    batch_b, _ = preprocess_graph(b, 6, preprocess_settings)
    model = G5Model(small_settings, universal_k=4)
    model.add_graph("a", a.feature_dim, 3, 2)
    model.add_graph("b", b.feature_dim, 3, 6)
    assert model.represent("a", batch_a, a.features).shape == (a.num_nodes, 8)
    assert model.represent("b", batch_b, b.features).shape == (b.num_nodes, 8)
    with pytest.raises(ContractError):
        model.add_graph("a", a.feature_dim, 3, 2)


def test_classification_loss_gradients_through_model(small_settings, preprocess_settings):
    dataset = make_labeled_graph(n=8, extra_edges=4)
    model, batch = _model_with_graph(small_settings, dataset, 3, preprocess_settings)
    head = model.heads["toy"].classify
    rows = np.array([0, 2, 5])
    onehot = np.eye(dataset.num_classes)[dataset.labels[rows]]
    params = [
        model.core.layers[0].key.weight,
        model.component("toy").feature_embed.bias,
        model.component("toy").layers[0].graph_raw.weight,
        head.layers[0].weight,
        head.layers[0].bias,
    ]

    def loss_fn():
        z = model.represent("toy", batch, dataset.features, rows)
        return ad.cross_entropy(classify(z, head), onehot)

    assert ad.check_gradients(loss_fn, params, np.random.default_rng(6), coords=5) < 1e-4


def test_structure_loss_gradients_with_sampled_negatives(small_settings, preprocess_settings):
    dataset = make_labeled_graph(n=8, extra_edges=4)
    model, batch = _model_with_graph(small_settings, dataset, 3, preprocess_settings)
    negatives = sample_negative_edges(dataset, dataset.num_edges, np.random.default_rng(7))
    assert negatives.shape[0] > 0
    params = [
        model.core.layers[0].value.weight,
        model.component("toy").feature_embed.weight,
        model.component("toy").layers[0].graph_raw.bias,
    ]

    def loss_fn():
        z = model.represent("toy", batch, dataset.features)
        return structure_loss(z, dataset.edges, negatives)

    assert ad.check_gradients(loss_fn, params, np.random.default_rng(8), coords=5) < 1e-4


def test_unify_to_portal_fifteen_prunes_wide_and_pads_narrow(rng):
    wide = Tensor(rng.normal(size=(31, 32, 8)))
    pruned = unify(wide, 15).data
    assert pruned.shape == (31, 16, 8)
    np.testing.assert_array_equal(pruned, wide.data[:, :16])

    narrow = Tensor(rng.normal(size=(31, 8, 8)))
    padded = unify(narrow, 15).data
    assert padded.shape == (31, 16, 8)
    np.testing.assert_array_equal(padded[:, :8], narrow.data)
    np.testing.assert_array_equal(padded[:, 8:], 0.0)
    assert unify(Tensor(padded), 15).shape == (31, 16, 8)


def test_swapping_tied_context_nodes_permutes_rows(small_settings, preprocess_settings):
    dataset = make_labeled_graph(n=12)
    model, batch = _model_with_graph(small_settings, dataset, 4, preprocess_settings)
    comp = model.component("toy")
    perm = np.array([0, 2, 1, 4, 3])
    # la posición (rank) se queda en su fila; el resto viaja con el nodo
    ranks = position_table(batch.rank[0], small_settings.hidden_size)

    record = batch.record(0, dataset.features)
    swapped = SubgraphRecord(record.node_ids[perm], record.features[perm], record.wl[perm], record.rank, record.hop[perm])
    base, moved = embed_subgraph(record, comp).data, embed_subgraph(swapped, comp).data
    np.testing.assert_allclose(moved - ranks, (base - ranks)[perm], atol=1e-12)

    swapped_batch = SubgraphBatch(
        batch.graph_id, batch.k, batch.nodes[:, perm], batch.wl[:, perm], batch.rank, batch.hop[:, perm], batch.intimacy
    )
    whole = embed_batch(batch, dataset.features, comp).data
    whole_moved = embed_batch(swapped_batch, dataset.features, comp).data
    np.testing.assert_allclose(whole_moved - ranks, (whole - ranks)[:, perm], atol=1e-12)
    np.testing.assert_allclose(whole_moved[0], moved, atol=1e-12)


def test_checkpoint_bytes_follow_parameter_count(tmp_path, small_settings):
    a, b = make_labeled_graph("a", seed=1), make_labeled_graph("b", n=20, feature_dim=4, seed=2)
    model = G5Model(small_settings, universal_k=4)
    model.add_graph("a", a.feature_dim, 3, 2)
    model.add_graph("b", b.feature_dim, 0, 6)
    specs = [GraphSpec(a.feature_dim, 3, 2, 1), GraphSpec(b.feature_dim, 0, 6, 1)]
    expected = count_parameters(small_settings, specs)

    checkpoint = model.to_checkpoint({"run": "bytes"})
    assert sum(t.size for t in checkpoint.tensors.values()) == expected == model.num_parameters()
    assert checkpoint.nbytes() == 8 * expected

    path = save_checkpoint(checkpoint, tmp_path / "m.g5ck")
    meta = {**checkpoint.metadata, "kind": "checkpoint"}
    framing = sum(2 + len(name.encode("utf-8")) + 2 + 1 + 8 * t.ndim for name, t in checkpoint.tensors.items())
    payload = encode_payload(meta, checkpoint.tensors)
    assert len(payload) - len(encode_payload(meta, {})) == 8 * expected + framing
    header = path.stat().st_size - len(payload)
    assert header == len(MAGIC) + 4 + 32 + 8

    restored = load_checkpoint(path)
    assert sum(t.size for t in restored.tensors.values()) == expected

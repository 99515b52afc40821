import numpy as np
import pytest

from conftest import make_labeled_graph
from graph_io import GraphDataset
from preprocess import (
    PreprocessArtifacts,
    build_context_table,
    build_subgraph_batch,
    cache_path,
    compute_artifacts,
    compute_intimacy,
    hop_distances,
    preprocess_graph,
    top_k_context,
    wl_refine,
)
from src.errors import ContractError, PipelineOrderError


def test_two_node_intimacy_matches_closed_form():
    ds = GraphDataset.from_arrays("pair", np.eye(2), [(0, 1)])
    S = compute_intimacy(ds, alpha=0.15)
    np.testing.assert_allclose(S, [[0.5405, 0.4595], [0.4595, 0.5405]], atol=1e-4)


def test_intimacy_columns_sum_to_one_and_methods_agree(labeled_graph):
    dense = compute_intimacy(labeled_graph, 0.15, "dense")
    power = compute_intimacy(labeled_graph, 0.15, "power", tol=1e-13)
    np.testing.assert_allclose(dense.sum(axis=0), np.ones(labeled_graph.num_nodes), atol=1e-10)
    np.testing.assert_allclose(dense, power, atol=1e-9)


def test_isolated_node_keeps_its_mass():
    ds = GraphDataset.from_arrays("iso", np.eye(3), [(0, 1)])
    S = compute_intimacy(ds, 0.15)
    assert S[2, 2] == pytest.approx(1.0)


def test_alpha_outside_unit_interval():
    ds = GraphDataset.from_arrays("pair", np.eye(2), [(0, 1)])
    with pytest.raises(ContractError):
        compute_intimacy(ds, alpha=1.0)


def test_top_k_excludes_self_and_breaks_ties_by_id():
    S = np.array([[0.9, 0.2, 0.5, 0.5], [0.1, 0.9, 0.1, 0.1], [0.0] * 4, [0.0] * 4])
    ids, values = top_k_context(S, 0, 2)
    assert ids.tolist() == [2, 3]
    ids, _ = top_k_context(S, 1, 3)
    assert ids.tolist() == [0, 2, 3]
    assert values.tolist() == [0.5, 0.5]


def test_context_width_caps_at_graph_size(triangle_graph):
    table = build_context_table(triangle_graph, k=7)
    assert table.width == 2
    for v in range(3):
        assert v not in table.ids[v]


def test_context_for_smaller_k_is_a_prefix(labeled_graph):
    small = build_context_table(labeled_graph, k=3)
    large = build_context_table(labeled_graph, k=7)
    np.testing.assert_array_equal(large.ids[:, :3], small.ids)


def test_wl_codes_separate_roles(path_graph, star_graph, triangle_graph):
    codes = wl_refine(path_graph, 2)
    assert codes[0] == codes[4] and codes[1] == codes[3]
    assert len({codes[0], codes[1], codes[2]}) == 3
    star = wl_refine(star_graph, 2)
    assert len(set(star[1:])) == 1 and star[0] != star[1]
    assert len(set(wl_refine(triangle_graph, 2))) == 1


def test_wl_is_invariant_under_relabeling(path_graph):
    perm = np.array([4, 2, 0, 1, 3])
    inverse = np.argsort(perm)
    relabeled = GraphDataset.from_arrays("p2", np.eye(5), inverse[path_graph.edges])
    a, b = wl_refine(path_graph, 2), wl_refine(relabeled, 2)
    np.testing.assert_array_equal(a, b[inverse])


def test_hop_distances_cap_unreachable():
    ds = GraphDataset.from_arrays("split", np.eye(4), [(0, 1), (1, 2)])
    hops = hop_distances(ds, [0, 0], np.array([[1, 2], [3, 3]]), cap=5)
    assert hops.tolist() == [[1, 2], [5, 5]]
    capped = hop_distances(ds, [0], np.array([[2]]), cap=1)
    assert capped.tolist() == [[1]]


def test_subgraph_batch_layout(labeled_graph, preprocess_settings):
    artifacts = compute_artifacts(labeled_graph, 4, preprocess_settings)
    batch = build_subgraph_batch(labeled_graph, 4, artifacts)

    assert batch.nodes.shape == (labeled_graph.num_nodes, 5)
    np.testing.assert_array_equal(batch.nodes[:, 0], np.arange(labeled_graph.num_nodes))
    np.testing.assert_array_equal(batch.rank[0], np.arange(5))
    np.testing.assert_array_equal(batch.hop[:, 0], 0)
    record = batch.record(3, labeled_graph.features)
    np.testing.assert_array_equal(record.features, labeled_graph.features[batch.nodes[3]])


def test_batch_without_artifacts_is_a_pipeline_error(labeled_graph):
    with pytest.raises(PipelineOrderError):
        build_subgraph_batch(labeled_graph, 3, None)
    with pytest.raises(PipelineOrderError):
        build_subgraph_batch(labeled_graph, 3, PreprocessArtifacts(graph_id=labeled_graph.graph_id))


def test_cache_is_reused_then_invalidated(tmp_path, labeled_graph, preprocess_settings):
    first, fresh = preprocess_graph(labeled_graph, 4, preprocess_settings, tmp_path)
    assert not fresh
    again, fresh = preprocess_graph(labeled_graph, 4, preprocess_settings, tmp_path)
    assert fresh
    np.testing.assert_array_equal(first.nodes, again.nodes)
    np.testing.assert_array_equal(first.intimacy, again.intimacy)

    changed = make_labeled_graph(seed=5)
    path = cache_path(tmp_path, changed.graph_id, 4, preprocess_settings)
    assert path.exists()
    _, fresh = preprocess_graph(changed, 4, preprocess_settings, tmp_path)
    assert not fresh


def test_corrupt_cache_is_recomputed(tmp_path, labeled_graph, preprocess_settings, caplog):
    preprocess_graph(labeled_graph, 4, preprocess_settings, tmp_path)
    path = cache_path(tmp_path, labeled_graph.graph_id, 4, preprocess_settings)
    path.write_bytes(b"garbage")
    with caplog.at_level("WARNING"):
        _, fresh = preprocess_graph(labeled_graph, 4, preprocess_settings, tmp_path)
    assert not fresh
    assert any("PREPROCESS_CACHE_UNREADABLE" in rec.getMessage() for rec in caplog.records)


# -- propiedades sobre grafos aleatorios ---------------------------------------

def _random_graph(seed, n, p, isolated=0):
    gen = np.random.default_rng(seed)
    upper = np.triu(gen.random((n, n)) < p, k=1)
    upper[:, n - isolated:] = False
    edges = np.argwhere(upper)
    return GraphDataset.from_arrays(f"rand{seed}", gen.normal(size=(n, 2)), edges), gen


def _floyd_warshall(ds):
    n = ds.num_nodes
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    dist[ds.edges[:, 0], ds.edges[:, 1]] = 1.0
    dist[ds.edges[:, 1], ds.edges[:, 0]] = 1.0
    for m in range(n):
        dist = np.minimum(dist, dist[:, m:m + 1] + dist[m:m + 1, :])
    return dist


@pytest.mark.parametrize("seed", range(6))
def test_hop_distances_match_all_pairs_oracle(seed):
    ds, _ = _random_graph(seed, 14, 0.2, isolated=2)
    dist = _floyd_warshall(ds)
    assert np.isinf(dist).any()
    everyone = np.tile(np.arange(ds.num_nodes), (ds.num_nodes, 1))
    for cap in (2, 20):
        expected = np.where(np.isfinite(dist), np.minimum(dist, cap), cap).astype(np.int64)
        got = hop_distances(ds, np.arange(ds.num_nodes), everyone, cap=cap, block_size=5)
        np.testing.assert_array_equal(got, expected)


@pytest.mark.parametrize("seed", range(8))
def test_wl_codes_survive_random_relabeling(seed):
    ds, gen = _random_graph(seed, 8, 0.35)
    perm = gen.permutation(ds.num_nodes)
    relabeled = GraphDataset.from_arrays("copy", ds.features[np.argsort(perm)], perm[ds.edges])
    for iterations in (1, 2, 3):
        a, b = wl_refine(ds, iterations), wl_refine(relabeled, iterations)
        assert sorted(a.tolist()) == sorted(b.tolist())
        np.testing.assert_array_equal(a, b[perm])


def _intimacy_oracle(ds, alpha):
    n = ds.num_nodes
    adj = np.zeros((n, n))
    adj[ds.edges[:, 0], ds.edges[:, 1]] = 1.0
    adj[ds.edges[:, 1], ds.edges[:, 0]] = 1.0
    deg = adj.sum(axis=0)
    norm = adj / np.where(deg > 0, deg, 1.0)
    norm[np.diag_indices(n)] += deg == 0
    return alpha * np.linalg.inv(np.eye(n) - (1.0 - alpha) * norm)


@pytest.mark.parametrize("seed", range(5))
def test_power_intimacy_matches_dense_inverse(seed):
    ds, _ = _random_graph(seed, 20, 0.12, isolated=1)
    oracle = _intimacy_oracle(ds, 0.15)
    power = compute_intimacy(ds, 0.15, "power", tol=1e-13)
    np.testing.assert_allclose(power, oracle, atol=1e-9)
    np.testing.assert_allclose(compute_intimacy(ds, 0.15, "dense"), oracle, atol=1e-10)

import math

import numpy as np
import pytest

from apocalypse import (
    CrossClassifierBank,
    FrozenHead,
    ProjectionMaps,
    ReasonedLabels,
    assign_labels,
    cccm_fit,
    cdr_fit,
    cdr_route,
    consistency_loss,
    cross_source_labels,
    prepare_target,
    reasoned_accuracy,
    squash,
)
from conftest import make_labeled_graph
from preprocess import preprocess_graph
from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ContractError, LabelAccessError, ModeViolation
from src.layers import MLP
from src.settings import GraphSettings, RunConfig
from training import GraphData, RunMode, new_state, train_task, transfer_init


def _bank(rng, width=8, classes=(3, 4)):
    heads = [FrozenHead(f"s{i}", [(rng.normal(size=(width, c)), rng.normal(size=c))]) for i, c in enumerate(classes)]
    return CrossClassifierBank(heads)


def test_single_unit_source_routes_to_half():
    u = Tensor(np.array([[0.6, 0.8, 0.0]]))
    v, couplings = cdr_route([u], iterations=3)
    np.testing.assert_allclose(v.data, u.data / 2.0)
    np.testing.assert_allclose(couplings, [[1.0]])


def test_routing_needs_sources_and_maps_zero_to_zero():
    with pytest.raises(ContractError):
        cdr_route([], 3)
    v, _ = cdr_route([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3)))], 2)
    np.testing.assert_array_equal(v.data, 0.0)


def test_routing_ignores_source_order(rng):
    u = [Tensor(rng.normal(size=(5, 3))) for _ in range(3)]
    v, c = cdr_route(u, 3)
    v_rev, c_rev = cdr_route(u[::-1], 3)
    np.testing.assert_allclose(v.data, v_rev.data, atol=1e-12)
    np.testing.assert_allclose(c, c_rev[:, ::-1], atol=1e-12)
    np.testing.assert_allclose(c.sum(axis=1), 1.0)


def test_squash_keeps_norm_below_one(rng):
    s = Tensor(rng.normal(scale=10.0, size=(6, 4)))
    norms = np.linalg.norm(squash(s).data, axis=1)
    assert (norms < 1.0).all()


def test_routing_gradient_with_uniform_couplings(rng):
    ybar = [Tensor(rng.dirichlet(np.ones(3), size=4)), Tensor(rng.dirichlet(np.ones(2), size=4))]
    weights = [ad.parameter(rng.normal(size=(3, 3))), ad.parameter(rng.normal(size=(2, 3)))]
    target = rng.dirichlet(np.ones(3), size=4)

    def loss_fn():
        v, _ = cdr_route([ad.matmul(y, w) for y, w in zip(ybar, weights)], iterations=1)
        return ad.mean(ad.vector_norm(Tensor(target) - v, axis=-1, keepdims=False))

    assert ad.check_gradients(loss_fn, weights, np.random.default_rng(0)) < 1e-4


def test_consistency_loss_gradient_reaches_head_and_maps(rng):
    bank = _bank(rng, width=6, classes=(3, 4))
    z = Tensor(rng.normal(size=(5, 6)))
    head = MLP(6, 3, rng, 1, 6)
    maps = ProjectionMaps(3, bank, rng)
    source_probs = cross_source_labels(z, bank)
    params = {**head.parameter_dict("target."), **maps.parameter_dict("maps.")}

    def loss_fn():
        return consistency_loss(ad.softmax_rows(head(z)), source_probs, maps)

    assert ad.check_gradients(loss_fn, params.values(), np.random.default_rng(4), coords=6) < 1e-4


def test_unrolled_routing_gradient_holds_couplings_fixed(rng):
    ybar = [Tensor(rng.dirichlet(np.ones(3), size=4)), Tensor(rng.dirichlet(np.ones(2), size=4))]
    weights = [ad.parameter(rng.normal(size=(3, 3))), ad.parameter(rng.normal(size=(2, 3)))]
    target = Tensor(rng.dirichlet(np.ones(3), size=4))

    def routed_loss():
        v, _ = cdr_route([ad.matmul(y, w) for y, w in zip(ybar, weights)], iterations=3)
        return ad.mean(ad.vector_norm(target - v, axis=-1, keepdims=False))

    with ad.no_grad():
        _, couplings = cdr_route([ad.matmul(y, w) for y, w in zip(ybar, weights)], iterations=3)
    assert not np.allclose(couplings, 0.5)

    # mismo v que la última iteración, con b congelado como constante
    def frozen_loss():
        u = ad.stack([ad.matmul(y, w) for y, w in zip(ybar, weights)], axis=-2)
        v = squash(ad.tsum(u * couplings[..., None], axis=-2))
        return ad.mean(ad.vector_norm(target - v, axis=-1, keepdims=False))

    assert routed_loss().item() == pytest.approx(frozen_loss().item(), abs=1e-12)
    routed_loss().backward()
    routed = [w.grad.copy() for w in weights]
    for w in weights:
        w.grad = None
    frozen_loss().backward()
    for got, expected in zip(routed, weights):
        np.testing.assert_allclose(got, expected.grad, atol=1e-12)
    assert ad.check_gradients(frozen_loss, weights, np.random.default_rng(5)) < 1e-4


def test_assign_labels_breaks_ties_low():
    assert assign_labels(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]


def test_reasoned_labels_export(tmp_path):
    reasoned = ReasonedLabels(np.array([[0.25, 0.25, 0.25, 0.25], [0.1, 0.7, 0.1, 0.1]]), "cdr", ["a", "b"])
    assert reasoned.entropy[0] == pytest.approx(math.log(4.0))
    assert reasoned.class_histogram() == {0: 1, 1: 1, 2: 0, 3: 0}
    rows = reasoned.to_csv(tmp_path / "out" / "labels.csv")
    lines = (tmp_path / "out" / "labels.csv").read_text(encoding="utf-8").splitlines()
    assert rows == 2
    assert lines[0] == "node_id,predicted_class,max_prob,entropy"
    assert lines[2].startswith("b,1,0.7")


def test_cross_source_labels_are_constant_simplex_rows(rng):
    bank = _bank(rng)
    outs = cross_source_labels(rng.normal(size=(5, 8)), bank)
    assert [o.shape for o in outs] == [(5, 3), (5, 4)]
    for o in outs:
        assert not o.requires_grad
        np.testing.assert_allclose(o.data.sum(axis=1), 1.0)


@pytest.mark.parametrize("fit", [cccm_fit, cdr_fit])
def test_reasoners_fit_and_leave_bank_untouched(fit, rng):
    bank = _bank(rng)
    frozen = [[(w.copy(), b.copy()) for w, b in head.layers] for head in bank.heads]
    reps = rng.normal(size=(20, 8))
    result = fit(reps, bank, 3, epochs=25, lr=0.05, seed=0)

    assert result.distributions.shape == (20, 3)
    np.testing.assert_allclose(result.distributions.sum(axis=1), 1.0)
    assert result.loss_trace[-1] < result.loss_trace[0]
    for head, saved in zip(bank.heads, frozen):
        for (w, b), (w0, b0) in zip(head.layers, saved):
            np.testing.assert_array_equal(w, w0)
            np.testing.assert_array_equal(b, b0)


def test_reasoners_need_sources(rng):
    with pytest.raises(ContractError):
        cdr_fit(rng.normal(size=(4, 8)), CrossClassifierBank([]), 3, epochs=1)


def test_reasoning_is_deterministic(rng):
    bank = _bank(rng)
    reps = rng.normal(size=(10, 8))
    a = cdr_fit(reps, bank, 3, epochs=5, seed=4)
    b = cdr_fit(reps, bank, 3, epochs=5, seed=4)
    np.testing.assert_array_equal(a.distributions, b.distributions)


def test_target_labels_stay_locked_until_final_evaluation(small_settings, preprocess_settings):
    source = make_labeled_graph("src", seed=1)
    config = RunConfig(
        mode="apocalypse",
        graphs=[GraphSettings(id=g, k=4, lr=0.01, epochs=3) for g in ("src", "tgt")],
        sources=["src"],
        target="tgt",
        universal_k=4,
        model=small_settings,
    )
    src_data = GraphData(source, preprocess_graph(source, 4, preprocess_settings)[0])
    state = new_state(small_settings, 4, {"src": src_data}, config)
    train_task(state, "src", "classify", 3, 0.01, 0.0)

    target = make_labeled_graph("tgt", seed=2, feature_dim=5)
    target.guard.lock("zero-label target")
    target_data = GraphData(target, preprocess_graph(target, 4, preprocess_settings)[0])
    moved = transfer_init(state.model.to_checkpoint(), target_data, config, sources=["src"])
    mode = RunMode("apocalypse", ["src"], "tgt")

    with pytest.raises(ModeViolation):
        prepare_target(moved, "tgt", mode, ["classify"], epochs=1)
    reps = prepare_target(moved, "tgt", mode, ["reconstruct", "structure"], epochs=2, lr=0.01)
    assert reps.shape == (target.num_nodes, small_settings.hidden_size)

    bank = CrossClassifierBank.from_model(moved, ["src"])
    reasoned = cccm_fit(reps, bank, target.num_classes, epochs=3)
    assert target.guard.denied == 0
    with pytest.raises(LabelAccessError):
        _ = target.labels

    acc = reasoned_accuracy(reasoned, target, "test")
    assert 0.0 <= acc <= 1.0
    assert target.guard.locked

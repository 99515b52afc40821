import numpy as np
import pytest

from src import autodiff as ad
from src.errors import ContractError
from src.optim import Adam, AdamState, adam_step


def _param_with_grad(value, grad):
    p = ad.parameter(np.array([value]))
    p.grad = np.array([grad])
    return p


def test_first_adam_step_moves_by_learning_rate():
    p = _param_with_grad(1.0, 2.0)
    adam_step(p, AdamState(lr=0.01))
    assert p.data[0] == pytest.approx(0.99, abs=1e-6)
    assert p.grad[0] == 0.0


def test_zero_learning_rate_leaves_parameters_bit_identical():
    p = _param_with_grad(0.123456789, -5.0)
    before = p.data.copy()
    adam_step(p, AdamState(lr=0.0))
    np.testing.assert_array_equal(p.data, before)


def test_weight_decay_is_added_to_the_gradient():
    p = _param_with_grad(1.0, 0.0)
    adam_step(p, AdamState(lr=0.01, weight_decay=0.5))
    assert p.data[0] == pytest.approx(0.99, abs=1e-6)


def test_adam_step_without_gradient_is_a_contract_error():
    with pytest.raises(ContractError):
        adam_step(ad.parameter(np.ones(1)), AdamState())


def test_negative_learning_rate_rejected():
    with pytest.raises(ContractError):
        AdamState(lr=-1.0)


def test_moments_persist_per_name_and_reconfigure():
    opt = Adam(lr=0.1)
    a = _param_with_grad(1.0, 1.0)
    opt.step({"a": a})
    assert a.grad is None
    a.grad = np.array([1.0])
    opt.configure(0.05, 0.0)
    opt.step({"a": a})
    state = opt.states["a"]
    assert state.t == 2
    assert state.lr == 0.05


def test_parameter_outside_the_step_graph_is_untouched_without_decay():
    opt = Adam(lr=0.1)
    idle = ad.parameter(np.array([3.0]))
    opt.step({"idle": idle})
    np.testing.assert_array_equal(idle.data, [3.0])


def test_parameter_left_out_of_a_later_loss_keeps_value_and_moments():
    opt = Adam(lr=0.1, weight_decay=0.01)
    used = ad.parameter(np.array([1.0, -2.0]))
    dropped = ad.parameter(np.array([0.5, 0.25]))
    params = {"used": used, "dropped": dropped}

    opt.zero_grad(params)
    ad.tsum(used * dropped).backward()
    assert opt.step(params) == []
    after_first = dropped.data.copy()
    moments = opt.states["dropped"].m.copy()

    opt.zero_grad(params)
    ad.tsum(used * used).backward()
    assert opt.step(params) == ["dropped"]
    np.testing.assert_array_equal(dropped.data, after_first)
    np.testing.assert_array_equal(opt.states["dropped"].m, moments)
    assert opt.states["dropped"].t == 1
    assert opt.states["used"].t == 2

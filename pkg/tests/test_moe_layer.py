import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.errors import NonFiniteError
from core.rng import Rng
from core.tensor import Tensor, parameter
from moe.aux_losses import balance_loss, expert_load, z_loss
from moe.layer import ExpertCounters, expert_ffn, moe_forward
from model.transformer import init_moe_layer


def _layer(tiny_model, variant, seed=0, **overrides):
    config = tiny_model(variant, **overrides)
    arrays = init_moe_layer(config, Rng(seed))
    return config, {name: parameter(value, name=name) for name, value in arrays.items()}


def _tokens(n=12, d=16, seed=1):
    return Tensor(Rng(seed).normal((n, d)))


def _ffn(x, params, prefix):
    return expert_ffn(x, params[f"{prefix}.w_in"], params[f"{prefix}.w_out"]).data


def test_all_experts_selected_matches_dense_mixture(tiny_model):
    config, params = _layer(tiny_model, "smoe", top_k=4)
    x = _tokens()
    out = moe_forward(x, config.moe, params)
    logits = x.data @ params["router.weight"].data
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    expected = sum(probs[:, [i]] * _ffn(x, params, f"experts.{i}") for i in range(4))
    assert_allclose(out.y.data, expected, rtol=1e-4, atol=1e-6)


def test_only_selected_experts_run(tiny_model):
    config, params = _layer(tiny_model, "smoe")
    counters = ExpertCounters()
    out = moe_forward(_tokens(), config.moe, params, counters=counters)
    assert counters.tokens == 12
    assert counters.ffn_evaluations == 12 * 2
    assert out.routing.ids.shape == (12, 2)


def test_zero_and_copy_slots(tiny_model):
    config, params = _layer(tiny_model, "moepp")
    # slots: E0..E3, zero4, zero5, copy6; route every token to zero4 and copy6 with equal logits
    weight = np.zeros((16, 7), dtype=np.float32)
    weight[:, [4, 6]] = 1.0
    params["router.weight"] = parameter(weight)
    x = Tensor(np.abs(Rng(2).normal((6, 16))) + 0.1)
    counters = ExpertCounters()
    out = moe_forward(x, config.moe, params, counters=counters)
    assert (out.routing.ids == [4, 6]).all()
    assert counters.ffn_evaluations == 0
    assert_allclose(out.y.data, 0.5 * x.data, rtol=1e-6)


def test_negated_slot_cancels_its_base(tiny_model):
    config, params = _layer(tiny_model, "tcmoe")
    # slots: E0..E3, -E0..-E3, zero8, zero9
    weight = np.zeros((16, 10), dtype=np.float32)
    weight[:, [0, 4]] = 1.0
    params["router.weight"] = parameter(weight)
    x = Tensor(np.abs(Rng(3).normal((5, 16))) + 0.1)
    out = moe_forward(x, config.moe, params)
    assert (out.routing.ids == [0, 4]).all()
    assert_allclose(out.y.data, 0.0, atol=1e-6)


def test_shared_expert_added_ungated(tiny_model):
    config, params = _layer(tiny_model, "shared_v2")
    plain = tiny_model("smoe").moe
    x = _tokens()
    routed_only = {k: v for k, v in params.items() if not k.startswith("shared.")}
    with_shared = moe_forward(x, config.moe, params).y.data
    without = moe_forward(x, plain, routed_only).y.data
    assert_allclose(with_shared - without, _ffn(x, params, "shared.0"), rtol=1e-4, atol=1e-6)


def test_gradients_reach_router_and_selected_experts_only(tiny_model):
    config, params = _layer(tiny_model, "smoe")
    x = Tensor(Rng(4).normal((1, 16)))
    out = moe_forward(x, config.moe, params)
    (out.y.sum() + out.balance).backward()
    selected = set(out.routing.ids[0].tolist())
    assert np.abs(params["router.weight"].grad).sum() > 0
    for i in range(4):
        grad = params[f"experts.{i}.w_in"].grad
        assert (grad is not None) == (i in selected)


def test_token_positions_follow_offset(tiny_model):
    config, params = _layer(tiny_model, "sigma_moe")
    out = moe_forward(_tokens(n=3), config.moe, params, layer=2, token_offset=30)
    assert out.routing.layer == 2
    assert out.routing.positions.tolist() == [30, 31, 32]


def test_non_finite_expert_output_raises(tiny_model):
    config, params = _layer(tiny_model, "smoe")
    for i in range(4):
        params[f"experts.{i}.w_out"] = parameter(np.full((8, 16), np.inf, dtype=np.float32))
    with pytest.raises(NonFiniteError, match="layer 1"):
        moe_forward(_tokens(), config.moe, params, layer=1)


def test_balance_loss_uniform_routing_equals_alpha():
    logits = Tensor(np.zeros((8, 4)))
    ids = (np.arange(8) % 4).reshape(8, 1)
    loss, load, mean_prob = balance_loss(logits, ids, alpha=0.01)
    assert_allclose(load, 0.25)
    assert_allclose(mean_prob, 0.25, rtol=1e-6)
    assert float(loss.data) == pytest.approx(0.01, rel=1e-5)


def test_balance_loss_collapse_equals_alpha_times_n():
    logits = np.full((8, 4), -50.0, dtype=np.float32)
    logits[:, 0] = 50.0
    loss, load, _ = balance_loss(Tensor(logits), np.zeros((8, 2), dtype=np.int64), alpha=0.01)
    assert_allclose(load, [1.0, 0.0, 0.0, 0.0])
    assert float(loss.data) == pytest.approx(0.04, rel=1e-5)


def test_disabled_aux_losses_are_exact_zero():
    logits = parameter(Rng(0).normal((5, 4)))
    loss, _, _ = balance_loss(logits, np.zeros((5, 1), dtype=np.int64), alpha=0.0)
    assert float(loss.data) == 0.0 and not loss.requires_grad
    assert float(z_loss(logits, 0.0).data) == 0.0


def test_z_loss_value_and_gradient():
    assert float(z_loss(Tensor(np.zeros((3, 4))), 0.001).data) == pytest.approx(0.001 * np.log(4) ** 2, rel=1e-5)
    logits = parameter(Rng(1).normal((3, 4)))
    z_loss(logits, 0.001).backward()
    assert np.abs(logits.grad).sum() > 0


def test_expert_load_counts_all_slots():
    assert_allclose(expert_load(np.array([[0, 1], [0, 2]]), 4), [0.5, 0.25, 0.25, 0.0])

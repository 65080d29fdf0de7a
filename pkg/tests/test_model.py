from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.errors import ConfigError, DataError, ManifestError
from core.rng import Rng
from core.ops import cross_entropy
from core.tensor import no_grad, parameter, precision
from core.types import UpcycleMode, Variant
from model.config import ModelConfig
from model.params import count_params, layer_prefix, moe_prefix, scoped
from model.transformer import build_model, forward_lm
from moe.config import MoEConfig
from moe.upcycle import upcycle

TOKENS = np.array([[72, 101, 108, 108, 111, 32, 119, 111], [100, 101, 115, 107, 32, 108, 97, 98]])


@pytest.mark.parametrize("variant", [v.value for v in Variant])
def test_forward_shapes_for_every_variant(tiny_model, variant):
    config = tiny_model(variant)
    params = build_model(config, Rng(0))
    with no_grad():
        out = forward_lm(params, TOKENS, config)
    assert out.logits.shape == (2, 8, 256)
    assert np.isfinite(out.logits.data).all()
    assert len(out.routing) == len(config.moe_layers)
    for routing in out.routing:
        assert routing.ids.shape == (16, config.moe.top_k)
        assert routing.logits.shape == (16, config.moe.n_routable)


def test_build_model_is_seeded(tiny_model):
    config = tiny_model("smoe")
    a, b = build_model(config, Rng(3)), build_model(config, Rng(3))
    assert a.keys() == b.keys()
    for name in a:
        assert_array_equal(a[name].data, b[name].data)
    assert not np.array_equal(a["head"].data, build_model(config, Rng(4))["head"].data)


def test_router_init_std_controls_router_scale(tiny_model):
    params = build_model(tiny_model("smoe", router_init_std=0.06, n_experts=16), Rng(0))
    assert params["layers.0.moe.router.weight"].data.std() == pytest.approx(0.06, rel=0.2)


def test_outputs_are_causal(tiny_model):
    config = tiny_model("smoe")
    params = build_model(config, Rng(0))
    changed = TOKENS.copy()
    changed[:, 5] = 0
    with no_grad():
        before = forward_lm(params, TOKENS, config).logits.data
        after = forward_lm(params, changed, config).logits.data
    assert_allclose(before[:, :5], after[:, :5], rtol=1e-5, atol=1e-6)
    assert not np.allclose(before[:, 5:], after[:, 5:])


def test_moe_layer_indices_select_layers(tiny_model):
    config = replace(tiny_model("smoe"), moe_layer_indices=[1])
    params = build_model(config, Rng(0))
    assert "layers.0.ffn.w_in" in params and "layers.1.moe.router.weight" in params
    with no_grad():
        out = forward_lm(params, TOKENS, config)
    assert [r.layer for r in out.routing] == [1]


def test_forward_rejects_bad_tokens(tiny_model):
    config = tiny_model("smoe")
    params = build_model(config, Rng(0))
    with pytest.raises(DataError, match=r"\(1, 2\)"):
        forward_lm(params, np.array([[1, 2, 3], [4, 5, 300]]), config)
    with pytest.raises(DataError):
        forward_lm(params, np.zeros((1, 17), dtype=np.int64), config)


def test_count_params_active_vs_total(tiny_model):
    config = tiny_model("smoe")
    counts = count_params(build_model(config, Rng(0)), config)
    per_expert = 2 * 16 * 8
    assert counts.routed_expert_total == 2 * 4 * per_expert
    assert counts.active == counts.total - 2 * 2 * per_expert

    dense = tiny_model("dense")
    dense_counts = count_params(build_model(dense, Rng(0)), dense)
    assert dense_counts.active == dense_counts.total


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=16, n_heads=3, d_head=8).validate()
    with pytest.raises(ConfigError):
        ModelConfig(d_model=16, n_heads=2, d_head=8, n_layers=2, moe_layer_indices=[2]).validate()


def _dense_source(tiny_model):
    config = tiny_model("dense", dense_dim=8)
    return config, build_model(config, Rng(10))


def test_full_upcycling_preserves_the_function(tiny_model):
    dense_config, dense = _dense_source(tiny_model)
    target = tiny_model("smoe")
    params = upcycle(dense, target, UpcycleMode.FULL, Rng(11))
    assert_array_equal(params["layers.1.moe.experts.3.w_out"].data, dense["layers.1.ffn.w_out"].data)
    assert_array_equal(params["tok_emb"].data, dense["tok_emb"].data)
    with no_grad():
        expected = forward_lm(dense, TOKENS, dense_config).logits.data
        got = forward_lm(params, TOKENS, target).logits.data
    assert_allclose(got, expected, rtol=1e-4, atol=1e-5)


def test_shared_only_upcycling_copies_shared_experts(tiny_model):
    _, dense = _dense_source(tiny_model)
    target = tiny_model("shared_v2")
    params = upcycle(dense, target, UpcycleMode.SHARED_ONLY, Rng(11))
    assert_array_equal(params["layers.0.moe.shared.0.w_in"].data, dense["layers.0.ffn.w_in"].data)
    assert not np.array_equal(params["layers.0.moe.experts.0.w_in"].data, dense["layers.0.ffn.w_in"].data)
    fresh = build_model(target, Rng(11))
    assert_array_equal(params["layers.0.moe.router.weight"].data, fresh["layers.0.moe.router.weight"].data)


def test_upcycling_rejections(tiny_model):
    _, dense = _dense_source(tiny_model)
    with pytest.raises(ConfigError):
        upcycle(dense, tiny_model("dense"), UpcycleMode.FULL, Rng(0))
    with pytest.raises(ConfigError):
        upcycle(dense, tiny_model("smoe"), UpcycleMode.SHARED_ONLY, Rng(0))
    with pytest.raises(ConfigError, match="expert_dim"):
        upcycle(dense, tiny_model("smoe", expert_dim=4), UpcycleMode.FULL, Rng(0))
    partial = {k: v for k, v in dense.items() if k != "head"}
    with pytest.raises(ManifestError, match="head"):
        upcycle(partial, tiny_model("smoe"), UpcycleMode.FULL, Rng(0))


def test_upcycled_params_follow_target_layout():
    config = ModelConfig(d_model=16, n_heads=2, d_head=8, n_layers=1, seq_len=8,
                         moe=MoEConfig.for_variant(Variant.DENSE, expert_dim=8, dense_dim=8))
    dense = build_model(config, Rng(0))
    target = replace(config, moe=MoEConfig.for_variant(Variant.SIGMA_MOE, n_experts=3, top_k=2, expert_dim=8))
    params = upcycle(dense, target, "full", Rng(1))
    assert "layers.0.ffn.w_in" not in params
    assert sorted(k for k in params if ".moe.experts." in k) == [
        f"layers.0.moe.experts.{i}.{w}" for i in range(3) for w in ("w_in", "w_out")]


def test_parameter_names_share_the_layer_prefix(tiny_model):
    assert layer_prefix(1) == "layers.1."
    assert moe_prefix(1) == "layers.1.moe."
    config = tiny_model("dense")
    layer = scoped(build_model(config, Rng(0)), layer_prefix(1))
    assert {"attn_norm", "ffn_norm", "ffn.w_in", "ffn.w_out"} <= set(layer)
    assert not any(name.startswith("layers.") for name in layer)


@pytest.mark.parametrize("variant", ["smoe", "sigma_moe", "xmoe", "moepp"])
def test_end_to_end_gradient_matches_finite_differences(tiny_model, variant):
    config = tiny_model(variant, z_coef=1e-3)
    inputs, targets = TOKENS[:, :-1], TOKENS[:, 1:].reshape(-1)
    draw = np.random.default_rng(11)
    eps = 1e-6

    with precision(np.float64):
        params = {name: parameter(p.data.astype(np.float64), name=name)
                  for name, p in build_model(config, Rng(0)).items()}

        def loss():
            out = forward_lm(params, inputs, config)
            ce = cross_entropy(out.logits.reshape(targets.size, config.vocab_size), targets)
            return ce + out.aux.balance + out.aux.z

        loss().backward()
        names = sorted(params)
        for _ in range(20):
            name = names[draw.integers(len(names))]
            data = params[name].data
            index = tuple(int(draw.integers(size)) for size in data.shape)
            original = data[index]
            with no_grad():
                data[index] = original + eps
                up = float(loss().data)
                data[index] = original - eps
                down = float(loss().data)
            data[index] = original
            numeric = (up - down) / (2 * eps)
            grad = params[name].grad
            analytic = 0.0 if grad is None else float(grad[index])
            rel_err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            assert rel_err < 1e-3, f"{name}{index}: analytic {analytic}, numeric {numeric}"

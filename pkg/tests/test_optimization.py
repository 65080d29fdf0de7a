import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.errors import ConfigError, NonFiniteError
from core.tensor import parameter
from optimization.adamw import AdamW, AdamWParameters, OptimizerState, adamw_step
from optimization.schedule import LearningRateSchedule, ScheduleParameters, clip_grad_norm, cosine_lr, global_norm


def test_cosine_schedule_shape():
    assert cosine_lr(0, 1000, 100, 1.0) == 0.0
    assert cosine_lr(50, 1000, 100, 1.0) == pytest.approx(0.5)
    assert cosine_lr(100, 1000, 100, 1.0) == pytest.approx(1.0)
    assert cosine_lr(550, 1000, 100, 1.0) == pytest.approx(0.55)
    assert cosine_lr(1000, 1000, 100, 1.0) == pytest.approx(0.1)
    assert cosine_lr(5000, 1000, 100, 1.0) == pytest.approx(0.1)


def test_schedule_bound_to_parameters():
    schedule = LearningRateSchedule(ScheduleParameters(base_lr=2.5e-4, warmup_steps=0, total_steps=10, min_mult=0.0))
    assert schedule.lr_at(0) == pytest.approx(2.5e-4)
    assert schedule.lr_at(10) == pytest.approx(0.0, abs=1e-12)


def test_clip_scales_to_threshold():
    grads = {"a": np.array([3.0, 4.0], dtype=np.float32)}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert_allclose(clipped["a"], [0.6, 0.8], rtol=1e-6)
    assert global_norm(clipped) == pytest.approx(1.0, rel=1e-6)

    unchanged, norm = clip_grad_norm(grads, 10.0)
    assert norm == pytest.approx(5.0)
    assert_allclose(unchanged["a"], grads["a"])


def test_clip_threshold_must_be_positive():
    with pytest.raises(ConfigError):
        clip_grad_norm({"a": np.ones(2)}, 0.0)


def test_clip_names_the_non_finite_gradient():
    grads = {
        "tok_emb": np.ones((4, 2), dtype=np.float32),
        "layers.1.moe.router.weight": np.array([[0.5, np.nan]], dtype=np.float32),
        "head": np.ones(3, dtype=np.float32),
    }
    with pytest.raises(NonFiniteError, match="router") as exc:
        clip_grad_norm(grads, 1.0)
    assert "tok_emb" not in str(exc.value)

    grads["layers.1.moe.router.weight"][0, 1] = np.inf
    with pytest.raises(NonFiniteError, match="layers.1.moe.router.weight"):
        clip_grad_norm(grads, 1.0)


def test_first_adamw_step_moves_by_lr():
    p = {"w": parameter(np.array([1.0, -1.0]))}
    adamw_step(p, {"w": np.array([0.5, -2.0], dtype=np.float32)}, OptimizerState(), lr=0.1, weight_decay=0.0)
    assert_allclose(p["w"].data, [0.9, -0.9], rtol=1e-5)


def test_weight_decay_is_decoupled():
    p = {"w": parameter(np.array([1.0]))}
    adamw_step(p, {}, OptimizerState(), lr=0.1, weight_decay=0.1)
    assert_allclose(p["w"].data, [0.99], rtol=1e-6)


def test_non_finite_gradient_leaves_state_untouched():
    p = {"w": parameter(np.array([1.0]))}
    state = OptimizerState()
    with pytest.raises(NonFiniteError, match="'w'"):
        adamw_step(p, {"w": np.array([np.nan], dtype=np.float32)}, state, lr=0.1)
    assert state.step == 0
    assert p["w"].data[0] == 1.0


def test_adamw_minimizes_quadratic():
    w = parameter(np.array([3.0, -2.0]))
    optimizer = AdamW({"w": w}, AdamWParameters(weight_decay=0.0))
    for _ in range(300):
        optimizer.zero_grad()
        (w * w).sum().backward()
        optimizer.step(lr=0.05)
    assert np.abs(w.data).max() < 0.05

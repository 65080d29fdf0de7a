import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.rng import Rng
from core.tensor import Tensor, no_grad, parameter, precision
from core.types import Variant
from model.config import ModelConfig
from moe.config import MoEConfig
from optimization.trainer import RunConfig
from preprocessing.corpus import Corpus, tokenize_bytes

TEXT = "The quick brown fox jumps over the lazy dog; pack my box with five dozen liquor jugs. " * 24


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training trend tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return Rng(0)


@pytest.fixture
def tiny_model():
    """Factory for a two-layer, 16-wide model of any variant."""

    def make(variant="smoe", n_layers=2, **moe_overrides) -> ModelConfig:
        moe_overrides.setdefault("n_experts", 4)
        moe_overrides.setdefault("top_k", 2)
        moe_overrides.setdefault("expert_dim", 8)
        moe_overrides.setdefault("xmoe_routing_dim", 4)
        moe = MoEConfig.for_variant(Variant(variant), **moe_overrides)
        return ModelConfig(d_model=16, n_heads=2, d_head=8, n_layers=n_layers, vocab_size=256, seq_len=16, moe=moe)

    return make


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text(TEXT, encoding="utf-8")
    return path


@pytest.fixture
def corpus():
    return Corpus.from_tokens(tokenize_bytes(TEXT), val_fraction=0.1)


@pytest.fixture
def run_config(tiny_model, corpus_file):
    """Factory for a ten-step run over the test corpus."""

    def make(variant="smoe", **changes) -> RunConfig:
        config = RunConfig(model=tiny_model(variant), lr=1e-3, warmup_steps=2, total_steps=10, batch_size=4,
                           checkpoint_every=5, eval_every=5, eval_max_windows=4, eval_batch_size=4, log_every=5,
                           corpus_paths=[str(corpus_file)], val_fraction=0.1, run_id=f"test-{variant}")
        return config.with_changes(**changes)

    return make


def numeric_grad(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    grad = np.zeros_like(x, dtype=np.float64)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + eps
        up = f(x)
        x[index] = original - eps
        down = f(x)
        x[index] = original
        grad[index] = (up - down) / (2 * eps)
    return grad


@pytest.fixture
def grad_check():
    """
    Compare backward() of a scalar function against finite differences.

    Both sides run under float64 so the relative error stays below rtol.
    """

    def check(fn, x: np.ndarray, rtol: float = 1e-4, atol: float = 1e-7, eps: float = 1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        with precision(np.float64):
            p = parameter(x.copy())
            fn(p).backward()

            def value(arr):
                with no_grad():
                    return float(fn(Tensor(arr)).data)

            expected = numeric_grad(value, x.copy(), eps=eps)
        assert p.grad.dtype == np.float64
        assert_allclose(p.grad, expected, rtol=rtol, atol=atol)
        return p.grad

    return check

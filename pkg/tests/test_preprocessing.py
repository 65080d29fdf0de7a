import numpy as np
import pytest
from numpy.testing import assert_array_equal

from core.errors import ConfigError, DataError
from core.rng import Rng
from core.types import InitMode, Variant
from optimization.trainer import RunConfig
from preprocessing.config_file import (apply_overrides, dict_to_sections, load_config_dict, read_sections,
                                       sections_to_dict, write_sections)
from preprocessing.corpus import Corpus, detokenize, eval_windows, make_batches, tokenize_bytes, window_offsets


def test_byte_tokenization():
    ids = tokenize_bytes("hé")
    assert ids.tolist() == [104, 195, 169]
    assert detokenize(ids).decode("utf-8") == "hé"
    with pytest.raises(DataError):
        detokenize([256])


def test_validation_split_is_the_tail():
    tokens = np.arange(200) % 256
    corpus = Corpus.from_tokens(tokens, val_fraction=0.1)
    assert len(corpus.val_tokens) == 20
    assert_array_equal(corpus.val_tokens, tokens[-20:])
    assert_array_equal(corpus.split("train"), tokens[:-20])
    assert len(Corpus.from_tokens(tokens, val_fraction=0.01, min_val_tokens=50).val_tokens) == 50
    with pytest.raises(DataError):
        corpus.split("test")


def test_corpus_files_concatenate_in_order(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_bytes(b"abc" * 100)
    b.write_bytes(b"xyz" * 100)
    corpus = Corpus.from_files([a, b], val_fraction=0.1)
    assert detokenize(corpus.val_tokens[-3:]) == b"xyz"
    assert detokenize(corpus.train_tokens[:3]) == b"abc"
    with pytest.raises(DataError):
        Corpus.from_files([])


def test_windows_need_seq_len_plus_one():
    with pytest.raises(DataError):
        window_offsets(16, 16)
    assert window_offsets(17, 16).tolist() == [0]
    assert window_offsets(40, 16, sequential=True).tolist() == [0, 16, 23]


def test_batches_are_shifted_and_seeded():
    tokens = np.arange(100) % 256
    first = next(make_batches(tokens, 8, 4, Rng(1)))
    again = next(make_batches(tokens, 8, 4, Rng(1)))
    inputs, targets = first
    assert inputs.shape == targets.shape == (4, 8)
    assert_array_equal(inputs[:, 1:], targets[:, :-1])
    assert_array_equal(first[0], again[0])


def test_epoch_draws_windows_without_replacement():
    tokens = np.arange(21)
    stream = make_batches(tokens, 4, 2, Rng(2))
    starts = [int(batch[0][i, 0]) for batch in (next(stream) for _ in range(8)) for i in range(2)]
    assert len(set(starts)) == 16


def test_eval_windows_are_fixed_and_disjoint():
    tokens = np.arange(50)
    windows = eval_windows(tokens, 16)
    assert len(windows) == 3
    assert [int(w[0][0, 0]) for w in windows] == [0, 16, 32]
    assert_array_equal(windows[1][1][0], np.arange(17, 33))
    assert len(eval_windows(tokens, 16, max_windows=2)) == 2
    short = eval_windows(np.arange(6), 16)
    assert short[0][0].shape == (1, 5)
    with pytest.raises(DataError):
        eval_windows(np.arange(1), 16)


def test_config_file_round_trip(tmp_path):
    config = RunConfig(total_steps=600, seed=7, corpus_paths=["a.txt", "b.txt"]).with_changes(
        init_mode=InitMode.UPCYCLE_FULL, dense_checkpoint_path="dense.ckpt")
    path = tmp_path / "config.ini"
    write_sections(dict_to_sections(config.to_dict()), path)
    loaded = RunConfig.from_dict(load_config_dict(path))
    assert loaded == config
    assert loaded.config_hash == config.config_hash


def test_overrides_apply_to_sections(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nseed = 1\n[moe]\nvariant = smoe\n", encoding="utf-8")
    data = load_config_dict(path, ["moe.variant=sigma_moe", "run.total_steps=30", "model.n_layers=2",
                                   "data.val_fraction=0.2"])
    config = RunConfig.from_dict(data)
    assert config.model.moe.variant == Variant.SIGMA_MOE
    assert (config.seed, config.total_steps, config.model.n_layers, config.val_fraction) == (1, 30, 2, 0.2)


@pytest.mark.parametrize("override", ["seed=3", "run.seed", "training.seed=3"])
def test_malformed_overrides(override):
    with pytest.raises(ConfigError):
        apply_overrides({}, [override])


def test_config_errors(tmp_path):
    bad_section = tmp_path / "bad.ini"
    bad_section.write_text("[training]\nlr = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="training"):
        read_sections(bad_section)
    with pytest.raises(ConfigError, match="unknown RunConfig keys"):
        RunConfig.from_dict(sections_to_dict({"run": {"learning_rate": "1"}}))
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict(sections_to_dict({"run": {"seed": "abc"}}))
    with pytest.raises(ConfigError, match="data"):
        sections_to_dict({"data": {"seed": "1"}})

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union
import logging

import numpy as np

from core.errors import DataError
from core.rng import Rng

logger = logging.getLogger(__name__)

VOCAB_SIZE = 256

Batch = Tuple[np.ndarray, np.ndarray]


def tokenize_bytes(data: Union[bytes, bytearray, str]) -> np.ndarray:
    """Byte-level tokenization: each byte is its own id (V=256)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids: Sequence[int]) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise DataError(f"token ids must lie in [0, {VOCAB_SIZE})")
    return ids.astype(np.uint8).tobytes()


@dataclass
class Corpus:
    """Train/validation split of a byte-tokenized text corpus."""
    train_tokens: np.ndarray
    val_tokens: np.ndarray
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if len(self.train_tokens) == 0 or len(self.val_tokens) == 0:
            raise DataError(f"both splits must be non-empty (train={len(self.train_tokens)}, "
                            f"val={len(self.val_tokens)})")

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, val_fraction: float = 0.005,
                    min_val_tokens: int = 0) -> "Corpus":
        """
        Split tokens into train and validation parts.

        The validation part is the contiguous tail of the corpus, so no
        window can cross the boundary.
        """
        if not 0.0 < val_fraction < 1.0:
            raise DataError(f"val_fraction must lie in (0, 1), got {val_fraction}")
        tokens = np.asarray(tokens, dtype=np.int64)
        n_val = max(int(round(len(tokens) * val_fraction)), min_val_tokens, 1)
        if n_val >= len(tokens):
            raise DataError(f"corpus of {len(tokens)} tokens too small for a {n_val}-token validation split")
        return cls(train_tokens=tokens[:-n_val], val_tokens=tokens[-n_val:])

    @classmethod
    def from_files(cls, paths: Sequence[Union[str, Path]], val_fraction: float = 0.005,
                   min_val_tokens: int = 0) -> "Corpus":
        """Read and concatenate raw files in the given order."""
        if not paths:
            raise DataError("no corpus files given")
        chunks: List[np.ndarray] = []
        for path in paths:
            chunks.append(tokenize_bytes(Path(path).read_bytes()))
            logger.debug("read %d bytes from %s", len(chunks[-1]), path)
        tokens = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
        corpus = cls.from_tokens(tokens, val_fraction, min_val_tokens)
        logger.info("corpus: %d train tokens, %d validation tokens", len(corpus.train_tokens),
                    len(corpus.val_tokens))
        return corpus

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_tokens
        if name in ("val", "validation"):
            return self.val_tokens
        raise DataError(f"unknown split '{name}', expected train or val")


def window_offsets(n_tokens: int, seq_len: int, sequential: bool = False) -> np.ndarray:
    """
    Valid window start offsets: every offset leaving room for the shifted target.

    In sequential mode a final window ending at the last token is added so
    every position is covered.
    """
    if n_tokens < seq_len + 1:
        raise DataError(f"corpus of {n_tokens} tokens is shorter than one window of {seq_len + 1}")
    offsets = np.arange(n_tokens - seq_len, dtype=np.int64)
    if sequential:
        offsets = np.arange(0, n_tokens - seq_len, seq_len, dtype=np.int64)
        tail = n_tokens - seq_len - 1
        if offsets[-1] != tail:
            offsets = np.append(offsets, tail)
    return offsets


def make_batches(tokens: np.ndarray, seq_len: int, batch_size: int, rng: Rng,
                 sequential: bool = False) -> Iterator[Batch]:
    """
    Endless stream of (input, target) blocks of shape B x T.

    Window offsets are drawn without replacement within an epoch from a
    fresh permutation of the seeded stream; targets are inputs shifted by one.
    Sequential mode walks non-overlapping windows in order instead.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    offsets = window_offsets(len(tokens), seq_len, sequential)
    steps = np.arange(seq_len + 1)
    epoch = 0
    while True:
        order = offsets if sequential else offsets[rng.permutation(len(offsets))]
        for start in range(0, len(order), batch_size):
            chosen = order[start:start + batch_size]
            if len(chosen) < batch_size and len(order) >= batch_size:
                break  # next epoch; keeps every batch full
            windows = tokens[chosen[:, None] + steps[None, :]]
            yield windows[:, :-1], windows[:, 1:]
        epoch += 1
        logger.debug("batch stream finished epoch %d", epoch)


def eval_windows(tokens: np.ndarray, seq_len: int, max_windows: int = 0) -> List[Batch]:
    """
    Fixed, non-overlapping validation windows in corpus order.

    The same tokens are visited on every call, which keeps routing logs of
    different checkpoints aligned. max_windows=0 keeps every window.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    length = min(seq_len, len(tokens) - 1)
    if length < 1:
        raise DataError(f"split of {len(tokens)} tokens cannot form an evaluation window")
    n_windows = (len(tokens) - 1) // length
    if max_windows:
        n_windows = min(n_windows, max_windows)
    windows = []
    for w in range(n_windows):
        chunk = tokens[w * length:w * length + length + 1]
        windows.append((chunk[None, :-1], chunk[None, 1:]))
    return windows

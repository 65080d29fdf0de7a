from dataclasses import dataclass, field
from typing import Sequence, Union
import hashlib

import numpy as np


@dataclass
class Rng:
    """
    Seeded random stream backed by numpy's counter-based Philox generator.

    Each draw advances the Philox counter, so the same seed and the same
    sequence of calls always produce the same values. `fork` derives an
    independent child stream from (seed, label) without touching the parent.
    """
    seed: int
    _generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self._generator = np.random.Generator(np.random.Philox(key=self.seed))

    def normal(self, shape: Union[int, Sequence[int]], std: float = 1.0) -> np.ndarray:
        """Draw N(0, std) values as float32."""
        return self._generator.normal(0.0, std, size=shape).astype(np.float32)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def fork(self, label: str) -> "Rng":
        """Child stream keyed by label; stable across processes and Python versions."""
        digest = hashlib.sha256(f"{self.seed}:{label}".encode("utf-8")).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

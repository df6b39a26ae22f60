"""
Seeded random streams.

Every stream is a Philox counter-based generator keyed by
`SeedSequence([seed, *stream_ids])`. Child streams are addressed by integer
ids, so the values a component draws do not depend on how many draws other
components made before it.
"""

from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray

MAX_SEED = 2**64 - 1


class Rng:
    def __init__(self, seed: int, stream: Sequence[int] = ()):
        assert 0 <= seed <= MAX_SEED, f"Seed {seed} is not a 64-bit unsigned integer."
        assert all(s >= 0 for s in stream), f"Stream ids must be non-negative: {stream}"
        self.seed = seed
        self.stream = tuple(stream)
        entropy = np.random.SeedSequence([seed, *self.stream])
        self._generator = np.random.Generator(np.random.Philox(entropy))

    def child(self, *stream: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(stream))

    def normal(self, shape: Sequence[int], std: float = 1.0) -> NDArray[np.float64]:
        return self._generator.standard_normal(tuple(shape)) * std

    def uniform(
        self, low: float = 0.0, high: float = 1.0, size: Sequence[int] | None = None
    ) -> Any:
        return self._generator.uniform(low, high, size=None if size is None else tuple(size))

    def integers(self, low: int, high: int) -> int:
        return int(self._generator.integers(low, high))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def derive_seed(seed: int, *stream: int) -> int:
    """A 64-bit seed for a sub-component, addressed like a child stream."""
    state = np.random.SeedSequence([seed, *stream]).generate_state(1, np.uint64)
    return int(state[0])

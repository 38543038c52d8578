"""Portable random streams.

SplitMix64 is used wherever output has to be reproducible across
implementations (corpus generation). Its state is a 64-bit counter that
advances by the golden-ratio increment; each output is the counter passed
through the finalizer below. Because outputs depend only on the counter,
blocks of draws are computed vectorized with wrapping uint64 arithmetic.

Named sub-streams are derived from a parent seed and a label path via
SHA-256, so every stochastic choice in the pipeline has its own stream.
"""

import hashlib
from typing import Union

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1

SeedLabel = Union[str, int]


def derive_seed(seed: int, *labels: SeedLabel) -> int:
    """Derive an independent 64-bit seed from a parent seed and labels."""
    text = ":".join([str(int(seed) & MASK64)] + [str(label) for label in labels])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """SplitMix64 generator with vectorized block draws."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, count: int) -> np.ndarray:
        """Return the next ``count`` raw 64-bit outputs."""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            counters = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            out = _mix(counters)
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        return out

    def uniform(self, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform floats in [low, high) built from the top 53 bits."""
        unit = (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * unit

    def randint(self, low: int, high: int) -> int:
        """Integer in the closed range [low, high]."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        span = high - low + 1
        return low + int(self.next_u64(1)[0]) % span

    def coin(self) -> bool:
        return bool(int(self.next_u64(1)[0]) >> 63)

    def choice(self, options):
        return options[self.randint(0, len(options) - 1)]


def numpy_generator(seed: int, *labels: SeedLabel) -> np.random.Generator:
    """A PCG64 generator on a derived stream, for model-side randomness."""
    return np.random.default_rng(derive_seed(seed, *labels))

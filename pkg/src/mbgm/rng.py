"""Seeded, counter-based randomness shared by every stochastic component.

The generator must reproduce identical streams across runs and platforms, and
its state has to serialize into a checkpoint as plain integers.  Both needs
rule out wrapping an opaque library generator, so the raw stream is a
SplitMix64 mix of a counted Weyl sequence: output ``i`` of a stream is
``mix64(seed + (counter + i + 1) * GOLDEN)``.  Everything is unsigned 64-bit
integer arithmetic, which numpy evaluates identically everywhere.

Gaussian variates come from Box-Muller applied to consecutive pairs of
uniforms.  That choice is fixed: changing it would silently change every
seeded run.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = 0xFFFFFFFFFFFFFFFF

# 2**-53, the spacing of the 53-bit uniform grid
_U53 = 1.0 / 9007199254740992.0


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _MIX1
    z = z ^ (z >> np.uint64(27))
    z = z * _MIX2
    return z ^ (z >> np.uint64(31))


class RandomStream:
    """Deterministic stream of uniforms and normals.

    State is the pair ``(seed, counter)``; two streams with equal state
    produce equal outputs forever.  ``counter`` advances by the number of raw
    64-bit words consumed, so interrupting and resuming a stream (e.g. via a
    checkpoint) continues the exact sequence.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter) & _MASK

    def __repr__(self):
        return f"RandomStream(seed={self.seed:#x}, counter={self.counter})"

    @property
    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    @classmethod
    def from_state(cls, state: tuple[int, int]) -> "RandomStream":
        return cls(state[0], state[1])

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        if n < 0:
            raise ValueError(f"raw count must be >= 0, got {n}")
        idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
        out = _mix64(np.uint64(self.seed) + idx * _GOLDEN)
        self.counter = (self.counter + n) & _MASK
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on (0, 1] (never 0, so log is always finite)."""
        bits = self.raw(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * _U53

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        """Standard normal array via Box-Muller on consecutive uniform pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        m = int(np.prod(shape)) if shape else 1
        pairs = (m + 1) // 2
        u1 = self.uniform(pairs)
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:m].reshape(shape).astype(dtype, copy=False)

    def derive(self, index: int) -> "RandomStream":
        """Independent child stream (e.g. one per inference chain).

        The child seed is a mix of this stream's seed and ``index``; deriving
        does not consume from or perturb the parent stream.
        """
        key = np.uint64(self.seed) + np.uint64((int(index) + 1) & _MASK) * _MIX1
        return RandomStream(int(_mix64(key)))

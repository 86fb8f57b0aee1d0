"""Counter-based random streams.

Every draw builds a fresh Philox generator keyed by ``(seed, counter)`` and then
bumps the counter, so a stream's output depends only on its seed and on how many
draws preceded it. ``split`` derives an independent child seed, which lets device
simulations run in any order or concurrently without changing their samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor

UNIFORM_EPS = 1e-10

_MASK64 = (1 << 64) - 1


@dataclass
class RngState:
    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64

    def generator(self) -> np.random.Generator:
        bits = np.random.Philox(key=np.array([self.seed, self.counter], dtype=np.uint64))
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(bits)

    def split(self, stream: int) -> "RngState":
        child = np.random.SeedSequence([self.seed, int(stream) & _MASK64]).generate_state(1, np.uint64)[0]
        return RngState(int(child))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_dict(cls, d: dict) -> "RngState":
        return cls(d["seed"], d.get("counter", 0))


def sample_uniform(rng: RngState, shape) -> Tensor:
    """Uniform samples in [1e-10, 1 - 1e-10], float64 so the endpoints survive."""
    u = rng.generator().random(shape)
    return Tensor(np.clip(u, UNIFORM_EPS, 1.0 - UNIFORM_EPS))


def sample_gumbel(rng: RngState, shape) -> np.ndarray:
    u = sample_uniform(rng, shape).data
    return -np.log(-np.log(u))


def permutation(rng: RngState, n: int) -> np.ndarray:
    return rng.generator().permutation(n)

"""Counter-based random streams and dropout masks.

Each draw from an :class:`RngStream` is a pure function of
``(seed, lineage, position)``: the stream keys a Philox generator from the
seed and lineage and uses the draw counter as the high counter word, so a
stream can be rebuilt exactly from those three values (this is what
checkpoints store).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor


class RngStream:
    def __init__(self, seed: int, lineage: tuple[int, ...] = (), position: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.lineage = tuple(int(k) for k in lineage)
        self.position = int(position)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.lineage)
        self._key = ss.generate_state(2, dtype=np.uint64)
        self._children = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, lineage={self.lineage}, position={self.position})"

    def _next_generator(self) -> np.random.Generator:
        bg = np.random.Philox(key=self._key, counter=np.array([0, 0, self.position, 0], dtype=np.uint64))
        self.position += 1
        return np.random.Generator(bg)

    def split(self, index: int | None = None) -> "RngStream":
        """Child stream, independent of the parent and of its siblings."""
        if index is None:
            index = self._children
            self._children += 1
        return RngStream(self.seed, self.lineage + (int(index),))

    def state(self) -> dict:
        return {"seed": self.seed, "lineage": list(self.lineage), "position": self.position}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(state["seed"], tuple(state["lineage"]), state["position"])

    def normal(self, shape) -> np.ndarray:
        return self._next_generator().standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next_generator().uniform(low, high, shape)

    def integers(self, high: int, shape) -> np.ndarray:
        return self._next_generator().integers(0, high, shape)


def sample_standard_normal(stream: RngStream, shape) -> Tensor:
    return Tensor(stream.normal(tuple(shape)))


@dataclass(frozen=True)
class DropoutMask:
    """Inverted-dropout mask: ``apply`` keeps units where ``bits`` is set and rescales."""

    shape: tuple[int, ...]
    keep_probability: float
    bits: np.ndarray

    @property
    def scale(self) -> float:
        return 1.0 / self.keep_probability

    def kept_fraction(self) -> float:
        return float(self.bits.mean())

    def apply(self, x: Tensor) -> Tensor:
        if x.shape != self.shape:
            raise DimensionError(f"dropout mask shape {self.shape} does not match {x.shape}")
        if self.keep_probability == 1.0:
            return x
        return x * (self.bits * self.scale)


def make_dropout_mask(stream: RngStream, shape, rate: float) -> DropoutMask:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    shape = tuple(int(n) for n in shape)
    keep = 1.0 - rate
    if rate == 0.0:
        bits = np.ones(shape)
    else:
        bits = (stream.uniform(shape) < keep).astype(np.float64)
    return DropoutMask(shape, keep, bits)

"""Interval (delta t) schedules and per-sample segment/time sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .rng import RngStream

SCHEDULE_MODES = ("linear", "exponential")


@dataclass(frozen=True)
class DeltaSchedule:
    """Piecewise-constant delta t over ``bins`` equal groups of ``total_epochs`` epochs.

    Bin values are endpoint-inclusive: bin 0 is ``start``, bin K-1 is ``end``.
    """

    total_epochs: int
    start: float = 0.1
    end: float = 0.001
    bins: int = 8
    mode: str = "linear"

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise ConfigError(f"schedule mode must be one of {SCHEDULE_MODES}, got {self.mode!r}")
        if self.bins < 2:
            raise ConfigError("delta schedule needs at least 2 bins")
        if not self.start > self.end > 0:
            raise ConfigError("delta schedule needs start > end > 0")
        if self.total_epochs < 1:
            raise ConfigError("delta schedule needs at least one epoch")

    @property
    def epochs_per_bin(self) -> float:
        return self.total_epochs / self.bins

    def bin_of(self, epoch: int) -> int:
        if not 0 <= epoch < self.total_epochs:
            raise DomainError(f"epoch {epoch} outside [0, {self.total_epochs})")
        # floor(epoch / (N / K)) in exact integer arithmetic
        return (epoch * self.bins) // self.total_epochs

    def value_at_bin(self, k: int) -> float:
        last = self.bins - 1
        if k == 0:
            return self.start
        if k == last:
            return self.end
        if self.mode == "linear":
            return self.start - k * (self.start - self.end) / last
        return self.start * (self.end / self.start) ** (k / last)

    def values(self) -> list[float]:
        return [self.value_at_bin(k) for k in range(self.bins)]


def delta_at(schedule: DeltaSchedule, epoch: int) -> float:
    return schedule.value_at_bin(schedule.bin_of(epoch))


@dataclass
class TimeSampler:
    """Draws a segment index uniformly, then t uniformly on [i/S, (i+1)/S - clamp]."""

    segments: int
    stream: RngStream
    clamp: float = 0.0

    def __post_init__(self):
        if self.segments < 1:
            raise ConfigError("segment count must be >= 1")


def sample_times(sampler: TimeSampler, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    S, dt = sampler.segments, float(sampler.clamp)
    if dt < 0:
        raise ConfigError(f"delta t must be nonnegative, got {dt}")
    if dt >= 1.0 / S:
        raise ConfigError(f"delta t {dt} does not fit inside a segment of length 1/{S}")
    seg = sampler.stream.integers(S, batch_size)
    u = sampler.stream.uniform(batch_size)
    t = seg / S + u * (1.0 / S - dt)
    return t, seg

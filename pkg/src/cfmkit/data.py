"""Synthetic conditional 2-D targets and the Gaussian noise source.

Problems and their conditions:

* ``single-point``: one condition; every target equals ``center``.
* ``eight-gaussians``: condition k selects the Gaussian centred at
  ``radius * (cos(k pi/4), sin(k pi/4))`` with std ``sigma``.
* ``two-moons``: condition 0 is the upper arc (cos a, sin a), condition 1 the
  lower arc (1 - cos a, 0.5 - sin a), a ~ U[0, pi], plus Gaussian noise
  ``sigma``; the whole set is shifted by (-0.5, -0.25).
* ``checkerboard``: a 4x4 board on [-2, 2]^2 whose filled cells satisfy
  (row + col) even; condition r picks row r and the sample is uniform over
  one of that row's two filled cells.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import RngStream

PROBLEMS = ("single-point", "eight-gaussians", "two-moons", "checkerboard")
_N_CONDITIONS = {"single-point": 1, "eight-gaussians": 8, "two-moons": 2, "checkerboard": 4}


@dataclass(frozen=True)
class ProblemSpec:
    name: str = "two-moons"
    samples_per_epoch: int = 8192
    center: tuple[float, float] = (1.5, -0.5)
    radius: float = 2.0
    sigma: float | None = None
    data_dim: int = field(default=2, init=False)

    def __post_init__(self):
        if self.name not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.name!r}; choose from {PROBLEMS}")
        if self.samples_per_epoch < 1:
            raise ConfigError("samples_per_epoch must be positive")

    @property
    def n_conditions(self) -> int:
        return _N_CONDITIONS[self.name]

    @property
    def noise_sigma(self) -> float:
        if self.sigma is not None:
            return self.sigma
        return {"eight-gaussians": 0.1, "two-moons": 0.05}.get(self.name, 0.0)

    def centers(self) -> np.ndarray:
        """Component centres (eight-gaussians) or the single point."""
        if self.name == "eight-gaussians":
            ang = np.arange(8) * np.pi / 4
            return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        if self.name == "single-point":
            return np.asarray([self.center], dtype=np.float64)
        raise ConfigError(f"{self.name} has no centres")


def sample_targets(spec: ProblemSpec, stream: RngStream, labels) -> np.ndarray:
    """Draw one target per label from the conditional distribution."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = labels.size
    if spec.name == "single-point":
        return np.broadcast_to(np.asarray(spec.center, dtype=np.float64), (n, 2)).copy()
    if spec.name == "eight-gaussians":
        return spec.centers()[labels] + spec.noise_sigma * stream.normal((n, 2))
    if spec.name == "two-moons":
        a = stream.uniform(n, 0.0, np.pi)
        upper = np.stack([np.cos(a), np.sin(a)], axis=1)
        lower = np.stack([1.0 - np.cos(a), 0.5 - np.sin(a)], axis=1)
        x = np.where(labels[:, None] == 0, upper, lower)
        return x + spec.noise_sigma * stream.normal((n, 2)) - np.array([0.5, 0.25])
    # checkerboard
    u = stream.uniform((n, 2))
    pick = stream.integers(2, n)
    col = 2 * pick + (labels % 2)
    return np.stack([-2.0 + col + u[:, 0], -2.0 + labels + u[:, 1]], axis=1)


def sample_pairs(spec: ProblemSpec, stream: RngStream, batch_size: int):
    """Independent coupling: (x0 ~ N(0, I), x1 ~ p(x | c), c ~ uniform)."""
    labels = stream.integers(spec.n_conditions, batch_size)
    x0 = stream.normal((batch_size, spec.data_dim))
    x1 = sample_targets(spec, stream, labels)
    return x0, x1, labels


def support_check(spec: ProblemSpec, x: np.ndarray, labels) -> np.ndarray:
    """Boolean per row: does the point lie in its condition's documented support?

    Gaussian-noised problems use a 6-sigma envelope.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    x = np.asarray(x, dtype=np.float64)
    tol = 6.0 * spec.noise_sigma + 1e-12
    if spec.name == "single-point":
        return np.all(np.abs(x - np.asarray(spec.center)) <= 1e-12, axis=1)
    if spec.name == "eight-gaussians":
        return np.linalg.norm(x - spec.centers()[labels], axis=1) <= tol * np.sqrt(2)
    if spec.name == "two-moons":
        p = x + np.array([0.5, 0.25])
        r_up = np.abs(np.linalg.norm(p, axis=1) - 1.0)
        r_lo = np.abs(np.linalg.norm(p - np.array([1.0, 0.5]), axis=1) - 1.0)
        ok_up = (r_up <= tol * np.sqrt(2)) & (p[:, 1] >= -tol * np.sqrt(2))
        ok_lo = (r_lo <= tol * np.sqrt(2)) & (p[:, 1] <= 0.5 + tol * np.sqrt(2))
        return np.where(labels == 0, ok_up, ok_lo)
    col = np.floor(x[:, 0] + 2.0)
    row = np.floor(x[:, 1] + 2.0)
    inside = (np.abs(x) <= 2.0).all(axis=1)
    return inside & (row == labels) & ((row + col) % 2 == 0)


def write_samples_csv(path: str | Path, x: np.ndarray, labels) -> None:
    """One row per point: condition, x, y."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["condition", "x", "y"])
        for c, row in zip(np.asarray(labels).reshape(-1), np.asarray(x)):
            writer.writerow([int(c), repr(float(row[0])), repr(float(row[1]))])


def read_samples_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["condition"]) for r in rows], dtype=np.int64)
    x = np.array([[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float64).reshape(-1, 2)
    return x, labels

"""Few-step Euler integration of a learned velocity field."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError


@dataclass
class TrajectoryRecord:
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    nfe: int = 0


def _field_fn(net):
    if hasattr(net, "velocity"):
        return lambda t, x, cond: net.velocity(t, x, cond, None, track_gradients=False).data
    if callable(net):
        return lambda t, x, cond: np.asarray(net(t, x, cond), dtype=np.float64)
    raise ContractError("net must expose velocity() or be callable as f(t, x, cond)")


def euler_sample(net, x0, cond, nfe: int) -> tuple[np.ndarray, TrajectoryRecord]:
    """Integrate dx/dt = v(t, x, cond) from t=0 to 1 with ``nfe`` uniform Euler steps.

    ``net`` is a :class:`~cfmkit.nets.VectorFieldNet` (evaluated without
    dropout and without gradient tracking) or any callable ``f(t, x, cond)``
    returning an array shaped like ``x``.
    """
    if nfe < 1:
        raise ContractError(f"nfe must be >= 1, got {nfe}")
    f = _field_fn(net)
    x = np.array(x0, dtype=np.float64)
    h = 1.0 / nfe
    record = TrajectoryRecord(times=[0.0], states=[x.copy()], nfe=nfe)
    for k in range(nfe):
        t_k = k / nfe
        v = f(np.full(x.shape[0], t_k), x, cond)
        x = x + h * v
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite state after Euler step {k}")
        record.times.append((k + 1) / nfe)
        record.states.append(x.copy())
    return x, record


def straightness(record: TrajectoryRecord) -> float:
    """Mean over steps of ||v_k - v_bar||, where v_k = nfe * (x_{k+1} - x_k).

    Norms are per point; the result averages over points as well. Zero iff
    every discrete path is a straight line traversed at constant speed.
    """
    if record.nfe < 2:
        raise ContractError("straightness needs at least two steps")
    states = np.stack(record.states)
    vel = record.nfe * np.diff(states, axis=0)
    dev = vel - vel.mean(axis=0, keepdims=True)
    return float(np.linalg.norm(dev, axis=-1).mean())

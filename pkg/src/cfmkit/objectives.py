"""Training objectives for consistency flow matching.

Aggregation convention: the distance metrics (squared L2, pseudo-Huber) are
reduced per sample over the feature axis and then averaged over the batch.
The feature-matching gap compares batch-mean feature maps, so generated
endpoints are never regressed onto their own paired targets. The baseline flow-matching loss is a plain elementwise mean
squared error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError
from .nets import Discriminator, VectorFieldNet
from .rng import DropoutMask
from .tensor import Tensor

METRICS = ("squared-l2", "pseudo-huber")


def huber_constant(data_dim: int) -> float:
    return 0.00054 * math.sqrt(data_dim)


@dataclass
class CfmLossConfig:
    segments: int = 2
    alpha: float = 1e-5
    metric: str = "squared-l2"
    huber_c: float | None = None
    delta_t: float = 1e-3

    def __post_init__(self):
        if self.segments < 1:
            raise ConfigError("segments must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.metric == "pseudo-huber" and self.huber_c is not None and self.huber_c <= 0:
            raise ConfigError("huber_c must be positive")

    def c_for(self, data_dim: int) -> float:
        return self.huber_c if self.huber_c is not None else huber_constant(data_dim)


@dataclass
class TrajectoryBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    segment: np.ndarray
    condition: Tensor
    delta_t: float = 0.0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.segment = np.asarray(self.segment, dtype=np.int64).reshape(-1)
        if self.x0.shape != self.x1.shape:
            raise DimensionError(f"x0 {self.x0.shape} and x1 {self.x1.shape} differ")
        if self.t.shape[0] != self.x0.shape[0] or self.segment.shape[0] != self.x0.shape[0]:
            raise DimensionError("t and segment must have one entry per sample")

    @property
    def size(self) -> int:
        return self.x0.shape[0]


def _column(t) -> np.ndarray:
    return np.asarray(t, dtype=np.float64).reshape(-1, 1)


def interpolate(x0, x1, t) -> np.ndarray:
    """Linear path point t*x1 + (1-t)*x0 (t scalar or per-row)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    if (t_arr < 0).any() or (t_arr > 1).any():
        raise DomainError("interpolation time outside [0, 1]")
    if t_arr.ndim:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    return t_arr * x1 + (1.0 - t_arr) * x0


def segment_end(i, S: int) -> np.ndarray:
    i = np.asarray(i)
    if (i < 0).any() or (i >= S).any():
        raise DomainError(f"segment index outside [0, {S})")
    return (i + 1) / S


def segment_endpoint(i, S: int, x0, x1) -> np.ndarray:
    """Ground-truth path point at the end of segment i."""
    return interpolate(x0, x1, segment_end(i, S))


def endpoint_map(t, x_t, v, i, S: int):
    """x_t + ((i+1)/S - t) * v: one jump to the end of segment i.

    Works on arrays or tensors; the result is differentiable in ``v`` (and
    ``x_t``) when they are tensors.
    """
    remaining = segment_end(i, S) - np.asarray(t, dtype=np.float64)
    if (remaining < -1e-12).any():
        raise DomainError("time lies beyond the end of its segment")
    coeff = np.maximum(remaining, 0.0)
    if isinstance(v, Tensor) or isinstance(x_t, Tensor):
        return T.add(x_t, T.multiply(v, _column(coeff) if coeff.ndim else float(coeff)))
    v = np.asarray(v, dtype=np.float64)
    return np.asarray(x_t, dtype=np.float64) + (_column(coeff) if coeff.ndim else coeff) * v


# ---------------------------------------------------------------- metrics


def squared_l2(x, y) -> Tensor:
    return T.mean(T.l2_norm_squared(T.subtract(x, y)))


def pseudo_huber(x, y, c: float) -> Tensor:
    """Batch mean of sqrt(||x - y||^2 + c^2) - c, norms taken per sample."""
    if c <= 0:
        raise ConfigError(f"pseudo-Huber constant must be positive, got {c}")
    per_sample = T.sqrt(T.add(T.l2_norm_squared(T.subtract(x, y)), c * c))
    return T.subtract(T.mean(per_sample), c)


def distance(x, y, cfg: CfmLossConfig) -> Tensor:
    if cfg.metric == "squared-l2":
        return squared_l2(x, y)
    d = T.as_tensor(x).shape[-1]
    return pseudo_huber(x, y, cfg.c_for(d))


# ---------------------------------------------------------------- losses


def loss_stage1(
    net: VectorFieldNet,
    batch: TrajectoryBatch,
    cfg: CfmLossConfig,
    masks: Sequence[DropoutMask] | None = None,
) -> Tensor:
    """Distance between the predicted and true end of each sample's segment."""
    S = cfg.segments
    x_t = interpolate(batch.x0, batch.x1, batch.t)
    v = net.velocity(batch.t, x_t, batch.condition, masks)
    f = endpoint_map(batch.t, x_t, v, batch.segment, S)
    target = segment_endpoint(batch.segment, S, batch.x0, batch.x1)
    return distance(f, target, cfg)


def consistency_terms(
    net: VectorFieldNet,
    batch: TrajectoryBatch,
    cfg: CfmLossConfig,
    masks: Sequence[DropoutMask] | None = None,
    target_masks: Sequence[DropoutMask] | None = None,
    target_net: VectorFieldNet | None = None,
) -> dict[str, Tensor]:
    """Tracked (v, f) at t and stop-gradient (v, f) at t + delta_t.

    The t + delta_t pass runs without gradient tracking. It reuses ``masks``
    unless ``target_masks`` is given; ``target_net`` substitutes a separate
    parameter set for that pass.
    """
    S = cfg.segments
    end = segment_end(batch.segment, S)
    t_next = batch.t + float(batch.delta_t)
    if (t_next > end + 1e-12).any():
        raise DomainError("t + delta_t leaves the sample's segment")
    t_next = np.minimum(t_next, end)
    x_t = interpolate(batch.x0, batch.x1, batch.t)
    x_next = interpolate(batch.x0, batch.x1, t_next)
    v = net.velocity(batch.t, x_t, batch.condition, masks)
    f = endpoint_map(batch.t, x_t, v, batch.segment, S)

    tnet = net if target_net is None else target_net
    tmasks = masks if target_masks is None else target_masks
    v_target = tnet.velocity(t_next, x_next, batch.condition.detach(), tmasks, track_gradients=False)
    f_target = Tensor._wrap(endpoint_map(t_next, x_next, v_target.data, batch.segment, S), False)
    return {"v": v, "f": f, "v_target": v_target, "f_target": f_target}


def loss_stage2(
    net: VectorFieldNet,
    batch: TrajectoryBatch,
    cfg: CfmLossConfig,
    masks: Sequence[DropoutMask] | None = None,
    target_masks: Sequence[DropoutMask] | None = None,
    target_net: VectorFieldNet | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Consistency objective: returns (L_sf + alpha * L_vc, L_sf, L_vc)."""
    terms = consistency_terms(net, batch, cfg, masks, target_masks, target_net)
    return combine_consistency(terms, cfg)


def combine_consistency(terms: dict[str, Tensor], cfg: CfmLossConfig) -> tuple[Tensor, Tensor, Tensor]:
    l_sf = distance(terms["f"], terms["f_target"], cfg)
    l_vc = distance(terms["v"], terms["v_target"], cfg)
    return T.add(l_sf, T.scale(l_vc, cfg.alpha)), l_sf, l_vc


def loss_fm_baseline(net: VectorFieldNet, batch: TrajectoryBatch) -> Tensor:
    """Elementwise MSE between v(t, x_t) and the linear-path velocity x1 - x0."""
    x_t = interpolate(batch.x0, batch.x1, batch.t)
    v = net.velocity(batch.t, x_t, batch.condition)
    return T.mean(T.square(T.subtract(v, batch.x1 - batch.x0)))


def loss_adversarial(
    disc: Discriminator,
    x_hat,
    x_real,
    cond=None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Least-squares GAN terms on segment endpoints.

    Returns ``(disc_loss, gen_loss, fm_loss)``:
      disc_loss = mean(D(x_hat)^2 + (1 - D(x_real))^2), gradients into D only;
      gen_loss  = mean((1 - D(x_hat))^2), gradients into x_hat only;
      fm_loss   = sum over layers of the L1 gap between batch-mean feature
                  maps, gradients into x_hat only.
    """
    x_hat = T.as_tensor(x_hat)
    x_real = np.asarray(getattr(x_real, "data", x_real), dtype=np.float64)
    if x_hat.shape != x_real.shape:
        raise DimensionError(f"x_hat {x_hat.shape} and x_real {x_real.shape} differ")

    fake_score, _ = disc(x_hat.detach(), cond)
    real_score, _ = disc(x_real, cond)
    disc_loss = T.mean(T.add(T.square(fake_score), T.square(T.subtract(1.0, real_score))))

    gen_score, gen_feats = disc(x_hat, cond, detach_params=True)
    gen_loss = T.mean(T.square(T.subtract(1.0, gen_score)))
    with T.no_grad():
        _, real_feats = disc(x_real, cond)
    gaps = [
        T.sum(T.absolute(T.subtract(T.mean(g, axis=0), np.mean(r.data, axis=0))))
        for g, r in zip(gen_feats, real_feats)
    ]
    fm_loss = gaps[0]
    for gap in gaps[1:]:
        fm_loss = T.add(fm_loss, gap)
    return disc_loss, gen_loss, fm_loss


def adversarial_objective(
    net: VectorFieldNet,
    disc: Discriminator,
    batch: TrajectoryBatch,
    cfg: CfmLossConfig,
    weights: Sequence[float] = (3.0, 1.0, 2.0),
    disc_cond=None,
    masks: Sequence[DropoutMask] | None = None,
    target_masks: Sequence[DropoutMask] | None = None,
    target_net: VectorFieldNet | None = None,
) -> dict[str, Tensor]:
    """Generator and discriminator losses for one adversarial fine-tuning step.

    ``generator`` = w_cfm * consistency + w_adv * gen_loss + w_fm * fm_loss,
    where the fake samples are the predicted segment endpoints f.
    """
    w_cfm, w_adv, w_fm = weights
    terms = consistency_terms(net, batch, cfg, masks, target_masks, target_net)
    l_cfm, l_sf, l_vc = combine_consistency(terms, cfg)
    x_real = segment_endpoint(batch.segment, cfg.segments, batch.x0, batch.x1)
    disc_loss, gen_loss, fm_loss = loss_adversarial(disc, terms["f"], x_real, disc_cond)
    generator = T.add(T.add(T.scale(l_cfm, w_cfm), T.scale(gen_loss, w_adv)), T.scale(fm_loss, w_fm))
    return {
        "generator": generator,
        "discriminator": disc_loss,
        "cfm": l_cfm,
        "sf": l_sf,
        "vc": l_vc,
        "gen": gen_loss,
        "fm": fm_loss,
    }

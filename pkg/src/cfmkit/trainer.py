"""Two-stage consistency training, adversarial fine-tuning, and the FM baseline.

Every stage draws from its own child of the run's root :class:`RngStream`,
so a run is a pure function of ``(config, seed)`` and stages can be resumed
from a checkpoint bit-for-bit.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import RunConfig
from .data import ProblemSpec, sample_pairs
from .errors import CheckpointError, ConfigError, NumericError, TrainingDivergedError
from .nets import ConditionEmbedder, Discriminator, VectorFieldNet
from .objectives import (
    TrajectoryBatch,
    adversarial_objective,
    combine_consistency,
    consistency_terms,
    loss_fm_baseline,
    loss_stage1,
)
from .rng import RngStream
from .schedules import DeltaSchedule, TimeSampler, delta_at, sample_times

log = logging.getLogger(__name__)

STAGES = ("stage1", "stage2", "adversarial", "fm-baseline")
_STREAM_INDEX = {"init": 0, "stage1": 1, "stage2": 2, "adversarial": 3, "fm-baseline": 1}
LOG_COLUMNS = ("epoch", "stage", "loss_total", "loss_sf", "loss_vc", "delta_t", "wall_seconds")
COLLAPSE_THRESHOLD = 1e-6
COLLAPSE_PATIENCE = 100


class Adam:
    """Adam with bias correction over a named parameter set.

    Parameters whose ``requires_grad`` is off (frozen) are never touched.
    """

    def __init__(self, params: dict[str, T.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[T.Tensor, np.ndarray], clip_norm: float = 0.0) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        active = {k: grads[p] for k, p in self.params.items() if p.requires_grad and p in grads}
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in active.values())))
        factor = clip_norm / norm if clip_norm > 0 and norm > clip_norm else 1.0
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for k, g in active.items():
            g = g * factor
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            self.params[k].data = self.params[k].data - update
        return norm

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.m.{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix: str, step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"{prefix}.m.{k}"])
            self.v[k] = np.array(tensors[f"{prefix}.v.{k}"])
        self.step_count = step_count


class Model:
    """The vector field, the condition embedder and the discriminator of one run."""

    def __init__(self, config: RunConfig, spec: ProblemSpec, stream: RngStream | None):
        self.field = VectorFieldNet(
            spec.data_dim,
            config.cond_dim,
            stream.split(0) if stream else None,
            hidden=config.hidden,
            time_features=config.time_features,
            activation=config.activation,
            dropout_rate=config.dropout_rate,
        )
        self.embedder = ConditionEmbedder(spec.n_conditions, config.cond_dim, stream.split(1) if stream else None)
        self.segments = config.segments
        self.n_conditions = spec.n_conditions
        self.disc = Discriminator(
            spec.data_dim,
            stream.split(2) if stream else None,
            hidden=config.disc_hidden,
            cond_dim=config.segments + spec.n_conditions + 1,
        )

    def generator_parameters(self) -> dict[str, T.Tensor]:
        params = {p.name: p for p in self.field.parameters()}
        params.update({p.name: p for p in self.embedder.parameters()})
        return params

    def discriminator_parameters(self) -> dict[str, T.Tensor]:
        return {p.name: p for p in self.disc.parameters()}

    def named_parameters(self) -> dict[str, T.Tensor]:
        return {**self.generator_parameters(), **self.discriminator_parameters()}

    def disc_condition(self, segment, labels, t) -> np.ndarray:
        """Discriminator side input: one-hot segment, one-hot label, position of t inside its segment."""
        segment = np.asarray(segment, dtype=np.int64)
        seg = np.eye(self.segments)[segment]
        lab = np.eye(self.n_conditions)[np.asarray(labels, dtype=np.int64)]
        local = np.asarray(t, dtype=np.float64).reshape(-1, 1) * self.segments - segment[:, None]
        return np.concatenate([seg, lab, local], axis=1)

    def condition(self, labels, track: bool = True) -> T.Tensor:
        if not track:
            with T.no_grad():
                return self.embedder(labels)
        return self.embedder(labels)


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append({k: row[k] for k in LOG_COLUMNS})

    def losses(self, stage: str | None = None) -> list[float]:
        return [r["loss_total"] for r in self.rows if stage is None or r["stage"] == stage]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


class TrainState:
    """Mutable training state; converts to and from :class:`Checkpoint`."""

    def __init__(self, config: RunConfig, spec: ProblemSpec | None = None):
        self.config = config
        self.spec = spec or config.problem_spec()
        root = RngStream(config.seed)
        self.model = Model(config, self.spec, root.split(_STREAM_INDEX["init"]))
        self.streams = {stage: root.split(_STREAM_INDEX[stage]) for stage in STAGES}
        self.stage = "init"
        self.epoch = 0
        self.stage_epochs = {stage: 0 for stage in STAGES}
        self.provenance: list[dict] = []
        self.opt_stage: str | None = None
        self.opt_g: Adam | None = None
        self.opt_d: Adam | None = None

    def begin(self, stage: str) -> None:
        if self.opt_stage != stage:
            lr = self.config.learning_rate_for(stage)
            self.opt_g = Adam(self.model.generator_parameters(), lr)
            self.opt_d = Adam(self.model.discriminator_parameters(), lr)
            self.opt_stage = stage
        self.stage = stage

    def to_checkpoint(self) -> Checkpoint:
        tensors = {name: p.data.copy() for name, p in self.model.named_parameters().items()}
        meta = {
            "stage": self.stage,
            "epoch": self.epoch,
            "stage_epochs": dict(self.stage_epochs),
            "rng": {stage: s.state() for stage, s in self.streams.items()},
            "provenance": list(self.provenance),
            "frozen_embedder": self.model.embedder.frozen,
            "optimizer": None,
        }
        if self.opt_g is not None:
            tensors.update(self.opt_g.state_tensors("adam.gen"))
            tensors.update(self.opt_d.state_tensors("adam.disc"))
            meta["optimizer"] = {"stage": self.opt_stage, "gen_step": self.opt_g.step_count, "disc_step": self.opt_d.step_count}
        return Checkpoint(self.config.to_dict(), tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: RunConfig | None = None) -> "TrainState":
        """Restore parameters and metadata; ``config`` may change hyperparameters but not shapes."""
        cfg = config or RunConfig.from_dict(ckpt.config)
        state = cls.__new__(cls)
        state.config = cfg
        state.spec = cfg.problem_spec()
        state.model = Model(cfg, state.spec, None)
        for name, p in state.model.named_parameters().items():
            if name not in ckpt.tensors:
                raise CheckpointError(f"checkpoint lacks tensor {name}")
            if ckpt.tensors[name].shape != p.shape:
                raise CheckpointError(f"shape mismatch for {name}: {ckpt.tensors[name].shape} vs {p.shape}")
            p.data = np.array(ckpt.tensors[name])
        meta = ckpt.meta
        state.model.embedder.frozen = bool(meta.get("frozen_embedder", False))
        state.streams = {stage: RngStream.from_state(s) for stage, s in meta["rng"].items()}
        state.stage = meta["stage"]
        state.epoch = int(meta["epoch"])
        state.stage_epochs = dict(meta["stage_epochs"])
        state.provenance = list(meta.get("provenance", []))
        state.opt_stage = state.opt_g = state.opt_d = None
        opt = meta.get("optimizer")
        if opt is not None:
            state.begin(opt["stage"])
            state.opt_g.load_state_tensors(ckpt.tensors, "adam.gen", opt["gen_step"])
            state.opt_d.load_state_tensors(ckpt.tensors, "adam.disc", opt["disc_step"])
            state.stage = meta["stage"]
        return state


# ---------------------------------------------------------------- steps


def _guard(fn, stage: str, epoch: int, step: int):
    try:
        return fn()
    except NumericError as exc:
        raise TrainingDivergedError(f"{stage} diverged at epoch {epoch}, step {step}: {exc}") from exc


def _masks(state: TrainState, stream: RngStream, batch: int):
    """(theta masks, theta-minus masks) for one consistency step."""
    cfg = state.config
    if cfg.dropout_rate <= 0:
        return None, None
    masks = state.model.field.make_masks(stream, batch, cfg.dropout_rate)
    if cfg.shared_dropout:
        return masks, None
    return masks, state.model.field.make_masks(stream, batch, cfg.dropout_rate)


def _stage1_step(state: TrainState, stream: RngStream) -> float:
    cfg = state.config
    x0, x1, labels = sample_pairs(state.spec, stream, cfg.batch_size)
    t, seg = sample_times(TimeSampler(cfg.segments, stream, 0.0), cfg.batch_size)
    with T.tape() as tp:
        batch = TrajectoryBatch(x0, x1, t, seg, state.model.condition(labels))
        loss = loss_stage1(state.model.field, batch, cfg.loss_config(0.0))
        grads = tp.backward(loss)
    state.opt_g.step(grads, cfg.grad_clip)
    return loss.item()


def _fm_step(state: TrainState, stream: RngStream) -> float:
    cfg = state.config
    x0, x1, labels = sample_pairs(state.spec, stream, cfg.batch_size)
    t = stream.uniform(cfg.batch_size)
    with T.tape() as tp:
        batch = TrajectoryBatch(x0, x1, t, np.zeros(cfg.batch_size, dtype=np.int64), state.model.condition(labels))
        loss = loss_fm_baseline(state.model.field, batch)
        grads = tp.backward(loss)
    state.opt_g.step(grads, cfg.grad_clip)
    return loss.item()


def _stage2_step(state: TrainState, stream: RngStream, dt: float) -> tuple[float, float, float]:
    cfg = state.config
    x0, x1, labels = sample_pairs(state.spec, stream, cfg.batch_size)
    t, seg = sample_times(TimeSampler(cfg.segments, stream, dt), cfg.batch_size)
    masks, target_masks = _masks(state, stream, cfg.batch_size)
    with T.tape() as tp:
        mu = state.model.condition(labels, track=not state.model.embedder.frozen)
        batch = TrajectoryBatch(x0, x1, t, seg, mu, dt)
        terms = consistency_terms(state.model.field, batch, cfg.loss_config(dt), masks, target_masks)
        total, l_sf, l_vc = combine_consistency(terms, cfg.loss_config(dt))
        grads = tp.backward(total)
    state.opt_g.step(grads, cfg.grad_clip)
    return total.item(), l_sf.item(), l_vc.item()


def _adversarial_step(state: TrainState, stream: RngStream, dt: float) -> tuple[float, float, float, float]:
    cfg = state.config
    x0, x1, labels = sample_pairs(state.spec, stream, cfg.batch_size)
    t, seg = sample_times(TimeSampler(cfg.segments, stream, dt), cfg.batch_size)
    masks, target_masks = _masks(state, stream, cfg.batch_size)
    with T.tape() as tp:
        mu = state.model.condition(labels, track=not state.model.embedder.frozen)
        batch = TrajectoryBatch(x0, x1, t, seg, mu, dt)
        out = adversarial_objective(
            state.model.field,
            state.model.disc,
            batch,
            cfg.loss_config(dt),
            (cfg.cfm_weight, cfg.adv_weight, cfg.fm_weight),
            state.model.disc_condition(seg, labels, t),
            masks,
            target_masks,
        )
        g_grads = tp.backward(out["generator"], retain_tape=True)
        d_grads = tp.backward(out["discriminator"])
    state.opt_g.step(g_grads, cfg.grad_clip)
    state.opt_d.step(d_grads, cfg.grad_clip)
    return out["generator"].item(), out["sf"].item(), out["vc"].item(), out["discriminator"].item()


def stage2_delta(config: RunConfig, epoch: int) -> float:
    """Delta t used in stage-2 epoch ``epoch`` (0-based within the stage)."""
    if config.delta_schedule == "none":
        return config.delta_t
    schedule = DeltaSchedule(
        config.stage2_epochs, config.delta_start, config.delta_end, config.delta_bins, config.delta_schedule
    )
    return delta_at(schedule, epoch)


def final_delta(config: RunConfig) -> float:
    if config.delta_schedule == "none":
        return config.delta_t
    return config.delta_end


# ---------------------------------------------------------------- stages


def _run_epochs(state: TrainState, stage: str, n_epochs: int, metrics: MetricsLog | None, epoch_fn) -> None:
    state.begin(stage)
    stream = state.streams[stage]
    start = time.perf_counter()
    while state.stage_epochs[stage] < n_epochs:
        k = state.stage_epochs[stage]
        row = epoch_fn(k, stream)
        state.stage_epochs[stage] += 1
        state.epoch += 1
        if metrics is not None:
            metrics.append(epoch=state.epoch, stage=stage, wall_seconds=time.perf_counter() - start, **row)
        log.debug("%s epoch %d: %s", stage, state.epoch, row)
    state.provenance.append({"stage": stage, "epochs": n_epochs, "end_epoch": state.epoch})


def _mean_rows(values: list[tuple[float, ...]]) -> tuple[float, ...]:
    return tuple(float(np.mean(col)) for col in zip(*values))


def run_stage1(state: TrainState, metrics: MetricsLog | None = None) -> TrainState:
    cfg = state.config

    def epoch(k, stream):
        losses = [_guard(lambda: _stage1_step(state, stream), "stage1", k, s) for s in range(cfg.steps_per_epoch)]
        mean = float(np.mean(losses))
        return {"loss_total": mean, "loss_sf": mean, "loss_vc": 0.0, "delta_t": 0.0}

    _run_epochs(state, "stage1", cfg.stage1_epochs, metrics, epoch)
    return state


def run_fm_baseline(state: TrainState, metrics: MetricsLog | None = None, epochs: int | None = None) -> TrainState:
    cfg = state.config
    n = cfg.stage1_epochs + cfg.stage2_epochs if epochs is None else epochs

    def epoch(k, stream):
        mean = float(np.mean([_guard(lambda: _fm_step(state, stream), "fm-baseline", k, s) for s in range(cfg.steps_per_epoch)]))
        return {"loss_total": mean, "loss_sf": 0.0, "loss_vc": 0.0, "delta_t": 0.0}

    _run_epochs(state, "fm-baseline", n, metrics, epoch)
    return state


def run_stage2(state: TrainState, metrics: MetricsLog | None = None) -> TrainState:
    cfg = state.config
    state.model.embedder.frozen = cfg.freeze_encoder

    def epoch(k, stream):
        dt = stage2_delta(cfg, k)
        rows = [_guard(lambda: _stage2_step(state, stream, dt), "stage2", k, s) for s in range(cfg.steps_per_epoch)]
        total, l_sf, l_vc = _mean_rows(rows)
        return {"loss_total": total, "loss_sf": l_sf, "loss_vc": l_vc, "delta_t": dt}

    _run_epochs(state, "stage2", cfg.stage2_epochs, metrics, epoch)
    return state


def run_adversarial(state: TrainState, metrics: MetricsLog | None = None) -> TrainState:
    cfg = state.config
    state.model.embedder.frozen = cfg.freeze_encoder
    dt = final_delta(cfg)
    streak = 0
    warned = False

    def epoch(k, stream):
        nonlocal streak, warned
        rows = []
        for s in range(cfg.steps_per_epoch):
            total, l_sf, l_vc, d_loss = _guard(lambda: _adversarial_step(state, stream, dt), "adversarial", k, s)
            streak = streak + 1 if d_loss < COLLAPSE_THRESHOLD else 0
            if streak >= COLLAPSE_PATIENCE and not warned:
                warnings.warn(f"discriminator loss below {COLLAPSE_THRESHOLD} for {streak} steps", RuntimeWarning)
                warned = True
            rows.append((total, l_sf, l_vc))
        total, l_sf, l_vc = _mean_rows(rows)
        return {"loss_total": total, "loss_sf": l_sf, "loss_vc": l_vc, "delta_t": dt}

    _run_epochs(state, "adversarial", cfg.adversarial_epochs, metrics, epoch)
    return state


def _resume(config: RunConfig, init: Checkpoint | None, spec: ProblemSpec | None) -> TrainState:
    if init is None:
        return TrainState(config, spec)
    return TrainState.from_checkpoint(init, config)


def train_stage1(config: RunConfig, spec: ProblemSpec | None = None, init: Checkpoint | None = None,
                 metrics: MetricsLog | None = None) -> Checkpoint:
    """Straight-flow stage: regress each segment's endpoint; returns the stage checkpoint."""
    if config.mode != "cfm":
        raise ConfigError("train_stage1 requires trainer.mode = cfm")
    return run_stage1(_resume(config, init, spec), metrics).to_checkpoint()


def train_stage2(config: RunConfig, spec: ProblemSpec | None = None, init: Checkpoint | None = None,
                 metrics: MetricsLog | None = None) -> Checkpoint:
    """Consistency stage initialised from ``init`` (normally the stage-1 checkpoint)."""
    return run_stage2(_resume(config, init, spec), metrics).to_checkpoint()


def train_adversarial(config: RunConfig, spec: ProblemSpec | None = None, init: Checkpoint | None = None,
                      metrics: MetricsLog | None = None) -> Checkpoint:
    return run_adversarial(_resume(config, init, spec), metrics).to_checkpoint()


def train_fm_baseline(config: RunConfig, spec: ProblemSpec | None = None, init: Checkpoint | None = None,
                      metrics: MetricsLog | None = None) -> Checkpoint:
    """Plain flow matching for stage1_epochs + stage2_epochs (the matched-budget baseline)."""
    return run_fm_baseline(_resume(config, init, spec), metrics).to_checkpoint()


@dataclass
class RunResult:
    checkpoints: dict[str, Checkpoint]
    metrics: MetricsLog

    @property
    def final(self) -> Checkpoint:
        return list(self.checkpoints.values())[-1]


def train_run(config: RunConfig, spec: ProblemSpec | None = None) -> RunResult:
    """Full plan for ``config.mode``: all CFM stages, or the FM baseline."""
    metrics = MetricsLog()
    state = TrainState(config, spec)
    ckpts: dict[str, Checkpoint] = {}
    if config.mode == "fm-baseline":
        run_fm_baseline(state, metrics)
        ckpts["fm-baseline"] = state.to_checkpoint()
        return RunResult(ckpts, metrics)
    run_stage1(state, metrics)
    ckpts["stage1"] = state.to_checkpoint()
    if config.stage2_epochs:
        run_stage2(state, metrics)
        ckpts["stage2"] = state.to_checkpoint()
    if config.adversarial_epochs:
        run_adversarial(state, metrics)
        ckpts["adversarial"] = state.to_checkpoint()
    return RunResult(ckpts, metrics)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    return TrainState.from_checkpoint(ckpt).model

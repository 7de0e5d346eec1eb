"""Sample-quality metrics, NFE sweeps and the ablation ladder."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import Checkpoint, canonical_json, save_checkpoint
from .config import RunConfig
from .data import ProblemSpec, sample_targets
from .errors import ContractError, DimensionError
from .rng import RngStream
from .sampler import euler_sample, straightness
from .trainer import Model, TrainState, run_adversarial, run_fm_baseline, run_stage1, run_stage2

REPORT_COLUMNS = ("model_id", "nfe", "seed", "energy_distance", "sliced_wasserstein", "straightness", "samples", "wall_seconds")
SW_SEED = 20240601
_CHUNK = 2048


def _mean_pairwise_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of ||a_i - b_j|| over all pairs, computed in blocks."""
    total = 0.0
    b_sq = np.sum(b * b, axis=1)
    for start in range(0, a.shape[0], _CHUNK):
        blk = a[start : start + _CHUNK]
        sq = np.sum(blk * blk, axis=1)[:, None] + b_sq[None, :] - 2.0 * blk @ b.T
        total += float(np.sqrt(np.maximum(sq, 0.0)).sum())
    return total / (a.shape[0] * b.shape[0])


def _within_mean(a: np.ndarray, unbiased: bool) -> float:
    n = a.shape[0]
    m = _mean_pairwise_distance(a, a)
    return m * n / (n - 1) if unbiased else m


def energy_distance(a, b, unbiased: bool = False) -> float:
    """2 E||A - B|| - E||A - A'|| - E||B - B'|| between two sample sets.

    By default the within-set expectations average over all ordered pairs
    (the energy distance between the two empirical measures), which is
    nonnegative and exactly zero for identical multisets. ``unbiased=True``
    excludes the diagonal (U-statistic) and can dip below zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("energy distance needs nonempty sample sets")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if unbiased and (a.shape[0] < 2 or b.shape[0] < 2):
        raise ContractError("unbiased energy distance needs at least two samples per set")
    cross = _mean_pairwise_distance(a, b)
    value = 2.0 * cross - _within_mean(a, unbiased) - _within_mean(b, unbiased)
    return value if unbiased else max(value, 0.0)


def sliced_wasserstein(a, b, n_projections: int = 64, seed: int = SW_SEED) -> float:
    """sqrt of the mean squared 1-D W2 over random unit directions.

    Unequal set sizes are compared through 256 matched quantiles.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    dirs = RngStream(seed).normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        q = (np.arange(256) + 0.5) / 256
        pa, pb = np.quantile(pa, q, axis=0), np.quantile(pb, q, axis=0)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


@dataclass
class EvalRow:
    model_id: str
    nfe: int
    seed: int
    energy_distance: float
    sliced_wasserstein: float
    straightness: float
    samples: int
    wall_seconds: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        key = (row.model_id, row.nfe, row.seed)
        if any((r.model_id, r.nfe, r.seed) == key for r in self.rows):
            raise ContractError(f"duplicate report row {key}")
        if row.energy_distance < 0 or row.sliced_wasserstein < 0:
            raise ContractError("distances must be nonnegative")
        self.rows.append(row)

    def extend(self, other: "EvalReport") -> None:
        for row in other.rows:
            self.add(row)

    def select(self, model_id: str | None = None, nfe: int | None = None) -> list[EvalRow]:
        return [r for r in self.rows if (model_id is None or r.model_id == model_id) and (nfe is None or r.nfe == nfe)]

    def median(self, model_id: str, nfe: int, metric: str = "energy_distance") -> float:
        return float(np.median([getattr(r, metric) for r in self.select(model_id, nfe)]))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for r in sorted(self.rows, key=lambda r: (r.model_id, r.nfe, r.seed)):
                d = asdict(r)
                writer.writerow([repr(v) if isinstance(v, float) else v for v in (d[c] for c in REPORT_COLUMNS)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "EvalReport":
        report = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
                raise ContractError(f"unexpected report columns {reader.fieldnames}")
            for raw in reader:
                report.add(
                    EvalRow(
                        raw["model_id"],
                        int(raw["nfe"]),
                        int(raw["seed"]),
                        float(raw["energy_distance"]),
                        float(raw["sliced_wasserstein"]),
                        float(raw["straightness"]),
                        int(raw["samples"]),
                        float(raw["wall_seconds"]),
                    )
                )
        return report


def generate(model: Model, spec: ProblemSpec, nfe: int, stream: RngStream, per_condition: int):
    """Euler samples for every condition: returns (samples, labels, record)."""
    labels = np.repeat(np.arange(spec.n_conditions), per_condition)
    x0 = stream.normal((labels.size, spec.data_dim))
    cond = model.condition(labels, track=False)
    x1_hat, record = euler_sample(model.field, x0, cond, nfe)
    return x1_hat, labels, record


def evaluate_model(
    model: Model,
    spec: ProblemSpec,
    nfe: int,
    seed: int,
    per_condition: int = 2048,
    model_id: str = "model",
    projections: int = 64,
) -> EvalRow:
    """Per-condition distances to fresh target samples, averaged over conditions."""
    start = time.perf_counter()
    root = RngStream(seed, (7,))
    x_hat, labels, record = generate(model, spec, nfe, root.split(0), per_condition)
    targets = sample_targets(spec, root.split(1), labels)
    ed, sw = [], []
    for c in range(spec.n_conditions):
        sel = labels == c
        ed.append(energy_distance(x_hat[sel], targets[sel]))
        sw.append(sliced_wasserstein(x_hat[sel], targets[sel], projections))
    straight = straightness(record) if nfe >= 2 else 0.0
    return EvalRow(model_id, nfe, seed, float(np.mean(ed)), float(np.mean(sw)), straight, int(labels.size),
                   time.perf_counter() - start)


def nfe_sweep(
    checkpoint: Checkpoint | Model,
    spec: ProblemSpec | None,
    nfe_list: Sequence[int],
    seeds: Iterable[int],
    per_condition: int = 2048,
    model_id: str = "model",
) -> EvalReport:
    if isinstance(checkpoint, Checkpoint):
        state = TrainState.from_checkpoint(checkpoint)
        model, spec = state.model, spec or state.spec
    else:
        model = checkpoint
    if spec is None:
        raise ContractError("nfe_sweep needs a problem spec when given a bare model")
    report = EvalReport()
    for seed in seeds:
        for nfe in nfe_list:
            report.add(evaluate_model(model, spec, nfe, seed, per_condition, model_id))
    return report


# ---------------------------------------------------------------- ablation ladder

# Each preset lists the config changes applied on top of a stage-1 run.
# None marks the stage-1-only row.
ABLATION_PRESETS: dict[str, dict | None] = {
    "A": None,
    "B": {"freeze_encoder": False, "dropout_rate": 0.0},
    "C": {"freeze_encoder": True, "dropout_rate": 0.0},
    "D": {"freeze_encoder": True, "shared_dropout": True},
    "E": {"freeze_encoder": True, "shared_dropout": True, "metric": "pseudo-huber"},
    "F": {"freeze_encoder": True, "shared_dropout": True, "delta_schedule": "linear"},
    "F-exp": {"freeze_encoder": True, "shared_dropout": True, "delta_schedule": "exponential"},
    "G": {"freeze_encoder": True, "shared_dropout": True, "adversarial": True},
    "H": {
        "freeze_encoder": True,
        "shared_dropout": True,
        "metric": "pseudo-huber",
        "delta_schedule": "linear",
        "adversarial": True,
    },
}
_TECHNIQUE_OFF = {"metric": "squared-l2", "delta_schedule": "none"}


def preset_config(base: RunConfig, preset: str) -> tuple[RunConfig, bool]:
    """(config for the preset, whether it runs adversarial fine-tuning)."""
    changes = ABLATION_PRESETS[preset]
    if changes is None:
        return base.replace(stage2_epochs=0, adversarial_epochs=0), False
    changes = dict(changes)
    adversarial = changes.pop("adversarial", False)
    merged = {**_TECHNIQUE_OFF, **changes}
    if "dropout_rate" not in merged:
        merged["dropout_rate"] = base.dropout_rate if base.dropout_rate > 0 else 0.05
    return base.replace(**merged), adversarial


# Desk-scale schedule used by the acceptance runs: a fast first stage, then
# gentle consistency and adversarial fine-tuning.
TOY_RECIPE = {
    "learning_rate": 1e-3,
    "finetune_learning_rate": 1e-5,
    "stage1_epochs": 30,
    "stage2_epochs": 20,
    "adversarial_epochs": 6,
}


def toy_config(problem: str = "two-moons", seed: int = 0, **changes) -> RunConfig:
    return RunConfig(problem=problem, seed=seed, **{**TOY_RECIPE, **changes})


def train_preset(
    base: RunConfig,
    preset: str,
    stage1: Checkpoint | None = None,
    stage2_cache: dict[str, Checkpoint] | None = None,
) -> Checkpoint:
    """Train one ladder row; ``stage1`` lets presets share the same stage-1 run.

    Presets with identical stage-2 settings (D and G) share one stage-2 run
    through ``stage2_cache``; training is deterministic so this is exact.
    """
    cfg, adversarial = preset_config(base, preset)
    if stage1 is None:
        stage1 = run_stage1(TrainState(base)).to_checkpoint()
    if ABLATION_PRESETS[preset] is None:
        return stage1
    key = canonical_json(cfg.to_dict())
    if stage2_cache is not None and key in stage2_cache:
        state = TrainState.from_checkpoint(stage2_cache[key], cfg)
    else:
        state = TrainState.from_checkpoint(stage1, cfg)
        run_stage2(state)
        if stage2_cache is not None:
            stage2_cache[key] = state.to_checkpoint()
    if adversarial:
        run_adversarial(state)
    return state.to_checkpoint()


def ablation_ladder(
    spec: ProblemSpec | str,
    seeds: Iterable[int],
    base: RunConfig | None = None,
    presets: Sequence[str] | None = None,
    nfe: int = 2,
    out_dir: str | Path | None = None,
) -> EvalReport:
    """Train and evaluate every preset (NFE=2 by default) for each seed."""
    base = base or RunConfig()
    name = spec if isinstance(spec, str) else spec.name
    presets = list(presets or ABLATION_PRESETS)
    report = EvalReport()
    for seed in seeds:
        cfg = base.replace(problem=name, seed=seed)
        stage1 = run_stage1(TrainState(cfg)).to_checkpoint()
        cache: dict[str, Checkpoint] = {}
        for preset in presets:
            ckpt = train_preset(cfg, preset, stage1, cache)
            if out_dir is not None:
                path = Path(out_dir) / f"seed{seed}" / f"{preset}.ckpt"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(ckpt, path)
            model = TrainState.from_checkpoint(ckpt).model
            report.add(evaluate_model(model, cfg.problem_spec(), nfe, seed, cfg.samples_per_condition, preset,
                                      cfg.sw_projections))
    return report


def train_baseline(base: RunConfig) -> Checkpoint:
    cfg = base.replace(mode="fm-baseline")
    return run_fm_baseline(TrainState(cfg)).to_checkpoint()

"""Run configuration: a flat typed record persisted as an INI file.

Each key lives in the section named after the module that consumes it. The
same schema validates config files, ``section.key=value`` overrides and the
checkpoint snapshot.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .data import PROBLEMS, ProblemSpec
from .errors import ConfigError
from .objectives import METRICS, CfmLossConfig

MODES = ("cfm", "fm-baseline")
DELTA_MODES = ("none", "linear", "exponential")


class ConfigParseError(ConfigError):
    """The config text is not valid INI."""


@dataclass(frozen=True)
class RunConfig:
    # data
    problem: str = "two-moons"
    samples_per_epoch: int = 8192
    # nets
    hidden: tuple[int, ...] = (128, 128, 128)
    time_features: int = 16
    cond_dim: int = 8
    activation: str = "gelu"
    disc_hidden: tuple[int, ...] = (64, 64, 64)
    # objectives
    segments: int = 2
    alpha: float = 1e-5
    metric: str = "squared-l2"
    # schedules
    delta_schedule: str = "none"
    delta_t: float = 1e-3
    delta_start: float = 0.1
    delta_end: float = 0.001
    delta_bins: int = 8
    # trainer
    seed: int = 0
    mode: str = "cfm"
    stage1_epochs: int = 50
    stage2_epochs: int = 50
    adversarial_epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-4
    finetune_learning_rate: float = 0.0
    dropout_rate: float = 0.05
    shared_dropout: bool = True
    freeze_encoder: bool = True
    cfm_weight: float = 3.0
    adv_weight: float = 1.0
    fm_weight: float = 2.0
    grad_clip: float = 1.0
    # eval
    nfe: tuple[int, ...] = (2,)
    samples_per_condition: int = 2048
    sw_projections: int = 64

    def __post_init__(self):
        _check(self.problem in PROBLEMS, f"data.problem must be one of {PROBLEMS}")
        _check(self.mode in MODES, f"trainer.mode must be one of {MODES}")
        _check(self.metric in METRICS, f"objectives.metric must be one of {METRICS}")
        _check(self.delta_schedule in DELTA_MODES, f"schedules.delta_schedule must be one of {DELTA_MODES}")
        _check(self.activation in ("gelu", "tanh"), "nets.activation must be gelu or tanh")
        for name in ("stage1_epochs", "stage2_epochs", "adversarial_epochs"):
            _check(getattr(self, name) >= 0, f"trainer.{name} must be >= 0")
        for name in ("cfm_weight", "adv_weight", "fm_weight", "alpha", "grad_clip"):
            _check(getattr(self, name) >= 0, f"{SECTION_OF[name]}.{name} must be nonnegative")
        _check(self.segments >= 1, "objectives.segments must be >= 1")
        _check(self.batch_size >= 1, "trainer.batch_size must be >= 1")
        _check(self.learning_rate > 0, "trainer.learning_rate must be positive")
        _check(self.finetune_learning_rate >= 0, "trainer.finetune_learning_rate must be nonnegative")
        _check(0.0 <= self.dropout_rate < 1.0, "trainer.dropout_rate must lie in [0, 1)")
        _check(0.0 <= self.delta_t < 1.0 / self.segments, "schedules.delta_t must lie in [0, 1/segments)")
        _check(self.delta_bins >= 2, "schedules.delta_bins must be >= 2")
        _check(self.delta_start > self.delta_end > 0, "schedules needs delta_start > delta_end > 0")
        _check(self.delta_start < 1.0 / self.segments, "schedules.delta_start must be < 1/segments")
        _check(len(self.hidden) >= 1 and min(self.hidden) >= 1, "nets.hidden needs positive widths")
        _check(len(self.disc_hidden) >= 1 and min(self.disc_hidden) >= 1, "nets.disc_hidden needs positive widths")
        _check(len(self.nfe) >= 1 and min(self.nfe) >= 1, "eval.nfe needs positive step counts")
        _check(self.samples_per_condition >= 2, "eval.samples_per_condition must be >= 2")
        _check(0 <= self.seed < 2**64, "trainer.seed must be a 64-bit unsigned integer")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.samples_per_epoch // self.batch_size)

    def learning_rate_for(self, stage: str) -> float:
        """Stage 2 and adversarial tuning use ``finetune_learning_rate`` when it is set (> 0)."""
        if stage in ("stage2", "adversarial") and self.finetune_learning_rate > 0:
            return self.finetune_learning_rate
        return self.learning_rate

    def problem_spec(self) -> ProblemSpec:
        return ProblemSpec(self.problem, samples_per_epoch=self.samples_per_epoch)

    def loss_config(self, delta_t: float | None = None) -> CfmLossConfig:
        return CfmLossConfig(
            segments=self.segments,
            alpha=self.alpha,
            metric=self.metric,
            delta_t=self.delta_t if delta_t is None else delta_t,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        unknown = set(raw) - set(FIELD_TYPES)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(k, v) for k, v in raw.items()})


def _check(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(message)


SECTIONS: dict[str, tuple[str, ...]] = {
    "data": ("problem", "samples_per_epoch"),
    "nets": ("hidden", "time_features", "cond_dim", "activation", "disc_hidden"),
    "objectives": ("segments", "alpha", "metric"),
    "schedules": ("delta_schedule", "delta_t", "delta_start", "delta_end", "delta_bins"),
    "trainer": (
        "seed",
        "mode",
        "stage1_epochs",
        "stage2_epochs",
        "adversarial_epochs",
        "batch_size",
        "learning_rate",
        "finetune_learning_rate",
        "dropout_rate",
        "shared_dropout",
        "freeze_encoder",
        "cfm_weight",
        "adv_weight",
        "fm_weight",
        "grad_clip",
    ),
    "eval": ("nfe", "samples_per_condition", "sw_projections"),
}
SECTION_OF = {key: section for section, keys in SECTIONS.items() for key in keys}
FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
DEFAULTS = RunConfig()


def _coerce(key: str, value: Any) -> Any:
    kind = FIELD_TYPES[key]
    try:
        if kind is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            return tuple(int(v) for v in value)
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("true", "yes", "on", "1"):
                return True
            if text in ("false", "no", "off", "0"):
                return False
            raise ValueError(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        if kind is float:
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{SECTION_OF[key]}.{key}: cannot read {value!r} as {kind.__name__}") from None


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(cfg: RunConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines += [f"{key} = {_format(getattr(cfg, key))}" for key in keys]
        lines.append("")
    return "\n".join(lines)


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigParseError(str(exc).splitlines()[0]) from None
    raw: dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            raw[key] = value
    return RunConfig.from_dict(raw)


def load(path: str | Path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; the section must match the key's home."""
    changes: dict[str, Any] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, value = item.split("=", 1)
        dotted = dotted.strip()
        section, _, key = dotted.rpartition(".")
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {dotted!r}")
        if section and section != SECTION_OF[key]:
            raise ConfigError(f"{key} lives in [{SECTION_OF[key]}], not [{section}]")
        changes[key] = _coerce(key, value)
    return cfg.replace(**changes)


def describe_keys() -> str:
    """One line per key with its default, grouped by section (used by --help)."""
    buf = io.StringIO()
    for section, keys in SECTIONS.items():
        buf.write(f"  [{section}]\n")
        for key in keys:
            buf.write(f"    {section}.{key} = {_format(getattr(DEFAULTS, key))}\n")
    return buf.getvalue()

"""Command-line front door: train, sample, eval, sweep, ablate, gradcheck."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_io
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import sample_targets, write_samples_csv
from .errors import CheckpointError, ConfigError, NumericError
from .evaluation import ABLATION_PRESETS, EvalReport, ablation_ladder, generate, nfe_sweep
from .gradcheck import format_table, run_checks
from .rng import RngStream
from .trainer import TrainState, train_run

OUT_ENV = "CFMKIT_OUT"
DEFAULT_OUT = "runs"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG_MISSING = 3
EXIT_CONFIG_PARSE = 4
EXIT_CONFIG_SCHEMA = 5
EXIT_IO = 6
EXIT_NUMERIC = 7
EXIT_CHECK_FAILED = 8

EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_ERROR: "unexpected internal error",
    EXIT_USAGE: "bad command-line usage",
    EXIT_CONFIG_MISSING: "config file not found",
    EXIT_CONFIG_PARSE: "config file is not valid INI",
    EXIT_CONFIG_SCHEMA: "unknown key, bad type or out-of-range value",
    EXIT_IO: "I/O failure (unreadable checkpoint, corrupt file, unwritable output)",
    EXIT_NUMERIC: "training produced NaN/Inf",
    EXIT_CHECK_FAILED: "gradcheck found a gradient mismatch",
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _epilog() -> str:
    codes = "\n".join(f"  {code}  {text}" for code, text in EXIT_CODES.items())
    return (
        f"exit codes:\n{codes}\n\n"
        f"output root: --out, else ${OUT_ENV}, else ./{DEFAULT_OUT}\n\n"
        "config keys (override with section.key=value):\n" + config_io.describe_keys()
    )


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="cfmkit", description="Consistency flow matching on 2-D toy data.", epilog=_epilog(), formatter_class=fmt
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_epilog(), formatter_class=fmt)
        p.add_argument("--config", type=Path, help="INI config file (defaults apply to missing keys)")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="shorthand for trainer.seed=N")
        p.add_argument("overrides", nargs="*", metavar="section.key=value", help="config overrides")
        return p

    add("train", "run the configured training plan and write checkpoints plus metrics.csv")
    for name, help_text in (
        ("sample", "draw Euler samples to samples.csv and samples.svg"),
        ("eval", "write an energy-distance report for the configured NFE list"),
        ("sweep", "evaluate a checkpoint over several NFE values and seeds"),
    ):
        p = add(name, help_text)
        p.add_argument("--checkpoint", type=Path, help="model checkpoint (default: OUT/final.ckpt, trained if absent)")
        p.add_argument("--nfe", type=str, help="comma-separated Euler step counts")
        if name == "sweep":
            p.add_argument("--seeds", type=str, default="0,1,2", help="comma-separated evaluation seeds")
    p = add("ablate", "train and evaluate the ablation presets")
    p.add_argument("--seeds", type=str, default="0,1,2", help="comma-separated training seeds")
    p.add_argument("--presets", type=str, default=",".join(ABLATION_PRESETS), help="comma-separated preset names")
    p.add_argument("--nfe", type=str, default="2", help="Euler step count used for the ladder")
    p = add("gradcheck", "finite-difference check of every op and loss")
    p.add_argument("--instances", type=int, default=20, help="random instances per check")
    return parser


def _int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(EXIT_USAGE, f"{what} must be comma-separated integers, got {text!r}") from None
    if not values:
        raise CliError(EXIT_USAGE, f"{what} is empty")
    return values


def resolve_config(args) -> RunConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise CliError(EXIT_CONFIG_MISSING, f"config file not found: {args.config}")
        cfg = config_io.load(args.config)
    else:
        cfg = RunConfig()
    cfg = config_io.apply_overrides(cfg, list(args.overrides))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    nfe = getattr(args, "nfe", None)
    if nfe is not None and args.command != "ablate":
        cfg = cfg.replace(nfe=tuple(_int_list(nfe, "--nfe")))
    return cfg


def output_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, DEFAULT_OUT))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train(cfg: RunConfig, out: Path) -> Path:
    result = train_run(cfg)
    for stage, ckpt in result.checkpoints.items():
        save_checkpoint(ckpt, out / f"{stage}.ckpt")
    save_checkpoint(result.final, out / "final.ckpt")
    result.metrics.write_csv(out / "metrics.csv")
    return out / "final.ckpt"


def _model_checkpoint(args, cfg: RunConfig, out: Path):
    path = args.checkpoint or out / "final.ckpt"
    if args.checkpoint is None and not path.exists():
        _train(cfg, out)
    return load_checkpoint(path)


def scatter_svg(points: np.ndarray, labels: np.ndarray, targets: np.ndarray | None = None, size: int = 480) -> str:
    """Plain SVG scatter plot, one colour per condition; ``targets`` drawn underneath in grey."""
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
    both = points if targets is None else np.concatenate([points, targets])
    lo = both.min(axis=0)
    span = max(float((both.max(axis=0) - lo).max()), 1e-9)
    pad = 10

    def to_px(p):
        xy = pad + (p - lo) / span * (size - 2 * pad)
        return xy[:, 0], size - xy[:, 1]

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if targets is not None:
        for px, py in zip(*to_px(targets)):
            lines.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="1.5" fill="#999999" fill-opacity="0.4"/>')
    for px, py, c in zip(*to_px(points), labels):
        colour = palette[int(c) % len(palette)]
        lines.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="1.5" fill="{colour}" fill-opacity="0.6"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    path = _train(cfg, out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig, out: Path) -> int:
    state = TrainState.from_checkpoint(_model_checkpoint(args, cfg, out))
    nfe = cfg.nfe[0]
    samples, labels, _ = generate(state.model, state.spec, nfe, RngStream(cfg.seed, (7,)).split(0),
                                  cfg.samples_per_condition)
    write_samples_csv(out / "samples.csv", samples, labels)
    targets = sample_targets(state.spec, RngStream(cfg.seed, (7,)).split(1), labels)
    (out / "samples.svg").write_text(scatter_svg(samples, labels, targets))
    print(f"wrote {out / 'samples.csv'} ({labels.size} rows, nfe={nfe})")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    ckpt = _model_checkpoint(args, cfg, out)
    seeds = _int_list(args.seeds, "--seeds") if args.command == "sweep" else [cfg.seed]
    report = nfe_sweep(ckpt, None, cfg.nfe, seeds, cfg.samples_per_condition, model_id=cfg.problem)
    report.write_csv(out / "report.csv")
    for row in report.rows:
        print(f"nfe={row.nfe} seed={row.seed} energy_distance={row.energy_distance:.6f}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, out: Path) -> int:
    presets = [p for p in args.presets.split(",") if p]
    unknown = [p for p in presets if p not in ABLATION_PRESETS]
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown presets {unknown}; choose from {list(ABLATION_PRESETS)}")
    nfe = _int_list(args.nfe, "--nfe")[0]
    report = EvalReport()
    for seed in _int_list(args.seeds, "--seeds"):
        part = ablation_ladder(cfg.problem, [seed], cfg, presets, nfe, out)
        part.write_csv(out / f"seed{seed}" / "report.csv")
        report.extend(part)
    report.write_csv(out / "report.csv")
    for preset in presets:
        print(f"preset={preset} nfe={nfe} median_energy_distance={report.median(preset, nfe):.6f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig, out: Path) -> int:
    results = run_checks(args.instances, cfg.seed)
    table = format_table(results)
    (out / "gradcheck.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _fail(code: int, exc: BaseException) -> int:
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error code={code} kind={type(exc).__name__} message={message!r}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = output_dir(args)
        config_io.save(cfg, out / "config.ini")
        return COMMANDS[args.command](args, cfg, out)
    except CliError as exc:
        return _fail(exc.code, exc)
    except config_io.ConfigParseError as exc:
        return _fail(EXIT_CONFIG_PARSE, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG_SCHEMA, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (CheckpointError, OSError) as exc:
        return _fail(EXIT_IO, exc)
    except Exception as exc:  # noqa: BLE001 - report anything else as one parsable line
        return _fail(EXIT_ERROR, exc)


if __name__ == "__main__":
    sys.exit(main())

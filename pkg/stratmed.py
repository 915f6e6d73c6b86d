#!/usr/bin/env python3
"""Command-line entry point for the stratified medication-recommendation pipeline."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path

from config import RunConfig, load_config
from errors import ConfigError, StratMedError
from models import AblationFlags
from pipeline import APP_VERSION, BUILD_ID, Pipeline, PipelineResult, Stage
from stratify import export_distribution
from studies import (
    ablation_study,
    case_study,
    distortion_study,
    robustness_study,
    sensitivity_study,
)


def _user_log_root() -> Path:
    """Return the per-user log location for the current platform."""
    if sys.platform == "darwin":
        return Path.home() / "Library" / "Logs" / "stratmed"
    state_home = os.environ.get("XDG_STATE_HOME") or str(Path.home() / ".local" / "state")
    return Path(state_home).expanduser() / "stratmed" / "logs"


def _default_log_root() -> Path:
    """Return ``$STRATMED_LOG_DIR`` when set, else ``logs`` beside the working directory."""
    override = os.environ.get("STRATMED_LOG_DIR")
    if override:
        return Path(override).expanduser()
    return Path("logs")


LOG_ROOT = _default_log_root()
LOG_PATH: Path | None = None
LOG_FORMAT = "%(asctime)s %(levelname)s %(message)s"


def _init_logging() -> None:
    global LOG_PATH
    timestamp = time.strftime("%Y%m%d-%H%M%S")
    LOG_PATH = None
    for root in dict.fromkeys([LOG_ROOT, _user_log_root()]):
        log_dir = root / timestamp
        try:
            log_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            print(f"Cannot write logs to {log_dir}: {e}", file=sys.stderr)
            continue
        LOG_PATH = log_dir / "stratmed.log"
        break

    # A missing log directory must never stop a run.
    if LOG_PATH is None:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logging.warning("File logging disabled; no writable log directory found.")
        return

    logging.basicConfig(
        filename=str(LOG_PATH),
        filemode="a",
        level=logging.INFO,
        format=LOG_FORMAT,
    )
    logging.info("Logging initialized at %s", LOG_PATH)
    logging.info("stratmed version=%s build=%s executable=%s", APP_VERSION, BUILD_ID, sys.executable)


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    values: dict[str, str] = {}
    if args.seed is not None:
        values["run.seed"] = str(args.seed)
    if args.out is not None:
        values["run.out_dir"] = str(args.out)
    if args.workers is not None:
        values["run.workers"] = str(args.workers)
    for flag in ("wo_p", "wo_s", "wo_sg"):
        if getattr(args, flag):
            values[f"ablation.{flag}"] = "true"
    return values


def _run_until(stage: Stage) -> Callable[[RunConfig, argparse.Namespace], PipelineResult]:
    def command(config: RunConfig, _args: argparse.Namespace) -> PipelineResult:
        result = Pipeline(config).run(stage)
        if result.report is not None:
            print(result.report.dumps(), end="")
        return result

    return command


def cmd_gen_data(config: RunConfig, args: argparse.Namespace) -> None:
    """Write the synthetic dataset and DDI files."""
    if not config.uses_synthetic:
        raise ConfigError("gen-data needs a synthetic config; remove data.dataset_path")
    result = _run_until(Stage.GEN_DATA)(config, args)
    assert result.dataset is not None
    print(f"{len(result.dataset.patients)} patients written to {config.run.out_dir / 'data'}")


def cmd_stratify(config: RunConfig, args: argparse.Namespace) -> None:
    """Build buckets and export before/after distributions for each."""
    result = _run_until(Stage.STRATIFY)(config, args)
    assert result.buckets is not None
    report_dir = config.run.out_dir / "report"
    for name in ("safety", "diag", "proc"):
        bucket = getattr(result.buckets, name)
        export_distribution(bucket, "before", report_dir / f"distribution-{name}-before.csv")
        export_distribution(bucket, "after", report_dir / f"distribution-{name}-after.csv")
        print(f"{name}: {bucket.n} layers, {bucket.erased_count} erased")


def _study(
    runner: Callable[..., list[object]], name: str
) -> Callable[[RunConfig, argparse.Namespace], None]:
    def command(config: RunConfig, _args: argparse.Namespace) -> None:
        dataset, ddi = Pipeline(config).gen_data()
        path = config.run.out_dir / "study" / f"{name}.csv"
        runner(config, dataset, ddi, path)
        print(f"{name} written to {path}")

    return command


def cmd_case_study(config: RunConfig, args: argparse.Namespace) -> None:
    """Explain one visit, optionally against the flat-bucket model."""
    result = Pipeline(config).run(Stage.TRAIN)
    assert result.model is not None and result.dataset is not None and result.buckets is not None
    baseline = None
    if args.compare:
        flat_config = replace(config, ablation=replace(config.ablation, wo_s=True).normalized())
        baseline = Pipeline(flat_config).run(Stage.TRAIN).model
    study = case_study(result.model, result.dataset, result.buckets, args.patient, args.visit, baseline)
    path = study.write(config.run.out_dir / "case")
    print(f"case study written to {path}")


COMMANDS: dict[str, tuple[str, Callable[[RunConfig, argparse.Namespace], object]]] = {
    "gen-data": ("Generate the synthetic dataset and DDI files", cmd_gen_data),
    "stratify": ("Build relevance buckets and export distributions", cmd_stratify),
    "pretrain": ("Run the pipeline through pre-training", _run_until(Stage.PRETRAIN)),
    "train": ("Run the pipeline through training", _run_until(Stage.TRAIN)),
    "evaluate": ("Run the pipeline and bootstrap-evaluate the test split", _run_until(Stage.EVALUATE)),
    "pipeline": ("Run every stage end to end", _run_until(Stage.EVALUATE)),
    "distortion-study": ("Overfitting under moderate-tier thinning", _study(distortion_study, "distortion")),
    "robustness-study": ("Jaccard change under low-frequency filtering", _study(robustness_study, "robustness")),
    "sensitivity-study": ("Grid over top-layer sizes", _study(sensitivity_study, "sensitivity")),
    "ablation-study": ("Component ablations on distorted data", _study(ablation_study, "ablation")),
    "case-study": ("Relevance matrices and prediction breakdown for one visit", cmd_case_study),
}


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser with every subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--out", type=Path, help="output directory (default: out)")
    common.add_argument("--workers", type=int, help="worker processes for study cells")
    ablations = AblationFlags()
    for flag in ("wo_p", "wo_s", "wo_sg"):
        common.add_argument(
            f"--{flag.replace('_', '-')}",
            dest=flag,
            action="store_true",
            default=getattr(ablations, flag),
            help=f"ablation: {flag}",
        )

    parser = argparse.ArgumentParser(description="Stratified medication recommendation pipeline")
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {APP_VERSION} (build {BUILD_ID})"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, _) in COMMANDS.items():
        command = sub.add_parser(name, parents=[common], help=help_text)
        if name == "case-study":
            command.add_argument("--patient", required=True, help="patient id")
            command.add_argument("--visit", type=int, required=True, help="0-based visit index")
            command.add_argument(
                "--compare", action="store_true", help="also train the flat-bucket variant and diff"
            )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, run one subcommand, and return its exit code."""
    _init_logging()
    args = build_parser().parse_args(argv)
    logging.info("Command %s", args.command)
    try:
        config = load_config(args.config, _overrides(args))
        COMMANDS[args.command][1](config, args)
    except StratMedError as e:
        logging.exception("%s failed", args.command)
        print(f"stratmed {args.command}: {e.stage or args.command}: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: generate, train, sweep, verify."""

import argparse
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from .config import apply_overrides, config, load_run_config
from .data import Dataset, generate_simulation, load_delimited, write_split_files
from .errors import ConfigError, EctrError
from .logutil import logger
from .models import RunConfig, RunManifest
from .numerics import RNG_ALGORITHM
from .reports import (
    format_run_summary,
    format_sweep_table,
    format_verify_listing,
    sweep_records,
    to_record,
    write_jsonl,
    write_manifest,
    write_report,
)
from .sweep import run_sweep
from .trainer import train
from .verify import INJECTIONS, run_checks


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _run_config(args: argparse.Namespace) -> RunConfig:
    run = load_run_config(args.config) if args.config else RunConfig()
    return apply_overrides(run, seed=args.seed)


def _dataset(run: RunConfig) -> Dataset:
    if run.data.path:
        return load_delimited(
            Path(run.data.path),
            run.data.columns,
            delimiter=run.data.separator,
            test_envs=run.data.test_envs,
            standardize_features=run.data.standardize,
        )
    return generate_simulation(run.simulation)


def _manifest(command: str, run: RunConfig, started: str, outputs: List[Path]) -> RunManifest:
    return RunManifest(
        command=command,
        config=run.model_dump(mode="json"),
        rng_algorithm=RNG_ALGORITHM,
        seed=run.train.seed,
        started_at=started,
        finished_at=_now(),
        artifact_version=config.get_artifact_version(),
        outputs=[p.name for p in outputs],
    )


def cmd_generate(args: argparse.Namespace) -> int:
    started = _now()
    run = _run_config(args)
    dataset = generate_simulation(run.simulation)
    out = Path(args.out)
    try:
        files = write_split_files(dataset, out, delimiter=run.data.separator)
    except OSError as e:
        raise ConfigError(f"cannot write to {out}: {e}") from e
    write_manifest(_manifest("generate", run, started, files), out / "manifest.json")
    print(f"wrote {len(files)} environment files to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = _now()
    run = _run_config(args)
    report = train(_dataset(run), run.train)
    out = Path(args.out)
    path = write_report(report, out / "report.jsonl")
    write_manifest(_manifest("train", run, started, [path]), out / "manifest.json")
    print(format_run_summary(report), end="")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    started = _now()
    run = _run_config(args)
    rows, aggregates = run_sweep(run, _dataset(run), jobs=args.jobs)
    out = Path(args.out)
    path = write_jsonl(sweep_records(rows, aggregates), out / "sweep.jsonl")
    write_manifest(_manifest("sweep", run, started, [path]), out / "manifest.json")
    print(format_sweep_table(rows, aggregates), end="")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    summary = run_checks(tolerance=args.tolerance, inject=args.inject or ())
    if args.out:
        write_jsonl((to_record(c, "check") for c in summary.checks), Path(args.out) / "verify.jsonl")
    print(format_verify_listing(summary), end="")
    return 0 if summary.passed else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat run config or JSON manifest")
    common.add_argument("--seed", type=int, help="override simulation and training seeds")

    parser = argparse.ArgumentParser(
        prog="ectr",
        description="Environment-conditioned tail reweighting for TV-based invariant learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, handler, help_text in (
        ("generate", cmd_generate, "write the synthetic mixed-shift benchmark"),
        ("train", cmd_train, "train one method and write its report"),
        ("sweep", cmd_sweep, "train over a grid of hyperparameters and seeds"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--out", default="ectr-out", help="output directory")
        p.set_defaults(handler=handler)
        if name == "sweep":
            p.add_argument("--jobs", type=int, help="parallel sweep workers (default ECTR_JOBS)")

    verify = sub.add_parser("verify", parents=[common], help="run the oracle and invariant suites")
    verify.add_argument("--out", default=None, help="also write check records here")
    verify.add_argument("--tolerance", type=float, default=None, help="finite-difference tolerance")
    verify.add_argument("--inject", action="append", choices=INJECTIONS, help=argparse.SUPPRESS)
    verify.set_defaults(handler=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return its exit status."""
    args = build_parser().parse_args(argv)
    try:
        try:
            config.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if getattr(args, "jobs", None) is not None and args.jobs <= 0:
            raise ConfigError("--jobs must be positive")
        if getattr(args, "tolerance", None) is not None and args.tolerance <= 0:
            raise ConfigError("--tolerance must be positive")
        return args.handler(args)
    except EctrError as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())

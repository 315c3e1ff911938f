"""Command line: python -m backend.cli {check,solve,simulate,analyze,sweep,runs}."""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError
from sqlalchemy.exc import SQLAlchemyError

from backend import storage
from backend.config_loader import ConfigError, RunConfig, load_config
from backend.settings import Settings, configure_logging, get_settings
from services.errors import (
    AssumptionViolated,
    GridMismatch,
    InstabilityDetected,
    MinPriceError,
    NoConvergence,
)
from services.gateway_service import SWEEP_AXES, GatewayService

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ASSUMPTION = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minprice", description="Optimal liquidation under a minimum-price condition")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def _with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", "-c", type=Path, default=None, help="INI run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--output", "-o", type=Path, default=None, help="output directory")

    check = sub.add_parser("check", help="validate the model assumptions")
    _with_config(check)

    solve = sub.add_parser("solve", help="solve the value PDE and write grids plus manifest")
    _with_config(solve)
    solve.add_argument("--format", choices=("csv", "npz"), action="append", default=None, help="grid file format")

    simulate = sub.add_parser("simulate", help="simulate paths against solved grids")
    _with_config(simulate)
    simulate.add_argument("--grids", type=Path, default=None, help="directory of a previous solve (default: output)")

    analyze = sub.add_parser("analyze", help="summarize path records")
    analyze.add_argument("--records", "-r", type=Path, required=True)
    analyze.add_argument("--baseline", "-b", type=Path, default=None, help="records of the uniform-speed run")
    analyze.add_argument("--output", "-o", type=Path, default=None)

    sweep = sub.add_parser("sweep", help="solve, simulate and analyze over one parameter axis")
    _with_config(sweep)
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument("--values", required=True, help="comma separated values")

    runs = sub.add_parser("runs", help="list or inspect runs recorded in the registry")
    runs.add_argument("--output", "-o", type=Path, default=None, help="output directory holding runs.sqlite")
    runs.add_argument("--limit", type=int, default=20)
    runs.add_argument("--command", dest="only", default=None, help="only runs of this command")
    runs.add_argument("--id", type=int, default=None, help="print one run in full")
    runs.add_argument("--health", action="store_true", help="check the registry database")
    return parser


def _output_dir(args: argparse.Namespace, config: Optional[RunConfig]) -> Path:
    if args.output is not None:
        return args.output
    env = get_settings().output_dir
    if env is not None:
        return env
    if config is not None:
        return config.output.directory
    return Path(args.records).parent


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config, args.overrides)
    if getattr(args, "format", None):
        config = config.model_copy(update={"output": config.output.model_copy(update={"formats": tuple(args.format)})})
    return config


def _runs(args: argparse.Namespace, settings: Settings) -> int:
    out_dir = args.output or settings.output_dir or Path("output")
    if not settings.database_url and not (Path(out_dir) / "runs.sqlite").exists():
        raise FileNotFoundError(f"no run registry in {out_dir}")
    url = settings.registry_url(out_dir)
    if args.health:
        report = storage.check_database_health(url)
        print(json.dumps(report, indent=2))
        return EXIT_OK if report["status"] == "healthy" else EXIT_IO
    if args.id is not None:
        row = storage.get_run(url, args.id)
        if row is None:
            print(f"❌ no run with id {args.id}")
            return EXIT_IO
        print(json.dumps(row, indent=2, default=str))
        return EXIT_OK
    rows = storage.list_runs(url, args.limit, args.only)
    for row in rows:
        print(f"{row['id']:>5}  {row['created_at']}  {row['command']:<8}  {row['config_hash'][:12]}  {row['output_dir']}")
    logger.info(f"📋 {len(rows)} runs in {url}")
    return EXIT_OK


def run(args: argparse.Namespace) -> int:
    settings = get_settings()
    if args.command == "runs":
        return _runs(args, settings)
    config = _load(args) if args.command != "analyze" else None
    out_dir = _output_dir(args, config)
    registry = settings.registry_url(out_dir) if settings.registry_enabled else None
    if registry:
        out_dir.mkdir(parents=True, exist_ok=True)
    gateway = GatewayService(n_jobs=settings.n_jobs, registry_url=registry)

    if args.command == "check":
        result = gateway.cmd_check(config)
        for line in result.lines():
            print(line)
        if result.exit_code:
            print(f"❌ assumption violated: {', '.join(c.name for c in result.report.failures)}")
        return result.exit_code
    if args.command == "solve":
        result = gateway.cmd_solve(config, out_dir)
        print(f"✅ manifest: {result.paths['manifest']}")
        return EXIT_OK
    if args.command == "simulate":
        path = gateway.cmd_simulate(config, args.grids, out_dir)
        print(f"✅ records: {path}")
        return EXIT_OK
    if args.command == "analyze":
        summary = gateway.cmd_analyze(args.records, out_dir, args.baseline)
        print(f"✅ p_liquidated={summary.p_liquidated:.4f} mean_fq_pos={summary.mean_fq_pos:.4f}")
        return EXIT_OK
    if args.command == "sweep":
        values = [float(v) for v in args.values.split(",") if v.strip()]
        table = gateway.cmd_sweep(config, args.axis, values, out_dir)
        print(table.to_string(index=False))
        return EXIT_OK
    return EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(verbose=args.verbose)
    try:
        return run(args)
    except AssumptionViolated as e:
        logger.error(f"❌ {e}")
        return EXIT_ASSUMPTION
    except (NoConvergence, InstabilityDetected) as e:
        logger.error(f"❌ {e}")
        return EXIT_CONVERGENCE
    except (OSError, GridMismatch, ConfigError, configparser.Error, ValidationError, SQLAlchemyError) as e:
        logger.error(f"❌ {e}")
        return EXIT_IO
    except MinPriceError as e:
        logger.error(f"❌ {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

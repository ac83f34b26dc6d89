"""
Molecular Energy Uncertainty Toolkit

Deep-ensemble energy regression on molecular graphs with calibrated
uncertainty: ingest structures, train seeded ensemble members, predict,
recalibrate the predicted variances and evaluate error and calibration.

Usage:
    python main.py <command> [--config FILE] [--set key=value ...] [--output DIR]

Commands:
    ingest, train, predict, recalibrate, evaluate, sweep, pipeline

Environment Variables:
    APP_ENV: Environment (development, production, testing)
    LOG_LEVEL: Logging level (DEBUG, INFO, WARNING, ERROR)
    MOLUQ_OUTPUT_ROOT: Default output directory (default: ./output)
    MOLUQ_WORKERS: Members trained concurrently (default: 1)

Example:
    python main.py pipeline --set data.source=synthetic --set data.n_train=600 --set data.n_val=200
"""

import argparse
import asyncio
import os
import sys
from pathlib import Path
from typing import List, Optional

import torch

from commands import COMMANDS
from config.pipeline import echo_config, load_pipeline_config, parse_overrides
from config.settings import get_config
from core.errors import MolUQError
from core.orchestrator import PipelineOrchestrator
from utils import configure_logging, get_logger

logger = get_logger(__name__)


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Flat key-value config file (dotted keys)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config value, e.g. --set train.max_steps=1000 (repeatable)",
    )
    common.add_argument("--output", type=Path, default=None, help="Output directory of the run")
    common.add_argument(
        "--env",
        type=str,
        choices=["development", "production", "testing"],
        default=None,
        help="Environment to run in",
    )
    common.add_argument("--log-level", type=str, default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument(
        "--strict-deterministic",
        action="store_true",
        help="Sequential member training and single-threaded reductions for byte-identical reruns",
    )
    common.add_argument("--workers", type=int, default=None, help="Members trained concurrently")

    parser = argparse.ArgumentParser(
        description="Molecular Energy Uncertainty Toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Parse QM9-style xyz files and split 110000/10000/rest
  python main.py ingest --set data.xyz_path=qm9/ --set data.reference_energies=atomref.txt

  # Train the ensemble, then predict validation and test
  python main.py train --config run.cfg
  python main.py predict --part val --config run.cfg
  python main.py predict --part test --config run.cfg

  # Fit the calibration and compare calibrated with uncalibrated metrics
  python main.py recalibrate --config run.cfg
  python main.py evaluate --both --config run.cfg
        """,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    subparsers.add_parser("ingest", parents=[common], help="Parse structures, write dataset cache and split")
    subparsers.add_parser("train", parents=[common], help="Train the ensemble members")

    predict = subparsers.add_parser("predict", parents=[common], help="Ensemble predictions for a split part")
    predict.add_argument("--part", type=str, default="test", help="train, val, test, all or an extra part")
    predict.add_argument("--manifest", type=Path, default=None, help="Training manifest (default: <output>/manifest.json)")
    predict.add_argument("--out", type=Path, default=None, help="Prediction CSV path")

    recalibrate = subparsers.add_parser("recalibrate", parents=[common], help="Fit the variance calibration")
    recalibrate.add_argument("--predictions", type=Path, default=None, help="Validation prediction CSV")
    recalibrate.add_argument(
        "--affine-pairs",
        type=Path,
        default=None,
        help="Prediction CSV of paired cross-dataset energies for the Huber correction",
    )

    evaluate = subparsers.add_parser("evaluate", parents=[common], help="Error and calibration metrics")
    evaluate.add_argument("--predictions", type=Path, default=None, help="Test prediction CSV")
    evaluate.add_argument("--calibrated", action="store_true", help="Apply the fitted calibration")
    evaluate.add_argument("--both", action="store_true", help="Write uncalibrated and calibrated reports")
    evaluate.add_argument("--calibration", type=Path, default=None, help="Calibration JSON")
    evaluate.add_argument("--affine", type=Path, default=None, help="Affine correction JSON")

    sweep = subparsers.add_parser("sweep", parents=[common], help="Ensemble-size or learning-curve sweep")
    sweep.add_argument("--kind", type=str, choices=["ensemble_size", "train_fraction"], default=None)

    subparsers.add_parser("pipeline", parents=[common], help="Run ingest through evaluate in one call")

    return parser.parse_args(argv)


def _command_kwargs(args: argparse.Namespace) -> dict:
    names = {
        "predict": ("part", "manifest", "out"),
        "recalibrate": ("predictions", "affine_pairs"),
        "evaluate": ("predictions", "calibrated", "both", "calibration", "affine"),
        "sweep": ("kind",),
    }.get(args.command, ())
    return {name: getattr(args, name) for name in names}


async def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    try:
        # Parse arguments
        args = parse_arguments(argv)

        # Set environment if specified
        if args.env:
            os.environ["APP_ENV"] = args.env

        # Get configuration
        app_config = get_config(args.env)
        if args.workers is not None:
            app_config.WORKERS = args.workers
        strict = args.strict_deterministic or app_config.STRICT_DETERMINISTIC

        pipeline_config = load_pipeline_config(args.config, parse_overrides(args.overrides))
        output_dir = args.output or pipeline_config.output_dir or Path(app_config.OUTPUT_ROOT)
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)

        log_file = output_dir / "run.log" if app_config.SAVE_RUN_LOG else None
        configure_logging(args.log_level or app_config.LOG_LEVEL, log_file)
        logger.info(f"Running {args.command} in {app_config.__class__.__name__} mode")
        logger.info(f"Output directory: {output_dir}")

        if strict:
            torch.set_num_threads(1)
            logger.info("Strict deterministic mode: sequential members, single-threaded reductions")
        elif app_config.TORCH_THREADS > 0:
            torch.set_num_threads(app_config.TORCH_THREADS)

        echo_config(pipeline_config, output_dir)

        if args.command == "pipeline":
            orchestrator = PipelineOrchestrator(pipeline_config, output_dir, app_config, strict)
            await orchestrator.run_full_pipeline()
            return orchestrator.exit_code

        command = COMMANDS[args.command](pipeline_config, output_dir, app_config=app_config, strict=strict)
        result = await command.run(**_command_kwargs(args))
        if not result.success:
            logger.error(f"{args.command} failed: {result.error or result.reason}")
        return result.exit_code

    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130

    except MolUQError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code

    except Exception as e:
        logger.error(f"Fatal error: {str(e)}", exc_info=True)
        return 1


def cli(argv: Optional[List[str]] = None) -> int:
    return asyncio.run(main(argv))


if __name__ == "__main__":
    sys.exit(cli())

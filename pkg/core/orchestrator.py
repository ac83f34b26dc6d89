"""End-to-end pipeline: ingest, train, predict, recalibrate, evaluate"""

from pathlib import Path
from typing import Dict, List, Optional, Tuple

from commands import (
    BaseCommand,
    EvaluateCommand,
    IngestCommand,
    PredictCommand,
    RecalibrateCommand,
    TrainCommand,
)
from commands.base_command import AFFINE_FILE, predictions_file
from config.pipeline import PipelineConfig
from config.settings import Config, get_config
from core.models import CommandResult
from utils import get_logger, write_json

logger = get_logger(__name__)

SUMMARY_FORMAT = "moluq-pipeline-summary"
SUMMARY_VERSION = 1


class PipelineOrchestrator:
    """
    Runs every command of a pipeline in order against one output directory:
    1. Ingest raw structures into the dataset cache and split
    2. Train the ensemble members
    3. Predict the validation and test parts (and the affine set in overlap mode)
    4. Fit the calibration on validation predictions
    5. Evaluate test predictions, uncalibrated and calibrated

    Stops at the first failing step.
    """

    def __init__(
        self,
        pipeline_config: PipelineConfig,
        output_dir: Path,
        app_config: Optional[Config] = None,
        strict: bool = False,
    ):
        self.config = pipeline_config
        self.output_dir = Path(output_dir)
        self.app_config = app_config or get_config()
        self.strict = strict
        self.results: Dict[str, CommandResult] = {}

    def _command(self, cls) -> BaseCommand:
        return cls(self.config, self.output_dir, app_config=self.app_config, strict=self.strict)

    def _steps(self) -> List[Tuple[str, BaseCommand, dict]]:
        overlap = self.config.data.source == "xyz" and self.config.data.split_mode == "overlap"
        steps = [
            ("ingest", self._command(IngestCommand), {}),
            ("train", self._command(TrainCommand), {}),
            ("predict_val", self._command(PredictCommand), {"part": "val"}),
            ("predict_test", self._command(PredictCommand), {"part": "test"}),
        ]
        recalibrate = {}
        evaluate = {"both": True}
        if overlap:
            steps.append(("predict_affine", self._command(PredictCommand), {"part": "affine"}))
            recalibrate["affine_pairs"] = self.output_dir / predictions_file("affine")
            evaluate["affine"] = self.output_dir / AFFINE_FILE
        steps.append(("recalibrate", self._command(RecalibrateCommand), recalibrate))
        steps.append(("evaluate", self._command(EvaluateCommand), evaluate))
        return steps

    async def run_full_pipeline(self) -> Dict[str, CommandResult]:
        """
        Run all steps

        Returns:
            Dictionary mapping step names to CommandResult objects
        """
        logger.info("=" * 60)
        logger.info(f"Starting pipeline in {self.output_dir}")
        logger.info("=" * 60)

        steps = self._steps()
        for number, (step, command, kwargs) in enumerate(steps, start=1):
            logger.info(f"[{number}/{len(steps)}] {step}...")
            result = await command.run(**kwargs)
            self.results[step] = result
            if not result.success:
                logger.error(f"Pipeline stopped at {step}: {result.error or result.reason}")
                break

        self._print_results_summary()
        self._save_summary()
        return self.results

    @property
    def exit_code(self) -> int:
        for result in self.results.values():
            if not result.success:
                return result.exit_code
        return 0

    def _print_results_summary(self) -> None:
        successful = sum(1 for r in self.results.values() if r.success)
        logger.info(f"Steps: {len(self.results)} | Success: {successful} | Failed: {len(self.results) - successful}")
        for step, result in self.results.items():
            status_icon = "✓" if result.success else "✗"
            logger.info(f"  {status_icon} {step:15} - {result.reason}")
            if result.error:
                logger.debug(f"    Error: {result.error}")

    def _save_summary(self) -> None:
        try:
            write_json(
                self.output_dir / "pipeline_summary.json",
                {"steps": [r.to_dict() for r in self.results.values()]},
                SUMMARY_FORMAT,
                SUMMARY_VERSION,
            )
        except OSError as e:
            logger.warning(f"Failed to save pipeline summary: {str(e)}")


async def run_pipeline(
    pipeline_config: PipelineConfig,
    output_dir: Path,
    app_config: Optional[Config] = None,
    strict: bool = False,
) -> Dict[str, CommandResult]:
    """Convenience function to run the complete pipeline"""
    orchestrator = PipelineOrchestrator(pipeline_config, output_dir, app_config, strict)
    return await orchestrator.run_full_pipeline()

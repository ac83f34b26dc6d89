"""evaluate: metrics and reliability data for a prediction file"""

from pathlib import Path
from typing import Dict, List, Optional, Tuple

from commands.base_command import CALIBRATION_FILE, EVALUATION_DIR, BaseCommand, predictions_file
from config.pipeline import EvalConfig
from core.calibrate import (
    AffineCorrection,
    Calibration,
    apply_affine_table,
    apply_calibration_table,
    load_affine,
    load_calibration,
)
from core.ensemble import load_predictions
from core.errors import ConfigError
from core.evalmetrics import report, write_report
from core.models import CalibrationReport, CommandResult, PredictionTable

METRIC_KEYS = ("N", "MAE", "RMSE", "NLL", "ENCE", "CV", "quantile_SE")


def evaluate_table(
    table: PredictionTable,
    eval_config: EvalConfig,
    calibration: Optional[Calibration] = None,
    affine: Optional[AffineCorrection] = None,
) -> CalibrationReport:
    """Calibrate, then correct, then score"""
    if calibration is not None:
        table = apply_calibration_table(calibration, table)
    if affine is not None:
        table = apply_affine_table(affine, table)
    return report(table, None, eval_config)


def metric_row(result: CalibrationReport) -> Dict[str, float]:
    values = result.to_dict()
    return {key: values[key] for key in METRIC_KEYS}


class EvaluateCommand(BaseCommand):
    """Writes report.json, reliability_bins.csv and quantile_curve.csv"""

    name = "evaluate"

    async def _execute(
        self,
        predictions: Optional[Path] = None,
        calibrated: bool = False,
        both: bool = False,
        calibration: Optional[Path] = None,
        affine: Optional[Path] = None,
        **kwargs,
    ) -> CommandResult:
        source = Path(predictions) if predictions else self._require(self.path(predictions_file("test")), "predict --part test")
        table = load_predictions(source)
        correction = load_affine(affine) if affine else None

        fitted = None
        if calibrated or both:
            calibration_path = Path(calibration) if calibration else self.path(CALIBRATION_FILE)
            if not calibration_path.exists():
                raise ConfigError(f"calibration artifact not found: {calibration_path}")
            fitted = load_calibration(calibration_path)

        variants: List[Tuple[str, Optional[Calibration], Path]]
        if both:
            variants = [
                ("uncalibrated", None, self.path(EVALUATION_DIR, "uncalibrated")),
                ("calibrated", fitted, self.path(EVALUATION_DIR, "calibrated")),
            ]
        elif calibrated:
            variants = [("calibrated", fitted, self.path(EVALUATION_DIR))]
        else:
            variants = [("uncalibrated", None, self.path(EVALUATION_DIR))]

        artifacts: Dict[str, Path] = {}
        summary = {}
        for label, variant_calibration, directory in variants:
            self.logger.info(f"Scoring {label} predictions from {source.name}")
            result = evaluate_table(table, self.config.eval, variant_calibration, correction)
            for kind, path in write_report(result, directory).items():
                artifacts[f"{label}_{kind}"] = path
            summary[label] = metric_row(result)

        return self._ok(f"{len(table)} predictions evaluated", artifacts, summary)

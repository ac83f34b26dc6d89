"""recalibrate: fit the variance calibration (and optional affine correction)"""

from pathlib import Path
from typing import Optional

import numpy as np

from commands.base_command import AFFINE_FILE, CALIBRATION_FILE, BaseCommand, predictions_file
from core.calibrate import fit_calibration, fit_huber, save_affine, save_calibration
from core.ensemble import load_predictions
from core.errors import DataError
from core.models import CommandResult, PredictionTable


def _labelled(table: PredictionTable, source: Path) -> PredictionTable:
    if len(table) < 2:
        raise DataError(f"{source}: calibration needs at least 2 predictions, got {len(table)}")
    if not np.all(np.isfinite(table.y)):
        raise DataError(f"{source}: every calibration prediction needs a target")
    return table


class RecalibrateCommand(BaseCommand):
    """Writes calibration.json, and affine.json when paired energies are given"""

    name = "recalibrate"

    async def _execute(
        self,
        predictions: Optional[Path] = None,
        affine_pairs: Optional[Path] = None,
        **kwargs,
    ) -> CommandResult:
        source = Path(predictions) if predictions else self._require(self.path(predictions_file("val")), "predict --part val")
        table = _labelled(load_predictions(source), source)
        settings = self.config.calibration

        if np.ptp(table.total) == 0.0:
            self.logger.warning("Calibration inputs have CV 0: every predicted variance is equal")
        calibration = fit_calibration(
            table.total,
            (table.y - table.mean) ** 2,
            method=settings.method,
            floor=self.config.net.min_variance,
            interpolation=settings.interpolation,
        )
        artifacts = {"calibration": save_calibration(calibration, self.path(CALIBRATION_FILE))}
        summary = {
            "method": calibration.method,
            "n_fit": calibration.n_fit,
            "mean_scale_factor": calibration.mean_scale_factor,
            "scale_factor_sd": calibration.scale_factor_sd,
        }
        self.logger.info(
            f"Scale factor on the calibration set: mean {calibration.mean_scale_factor:.4f}, "
            f"SD {calibration.scale_factor_sd:.4f}"
        )

        if affine_pairs:
            pairs_path = Path(affine_pairs)
            pairs = _labelled(load_predictions(pairs_path), pairs_path)
            correction = fit_huber(pairs.mean, pairs.y, delta=settings.huber_delta)
            artifacts["affine"] = save_affine(correction, self.path(AFFINE_FILE))
            summary.update({"coefficient": correction.coefficient, "intercept": correction.intercept})

        return self._ok(f"{calibration.method} calibration fitted on {len(table)} predictions", artifacts, summary)

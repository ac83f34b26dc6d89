"""Post-hoc recalibration of predicted variances and affine energy correction"""

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.isotonic import IsotonicRegression

from core.errors import DataError, DomainError
from core.models import EnsemblePrediction, PredictionTable
from utils import get_logger, read_json, write_json

logger = get_logger(__name__)

CALIBRATION_FORMAT = "moluq-calibration"
CALIBRATION_VERSION = 1
AFFINE_FORMAT = "moluq-affine"
AFFINE_VERSION = 1

DEFAULT_FLOOR = 1e-6
HUBER_TOLERANCE = 1e-10
HUBER_MAX_ITERATIONS = 100


def _validate_fit_inputs(variances: Sequence[float], squared_errors: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    v = np.asarray(variances, dtype=np.float64).ravel()
    e = np.asarray(squared_errors, dtype=np.float64).ravel()
    if v.shape != e.shape:
        raise DataError(f"{v.size} variances but {e.size} squared errors")
    if v.size < 2:
        raise DataError(f"calibration needs at least 2 points, got {v.size}")
    if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
        raise DomainError("calibration inputs must be positive finite variances")
    if not np.all(np.isfinite(e)) or np.any(e < 0.0):
        raise DomainError("squared errors must be finite and non-negative")
    return v, e


@dataclass(frozen=True, eq=False)
class CalibrationMap:
    """
    Monotone map from predicted variance to calibrated variance.

    Between knots the map is left-constant ("step") or linear; outside the
    knot range it is flat. Outputs never fall below floor.
    """
    knots_in: np.ndarray
    knots_out: np.ndarray
    floor: float = DEFAULT_FLOOR
    interpolation: str = "step"
    n_fit: int = 0
    mean_scale_factor: Optional[float] = None
    scale_factor_sd: Optional[float] = None

    method = "isotonic"

    def __post_init__(self):
        if self.floor <= 0.0:
            raise DomainError(f"floor must be positive, got {self.floor}")
        if self.interpolation not in ("step", "linear"):
            raise DomainError(f"unknown interpolation {self.interpolation!r}")
        if self.knots_in.size == 0 or self.knots_in.shape != self.knots_out.shape:
            raise DataError("calibration map needs matching nonempty knot arrays")
        if np.any(np.diff(self.knots_in) < 0) or np.any(np.diff(self.knots_out) < 0):
            raise DataError("calibration knots must be non-decreasing")

    def transform(self, variances: Union[float, Sequence[float], np.ndarray]) -> np.ndarray:
        v = np.asarray(variances, dtype=np.float64)
        if self.interpolation == "linear":
            out = np.interp(v, self.knots_in, self.knots_out)
        else:
            index = np.clip(np.searchsorted(self.knots_in, v, side="right") - 1, 0, self.knots_in.size - 1)
            out = self.knots_out[index]
        return np.maximum(out, self.floor)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "knots": [[float(a), float(b)] for a, b in zip(self.knots_in, self.knots_out)],
            "floor": self.floor,
            "interpolation": self.interpolation,
            "n_fit": self.n_fit,
            "mean_scale_factor": self.mean_scale_factor,
            "scale_factor_sd": self.scale_factor_sd,
        }


@dataclass(frozen=True)
class ScalarCalibration:
    """Constant-factor baseline: variance -> factor * variance"""
    factor: float
    floor: float = DEFAULT_FLOOR
    n_fit: int = 0
    mean_scale_factor: Optional[float] = None
    scale_factor_sd: Optional[float] = None

    method = "scalar"

    def transform(self, variances: Union[float, Sequence[float], np.ndarray]) -> np.ndarray:
        return np.maximum(self.factor * np.asarray(variances, dtype=np.float64), self.floor)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "factor": self.factor,
            "floor": self.floor,
            "n_fit": self.n_fit,
            "mean_scale_factor": self.mean_scale_factor,
            "scale_factor_sd": self.scale_factor_sd,
        }


Calibration = Union[CalibrationMap, ScalarCalibration]


def scale_factor_stats(calibration: Calibration, variances: Sequence[float]) -> Tuple[float, float]:
    """Mean and population SD of s^2 = f(var) / var over a set of predictions"""
    v = np.asarray(variances, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    factors = calibration.transform(v) / v
    return float(np.mean(factors)), float(np.std(factors))


def fit_isotonic(
    variances: Sequence[float],
    squared_errors: Sequence[float],
    floor: float = DEFAULT_FLOOR,
    interpolation: str = "step",
) -> CalibrationMap:
    """
    Least-squares monotone fit of squared errors against predicted variances
    (pool adjacent violators; tied inputs are pooled)
    """
    v, e = _validate_fit_inputs(variances, squared_errors)
    if np.ptp(v) == 0.0:
        logger.warning("All calibration variances are equal; the map has a single knot")
    solver = IsotonicRegression(increasing=True, out_of_bounds="clip").fit(v, e)
    knots_in = np.asarray(solver.X_thresholds_, dtype=np.float64)
    knots_out = np.asarray(solver.y_thresholds_, dtype=np.float64)
    fitted = CalibrationMap(knots_in, knots_out, floor=floor, interpolation=interpolation, n_fit=int(v.size))
    mean_factor, factor_sd = scale_factor_stats(fitted, v)
    logger.info(
        f"Isotonic calibration fitted on {v.size} points with {knots_in.size} knots; "
        f"mean scale factor {mean_factor:.4f} (SD {factor_sd:.4f})"
    )
    return replace(fitted, mean_scale_factor=mean_factor, scale_factor_sd=factor_sd)


def fit_scalar(
    variances: Sequence[float],
    squared_errors: Sequence[float],
    floor: float = DEFAULT_FLOOR,
) -> ScalarCalibration:
    """NLL-optimal constant factor s^2 = mean(err^2 / var)"""
    v, e = _validate_fit_inputs(variances, squared_errors)
    factor = float(np.mean(e / v))
    if factor <= 0.0:
        raise DomainError("all squared errors are zero; a scalar factor cannot be fitted")
    fitted = ScalarCalibration(factor=factor, floor=floor, n_fit=int(v.size))
    mean_factor, factor_sd = scale_factor_stats(fitted, v)
    logger.info(f"Scalar calibration fitted on {v.size} points: factor {factor:.4f}")
    return replace(fitted, mean_scale_factor=mean_factor, scale_factor_sd=factor_sd)


def fit_calibration(
    variances: Sequence[float],
    squared_errors: Sequence[float],
    method: str = "isotonic",
    floor: float = DEFAULT_FLOOR,
    interpolation: str = "step",
) -> Calibration:
    if method == "isotonic":
        return fit_isotonic(variances, squared_errors, floor=floor, interpolation=interpolation)
    if method == "scalar":
        return fit_scalar(variances, squared_errors, floor=floor)
    raise DomainError(f"unknown calibration method {method!r}")


def _dilate_members(
    mean: Union[float, np.ndarray],
    member_means: np.ndarray,
    member_variances: np.ndarray,
    factor: Union[float, np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    # Dilating the mixture about its mean by sqrt(factor) scales both variance parts by factor
    root = np.sqrt(factor)
    return mean + root * (member_means - mean), factor * member_variances


def apply_calibration(calibration: Calibration, pred: EnsemblePrediction) -> EnsemblePrediction:
    """
    Replace the total variance by f(total); aleatoric and epistemic are
    rescaled by the same factor and the mean is left untouched
    """
    total = float(calibration.transform(pred.total_variance))
    factor = total / pred.total_variance
    member_means, member_variances = _dilate_members(
        pred.mean, np.asarray(pred.member_means), np.asarray(pred.member_variances), factor
    )
    return replace(
        pred,
        total_variance=total,
        aleatoric=pred.aleatoric * factor,
        epistemic=pred.epistemic * factor,
        member_means=tuple(member_means.tolist()),
        member_variances=tuple(member_variances.tolist()),
        scale_factor=factor,
    )


def apply_calibration_table(calibration: Calibration, table: PredictionTable) -> PredictionTable:
    if len(table) == 0:
        return replace(table, scale_factor=np.zeros(0))
    total = calibration.transform(table.total)
    factor = total / table.total
    member_means, member_variances = _dilate_members(
        table.mean[:, None], table.member_means, table.member_variances, factor[:, None]
    )
    return replace(
        table,
        total=total,
        aleatoric=table.aleatoric * factor,
        epistemic=table.epistemic * factor,
        member_means=member_means,
        member_variances=member_variances,
        scale_factor=factor,
    )


@dataclass(frozen=True)
class AffineCorrection:
    """observed ~ coefficient * predicted + intercept"""
    coefficient: float
    intercept: float
    huber_delta: float = 1.35
    n_fit: int = 0
    iterations: int = 0

    def __post_init__(self):
        if not math.isfinite(self.coefficient) or not math.isfinite(self.intercept):
            raise DomainError("affine correction parameters must be finite")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "coefficient": self.coefficient,
            "intercept": self.intercept,
            "huber_delta": self.huber_delta,
            "n_fit": self.n_fit,
            "iterations": self.iterations,
        }


def fit_huber(
    predicted: Sequence[float],
    observed: Sequence[float],
    delta: float = 1.35,
) -> AffineCorrection:
    """
    Huber regression of observed on predicted by iteratively reweighted least
    squares, starting from the ordinary least-squares line. delta is in the
    units of the residuals (eV).
    """
    x = np.asarray(predicted, dtype=np.float64).ravel()
    y = np.asarray(observed, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"{x.size} predicted but {y.size} observed values")
    if x.size < 2:
        raise DataError(f"affine correction needs at least 2 pairs, got {x.size}")
    if np.ptp(x) == 0.0:
        raise DomainError("predicted values are constant; the affine correction is undetermined")
    if delta <= 0.0:
        raise DomainError(f"huber delta must be positive, got {delta}")

    design = np.column_stack([x, np.ones_like(x)])
    beta = np.linalg.lstsq(design, y, rcond=None)[0]
    iterations = 0
    for iterations in range(1, HUBER_MAX_ITERATIONS + 1):
        residual = np.abs(y - design @ beta)
        weights = np.where(residual <= delta, 1.0, delta / np.maximum(residual, delta))
        root = np.sqrt(weights)
        updated = np.linalg.lstsq(design * root[:, None], y * root, rcond=None)[0]
        change = np.max(np.abs(updated - beta))
        beta = updated
        if change < HUBER_TOLERANCE:
            break

    logger.info(
        f"Huber correction on {x.size} pairs: coefficient {beta[0]:.6f}, "
        f"intercept {beta[1]:.6f} after {iterations} iterations"
    )
    return AffineCorrection(float(beta[0]), float(beta[1]), huber_delta=delta, n_fit=int(x.size), iterations=iterations)


def apply_affine(corr: AffineCorrection, pred: EnsemblePrediction) -> EnsemblePrediction:
    """Affine transform of the predictive distribution"""
    c, b = corr.coefficient, corr.intercept
    return replace(
        pred,
        mean=c * pred.mean + b,
        total_variance=c**2 * pred.total_variance,
        aleatoric=c**2 * pred.aleatoric,
        epistemic=c**2 * pred.epistemic,
        member_means=tuple(c * m + b for m in pred.member_means),
        member_variances=tuple(c**2 * v for v in pred.member_variances),
    )


def apply_affine_table(corr: AffineCorrection, table: PredictionTable) -> PredictionTable:
    c, b = corr.coefficient, corr.intercept
    return replace(
        table,
        mean=c * table.mean + b,
        total=c**2 * table.total,
        aleatoric=c**2 * table.aleatoric,
        epistemic=c**2 * table.epistemic,
        member_means=c * table.member_means + b,
        member_variances=c**2 * table.member_variances,
    )


def save_calibration(calibration: Calibration, path: Union[str, Path]) -> Path:
    return write_json(path, calibration.to_dict(), CALIBRATION_FORMAT, CALIBRATION_VERSION)


def load_calibration(path: Union[str, Path]) -> Calibration:
    document = read_json(path, CALIBRATION_FORMAT, (CALIBRATION_VERSION,))
    method = document.get("method")
    if method == "isotonic":
        knots = np.asarray(document["knots"], dtype=np.float64).reshape(-1, 2)
        return CalibrationMap(
            knots_in=knots[:, 0],
            knots_out=knots[:, 1],
            floor=float(document["floor"]),
            interpolation=document["interpolation"],
            n_fit=int(document["n_fit"]),
            mean_scale_factor=document.get("mean_scale_factor"),
            scale_factor_sd=document.get("scale_factor_sd"),
        )
    if method == "scalar":
        return ScalarCalibration(
            factor=float(document["factor"]),
            floor=float(document["floor"]),
            n_fit=int(document["n_fit"]),
            mean_scale_factor=document.get("mean_scale_factor"),
            scale_factor_sd=document.get("scale_factor_sd"),
        )
    raise DataError(f"{path}: unknown calibration method {method!r}")


def save_affine(corr: AffineCorrection, path: Union[str, Path]) -> Path:
    return write_json(path, corr.to_dict(), AFFINE_FORMAT, AFFINE_VERSION)


def load_affine(path: Union[str, Path]) -> AffineCorrection:
    document = read_json(path, AFFINE_FORMAT, (AFFINE_VERSION,))
    return AffineCorrection(
        coefficient=float(document["coefficient"]),
        intercept=float(document["intercept"]),
        huber_delta=float(document["huber_delta"]),
        n_fit=int(document.get("n_fit", 0)),
        iterations=int(document.get("iterations", 0)),
    )

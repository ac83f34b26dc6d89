"""Error and calibration metrics over prediction tables"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from config.pipeline import EvalConfig
from core.ensemble import mixture_quantile, nll_values
from core.errors import ConfigError, DataError, DomainError
from core.models import CalibrationReport, EnsemblePrediction, PredictionTable, ReliabilityBins
from utils import get_logger, write_csv, write_json

logger = get_logger(__name__)

REPORT_FORMAT = "moluq-report"
REPORT_VERSION = 1
BIN_COLUMNS = ["bin_index", "count", "rmv", "rmse", "aleatoric_share"]
QUANTILE_COLUMNS = ["level", "observed"]


def ence(bins: ReliabilityBins) -> float:
    """Mean over bins of |RMV - RMSE| / RMV"""
    if np.any(bins.rmv <= 0.0):
        raise DomainError("ENCE is undefined for a bin with zero RMV")
    return float(np.mean(np.abs(bins.rmv - bins.rmse) / bins.rmv))


def coefficient_of_variation(sigmas: Sequence[float]) -> float:
    """Population SD of predicted sigmas over their mean; 0 means constant uncertainty"""
    s = np.asarray(sigmas, dtype=np.float64)
    if s.size == 0:
        raise DomainError("CV needs at least one sigma")
    mean = s.mean()
    if mean <= 0.0:
        raise DomainError("CV is undefined for a zero mean sigma")
    return float(np.std(s) / mean)


def _bin_members(variances: np.ndarray, k: int, rule: str) -> List[np.ndarray]:
    if rule == "equal_count":
        order = np.argsort(variances, kind="stable")
        return np.array_split(order, k)
    if rule == "equal_width":
        sigmas = np.sqrt(variances)
        edges = np.linspace(sigmas.min(), sigmas.max(), k + 1)
        assignment = np.searchsorted(edges[1:-1], sigmas, side="right")
        members = [np.flatnonzero(assignment == b) for b in range(k)]
        return [m[np.argsort(variances[m], kind="stable")] for m in members if m.size]
    raise ConfigError(f"unknown binning rule {rule!r}", key="eval.binning")


def make_bins(
    variances: Sequence[float],
    squared_errors: Sequence[float],
    k: int,
    rule: str = "equal_count",
    aleatoric: Optional[Sequence[float]] = None,
) -> ReliabilityBins:
    """
    Sort by predicted variance and bin

    Equal-count bins spread the remainder over the leading bins; ties keep
    their input order. Equal-width bins split the sigma range and drop empty bins.
    """
    v = np.asarray(variances, dtype=np.float64)
    e = np.asarray(squared_errors, dtype=np.float64)
    if v.shape != e.shape:
        raise DataError(f"{v.size} variances but {e.size} squared errors")
    if k < 1:
        raise ConfigError(f"bin count must be positive, got {k}", key="eval.bins")
    if k > v.size:
        raise ConfigError(f"{k} bins requested for {v.size} predictions", key="eval.bins")
    share = None if aleatoric is None else np.asarray(aleatoric, dtype=np.float64)

    counts, rmv, rmse, shares = [], [], [], []
    for members in _bin_members(v, k, rule):
        counts.append(members.size)
        rmv.append(np.sqrt(np.mean(v[members])))
        rmse.append(np.sqrt(np.mean(e[members])))
        shares.append(np.nan if share is None else np.mean(share[members]) / np.mean(v[members]))
    return ReliabilityBins(
        counts=np.asarray(counts, dtype=np.int64),
        rmv=np.asarray(rmv),
        rmse=np.asarray(rmse),
        aleatoric_share=np.asarray(shares, dtype=np.float64),
        rule=rule,
    )


def _check_levels(levels: Sequence[float]) -> np.ndarray:
    p = np.asarray(levels, dtype=np.float64)
    if p.size == 0 or np.any(p <= 0.0) or np.any(p >= 1.0) or np.any(np.diff(p) <= 0.0):
        raise DomainError("quantile levels must be strictly increasing inside (0, 1)")
    return p


def quantile_curve(
    means: Sequence[float],
    sigmas: Sequence[float],
    ys: Sequence[float],
    levels: Sequence[float],
) -> Tuple[Tuple[float, float], ...]:
    """Observed frequency of y <= mean + sigma * z_p for each level p"""
    mu = np.asarray(means, dtype=np.float64)
    sigma = np.asarray(sigmas, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if not mu.shape == sigma.shape == y.shape:
        raise DataError("quantile_curve needs aligned means, sigmas and targets")
    p = _check_levels(levels)
    bounds = mu[:, None] + sigma[:, None] * norm.ppf(p)[None, :]
    observed = np.mean(y[:, None] <= bounds, axis=0)
    return tuple(zip(p.tolist(), observed.tolist()))


def mixture_quantile_curve(table: PredictionTable, levels: Sequence[float]) -> Tuple[Tuple[float, float], ...]:
    """Quantile curve using the exact mixture inverse CDF"""
    p = _check_levels(levels)
    observed = [
        float(np.mean(table.y <= mixture_quantile(table.member_means, table.member_variances, level)))
        for level in p
    ]
    return tuple(zip(p.tolist(), observed))


def quantile_se(curve: Sequence[Tuple[float, float]]) -> float:
    return float(sum((observed - p) ** 2 for p, observed in curve))


def _as_table(
    predictions: Union[PredictionTable, Sequence[EnsemblePrediction]],
    targets: Optional[Sequence[float]],
) -> PredictionTable:
    if isinstance(predictions, PredictionTable):
        table = predictions
    else:
        table = PredictionTable.from_predictions(predictions)
    if targets is not None:
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != table.mean.shape:
            raise DataError(f"{y.size} targets for {len(table)} predictions")
        table = PredictionTable(
            table.ids, y, table.mean, table.total, table.aleatoric, table.epistemic,
            table.member_means, table.member_variances, table.scale_factor,
        )
    if len(table) == 0:
        raise DataError("cannot evaluate an empty prediction set")
    if not np.all(np.isfinite(table.y)):
        raise DataError("evaluation needs a finite target for every prediction")
    return table


def report(
    predictions: Union[PredictionTable, Sequence[EnsemblePrediction]],
    targets: Optional[Sequence[float]] = None,
    eval_config: Optional[EvalConfig] = None,
) -> CalibrationReport:
    """All error and calibration metrics of one prediction set"""
    eval_config = eval_config or EvalConfig()
    table = _as_table(predictions, targets)

    residual = table.y - table.mean
    squared = residual**2
    mae = float(np.mean(np.abs(residual)))
    rmse = float(np.sqrt(np.mean(squared)))
    nll = float(np.mean(nll_values(table, eval_config.nll_mode)))

    bins = make_bins(table.total, squared, eval_config.bins, eval_config.binning, table.aleatoric)
    ence_value = ence(bins)
    cv = coefficient_of_variation(table.sigma)

    levels = eval_config.level_grid()
    if eval_config.quantile_mode == "mixture":
        curve = mixture_quantile_curve(table, levels)
    else:
        curve = quantile_curve(table.mean, table.sigma, table.y, levels)

    flags = []
    if np.any(bins.rmse == 0.0):
        flags.append("zero_error_bins")
    if cv == 0.0:
        flags.append("homoscedastic")

    calibrated = table.scale_factor is not None
    result = CalibrationReport(
        n=len(table),
        mae=mae,
        rmse=rmse,
        nll=nll,
        ence=ence_value,
        cv=cv,
        quantile_se=quantile_se(curve),
        bins=bins,
        quantile_curve=curve,
        calibrated=calibrated,
        mean_scale_factor=float(np.mean(table.scale_factor)) if calibrated else None,
        scale_factor_sd=float(np.std(table.scale_factor)) if calibrated else None,
        flags=tuple(flags),
    )
    logger.info(
        f"N={result.n} MAE={mae:.5f} RMSE={rmse:.5f} NLL={nll:.4f} "
        f"ENCE={ence_value:.4f} CV={cv:.4f}{' (calibrated)' if calibrated else ''}"
    )
    for flag in flags:
        logger.warning(f"Report flag: {flag}")
    return result


def write_report(result: CalibrationReport, output_dir: Union[str, Path]) -> Dict[str, Path]:
    """report.json, reliability_bins.csv and quantile_curve.csv"""
    output_dir = Path(output_dir)
    bins = result.bins
    bin_frame = pd.DataFrame(
        {
            "bin_index": np.arange(bins.K),
            "count": bins.counts,
            "rmv": bins.rmv,
            "rmse": bins.rmse,
            "aleatoric_share": bins.aleatoric_share,
        },
        columns=BIN_COLUMNS,
    )
    curve_frame = pd.DataFrame(list(result.quantile_curve), columns=QUANTILE_COLUMNS)
    return {
        "report": write_json(output_dir / "report.json", result.to_dict(), REPORT_FORMAT, REPORT_VERSION),
        "bins": write_csv(output_dir / "reliability_bins.csv", bin_frame),
        "quantiles": write_csv(output_dir / "quantile_curve.csv", curve_frame),
    }

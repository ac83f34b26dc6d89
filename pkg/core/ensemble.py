"""Uniformly weighted Gaussian mixture over ensemble members"""

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy.special import logsumexp
from scipy.stats import norm

from config.pipeline import NetConfig
from core.diffnet import ParamVector, TargetScaler, collate_graphs, forward_batch
from core.errors import DataError, DomainError, NumericError
from core.models import EnsemblePrediction, MolecularGraph, PredictionTable
from core.training import nll_point
from utils import get_logger, read_csv, write_csv

logger = get_logger(__name__)

BASE_COLUMNS = ["id", "y", "mu", "var_total", "var_aleatoric", "var_epistemic"]
QUANTILE_TOLERANCE = 1e-12
QUANTILE_MAX_ITERATIONS = 200


@dataclass(frozen=True)
class Member:
    """One trained network of the ensemble"""
    params: ParamVector
    config: NetConfig
    scaler: TargetScaler = TargetScaler()
    index: int = 0
    val_nll: Optional[float] = None


MemberLike = Union[Member, Tuple[ParamVector, NetConfig]]


def as_members(members: Sequence[MemberLike]) -> List[Member]:
    result = []
    for index, member in enumerate(members):
        if isinstance(member, Member):
            result.append(member)
        else:
            params, config = member
            result.append(Member(params=params, config=config, index=index))
    if not result:
        raise DomainError("an ensemble needs at least one member")
    return result


def _check_members(means: np.ndarray, variances: np.ndarray) -> None:
    if means.shape != variances.shape:
        raise DomainError(f"{means.shape[-1]} member means but {variances.shape[-1]} variances")
    if means.shape[-1] == 0:
        raise DomainError("mixture needs at least one member")
    if np.any(~(variances > 0.0)):
        raise DomainError("member variances must be positive")


def mixture_moments(
    member_means: np.ndarray,
    member_variances: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Row-wise mixture moments for (N, M) arrays

    Returns:
        (mean, total, aleatoric, epistemic), each of shape (N,)
    """
    means = np.atleast_2d(np.asarray(member_means, dtype=np.float64))
    variances = np.atleast_2d(np.asarray(member_variances, dtype=np.float64))
    _check_members(means, variances)
    mean = means.mean(axis=1)
    aleatoric = variances.mean(axis=1)
    epistemic = ((means - mean[:, None]) ** 2).mean(axis=1)
    epistemic = np.maximum(epistemic, 0.0)
    return mean, aleatoric + epistemic, aleatoric, epistemic


def mixture_mean(member_means: Sequence[float]) -> float:
    means = np.asarray(member_means, dtype=np.float64)
    if means.size == 0:
        raise DomainError("mixture_mean of an empty list")
    return float(means.mean())


def mixture_variance(
    member_means: Sequence[float],
    member_variances: Sequence[float],
) -> Tuple[float, float, float]:
    """(total, aleatoric, epistemic) of the moment-matched mixture"""
    _, total, aleatoric, epistemic = mixture_moments(
        np.asarray(member_means, dtype=np.float64)[None, :],
        np.asarray(member_variances, dtype=np.float64)[None, :],
    )
    return float(total[0]), float(aleatoric[0]), float(epistemic[0])


def combine(
    member_means: Sequence[float],
    member_variances: Sequence[float],
    molecule_id: Optional[str] = None,
) -> EnsemblePrediction:
    total, aleatoric, epistemic = mixture_variance(member_means, member_variances)
    return EnsemblePrediction(
        mean=mixture_mean(member_means),
        total_variance=total,
        aleatoric=aleatoric,
        epistemic=epistemic,
        member_means=tuple(float(v) for v in member_means),
        member_variances=tuple(float(v) for v in member_variances),
        id=molecule_id,
    )


def _member_outputs(
    member: Member,
    graphs: Sequence[MolecularGraph],
    batch_size: int,
) -> Tuple[np.ndarray, np.ndarray]:
    means, variances = [], []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        try:
            batch = collate_graphs(chunk, member.config)
            with torch.no_grad():
                mean, variance = forward_batch(member.params, batch, member.config, member.scaler)
        except NumericError as e:
            raise NumericError(f"member {member.index}: {e}", layer=e.layer, instance_id=e.instance_id) from e
        except DataError as e:
            raise DataError(f"member {member.index}: {e}") from e
        means.append(mean.numpy())
        variances.append(variance.numpy())
    if not means:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(means), np.concatenate(variances)


def predict_ensemble(members: Sequence[MemberLike], graph: MolecularGraph) -> EnsemblePrediction:
    """Mixture prediction for one graph; member-level outputs are kept"""
    table = predict_table(members, [graph])
    return table.row(0)


def predict_table(
    members: Sequence[MemberLike],
    graphs: Sequence[MolecularGraph],
    batch_size: int = 256,
) -> PredictionTable:
    """Evaluate every member over the graphs and aggregate row-wise"""
    members = as_members(members)
    n = len(graphs)
    member_means = np.zeros((n, len(members)))
    member_variances = np.ones((n, len(members)))
    for column, member in enumerate(members):
        logger.debug(f"Predicting {n} molecules with member {member.index}")
        member_means[:, column], member_variances[:, column] = _member_outputs(member, graphs, batch_size)
    return table_from_members(
        ids=[graph.id for graph in graphs],
        y=np.array([np.nan if g.target is None else g.target for g in graphs], dtype=np.float64),
        member_means=member_means,
        member_variances=member_variances,
    )


def table_from_members(
    ids: Sequence[str],
    y: np.ndarray,
    member_means: np.ndarray,
    member_variances: np.ndarray,
) -> PredictionTable:
    n, m = member_means.shape
    if n == 0:
        empty = np.zeros(0)
        return PredictionTable(list(ids), empty, empty, empty, empty, empty, member_means, member_variances)
    mean, total, aleatoric, epistemic = mixture_moments(member_means, member_variances)
    return PredictionTable(
        ids=list(ids),
        y=np.asarray(y, dtype=np.float64),
        mean=mean,
        total=total,
        aleatoric=aleatoric,
        epistemic=epistemic,
        member_means=member_means,
        member_variances=member_variances,
    )


def select_members(table: PredictionTable, columns: Sequence[int]) -> PredictionTable:
    """Re-aggregate a table over a subset of its member columns"""
    columns = list(columns)
    if not columns:
        raise DomainError("select_members needs at least one member column")
    return table_from_members(
        table.ids,
        table.y,
        table.member_means[:, columns],
        table.member_variances[:, columns],
    )


def mixture_log_density(pred: EnsemblePrediction, y: Union[float, np.ndarray]) -> np.ndarray:
    """ln p*(y) = ln (1/M) sum_m N(y; mu_m, var_m)"""
    means = np.asarray(pred.member_means)[:, None]
    sigmas = np.sqrt(np.asarray(pred.member_variances))[:, None]
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))[None, :]
    return logsumexp(norm.logpdf(y, loc=means, scale=sigmas), axis=0) - math.log(pred.M)


def mixture_nll(pred: EnsemblePrediction, y: float, mode: str = "gaussian") -> float:
    """
    NLL of y under the ensemble

    gaussian: moment-matched N(mean, total_variance)
    exact: the uniformly weighted mixture density itself
    """
    if mode == "gaussian":
        return nll_point(y, pred.mean, pred.total_variance)
    if mode == "exact":
        return float(-mixture_log_density(pred, y)[0])
    raise DomainError(f"unknown NLL mode {mode!r}")


def nll_values(table: PredictionTable, mode: str = "gaussian") -> np.ndarray:
    """Per-row NLL of the table's targets (ln 2pi included)"""
    y = table.y
    if mode == "gaussian":
        return 0.5 * ((y - table.mean) ** 2 / table.total + np.log(table.total) + math.log(2.0 * math.pi))
    if mode == "exact":
        sigmas = np.sqrt(table.member_variances)
        logpdf = norm.logpdf(y[:, None], loc=table.member_means, scale=sigmas)
        return -(logsumexp(logpdf, axis=1) - math.log(table.M))
    raise DomainError(f"unknown NLL mode {mode!r}")


def mixture_cdf(member_means: np.ndarray, member_variances: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise mixture CDF at y for (N, M) member arrays"""
    means = np.atleast_2d(member_means)
    sigmas = np.sqrt(np.atleast_2d(member_variances))
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    return norm.cdf(y, loc=means, scale=sigmas).mean(axis=1)


def mixture_quantile(member_means: np.ndarray, member_variances: np.ndarray, p: float) -> np.ndarray:
    """Row-wise inverse mixture CDF by bisection"""
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {p}")
    means = np.atleast_2d(np.asarray(member_means, dtype=np.float64))
    sigmas = np.sqrt(np.atleast_2d(np.asarray(member_variances, dtype=np.float64)))
    # Every member quantile brackets the mixture quantile
    z = norm.ppf(p)
    lo = (means + z * sigmas).min(axis=1)
    hi = (means + z * sigmas).max(axis=1)
    for _ in range(QUANTILE_MAX_ITERATIONS):
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(means, sigmas**2, mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= QUANTILE_TOLERANCE * np.maximum(1.0, np.abs(mid))):
            break
    return 0.5 * (lo + hi)


def members_by_nll(members: Sequence[Member]) -> List[Member]:
    """Best validation NLL first; members without a score go last"""
    return sorted(
        members,
        key=lambda m: (m.val_nll is None or not math.isfinite(m.val_nll), m.val_nll or 0.0, m.index),
    )


def prediction_columns(m: int) -> List[str]:
    return BASE_COLUMNS + [f"mu_{i}" for i in range(m)] + [f"var_{i}" for i in range(m)]


def save_predictions(table: PredictionTable, path: Union[str, Path]) -> Path:
    """Prediction dump with the fixed column order; scale_factor last when present"""
    columns = prediction_columns(table.M)
    data = {
        "id": table.ids,
        "y": table.y,
        "mu": table.mean,
        "var_total": table.total,
        "var_aleatoric": table.aleatoric,
        "var_epistemic": table.epistemic,
    }
    for i in range(table.M):
        data[f"mu_{i}"] = table.member_means[:, i]
    for i in range(table.M):
        data[f"var_{i}"] = table.member_variances[:, i]
    if table.scale_factor is not None:
        columns.append("scale_factor")
        data["scale_factor"] = table.scale_factor
    return write_csv(path, pd.DataFrame(data, columns=columns))


def load_predictions(path: Union[str, Path]) -> PredictionTable:
    frame = read_csv(path, BASE_COLUMNS)
    m = sum(1 for column in frame.columns if re.fullmatch(r"mu_\d+", column))
    expected = prediction_columns(m)
    if list(frame.columns[:len(expected)]) != expected:
        raise DataError(f"{path}: columns do not follow the prediction layout")
    return PredictionTable(
        ids=[str(i) for i in frame["id"]],
        y=frame["y"].to_numpy(dtype=np.float64),
        mean=frame["mu"].to_numpy(dtype=np.float64),
        total=frame["var_total"].to_numpy(dtype=np.float64),
        aleatoric=frame["var_aleatoric"].to_numpy(dtype=np.float64),
        epistemic=frame["var_epistemic"].to_numpy(dtype=np.float64),
        member_means=frame[[f"mu_{i}" for i in range(m)]].to_numpy(dtype=np.float64).reshape(len(frame), m),
        member_variances=frame[[f"var_{i}" for i in range(m)]].to_numpy(dtype=np.float64).reshape(len(frame), m),
        scale_factor=frame["scale_factor"].to_numpy(dtype=np.float64) if "scale_factor" in frame else None,
    )

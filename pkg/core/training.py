"""Training of one ensemble member with the interpolated MSE to NLL objective"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch.nn.utils import clip_grad_norm_
from torch.optim import AdamW
from torch.optim.lr_scheduler import StepLR

from config.pipeline import NetConfig, TrainConfig
from core.chemgraph import MolecularDataset
from core.diffnet import (
    DTYPE,
    GraphBatch,
    ParamVector,
    TargetScaler,
    collate_graphs,
    forward_batch,
    init_params,
    param_layout,
)
from core.errors import DataError, DomainError, NumericError, TrainingDivergence
from core.losses import LN_2PI, LossWeights, gaussian_nll, interpolated_loss
from core.models import MolecularGraph, SplitSpec, TrainingLog, TrainingLogRow
from utils import get_logger, numpy_rng, read_csv, write_csv

logger = get_logger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def nll_point(y: float, mu: float, var: float, include_constant: bool = True) -> float:
    """Gaussian negative log likelihood of one observation"""
    if not var > 0.0 or not math.isfinite(var):
        raise DomainError(f"variance must be positive and finite, got {var}")
    nll = 0.5 * ((y - mu) ** 2 / var + math.log(var))
    if include_constant:
        nll += 0.5 * LN_2PI
    return nll


def lambda_schedule(step: int, config: TrainConfig) -> float:
    """
    MSE weight at a step: 1 during warmup, then a linear ramp to 0
    over interp_steps, 0 afterwards
    """
    if step < 0:
        raise DomainError(f"step must be non-negative, got {step}")
    if step < config.warmup_steps:
        return 1.0
    into_ramp = step - config.warmup_steps
    if into_ramp >= config.interp_steps:
        return 0.0
    return 1.0 - into_ramp / config.interp_steps


def interpolated_point_losses(
    y: np.ndarray,
    mean: np.ndarray,
    variance: np.ndarray,
    lam: float,
    include_constant: bool = True,
) -> np.ndarray:
    """lam * (y - mean)^2 + (1 - lam) * NLL for aligned arrays"""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance <= 0.0):
        raise DomainError("variances must be positive")
    losses = interpolated_loss(
        torch.as_tensor(y, dtype=DTYPE),
        torch.as_tensor(mean, dtype=DTYPE),
        torch.as_tensor(variance),
        LossWeights.from_lambda(lam),
        include_constant,
    )
    return losses.numpy()


def _labelled_targets(batch: GraphBatch) -> torch.Tensor:
    if bool(torch.isnan(batch.targets).any()):
        missing = [batch.ids[i] for i in torch.nonzero(torch.isnan(batch.targets)).flatten().tolist()]
        raise DataError(f"graphs without a target: {missing[:5]}")
    return batch.targets


def _check_losses(losses: torch.Tensor, ids: Sequence[str]) -> None:
    bad = torch.nonzero(~torch.isfinite(losses)).flatten().tolist()
    if bad:
        raise NumericError("non-finite loss", instance_id=ids[bad[0]])


def batch_loss(
    params: ParamVector,
    graphs: Sequence[MolecularGraph],
    lam: float,
    net_config: NetConfig,
    scaler: Optional[TargetScaler] = None,
    include_constant: bool = True,
) -> float:
    """Mean over the batch of lam * squared error + (1 - lam) * NLL"""
    if not graphs:
        raise DataError("batch_loss needs a nonempty batch")
    batch = collate_graphs(graphs, net_config)
    y = _labelled_targets(batch)
    with torch.no_grad():
        mean, variance = forward_batch(params, batch, net_config, scaler)
        losses = interpolated_loss(y, mean, variance, LossWeights.from_lambda(lam), include_constant)
    _check_losses(losses, batch.ids)
    return float(losses.mean())


def batch_loss_and_gradient(
    params: ParamVector,
    graphs: Sequence[MolecularGraph],
    lam: float,
    net_config: NetConfig,
    scaler: Optional[TargetScaler] = None,
    include_constant: bool = False,
) -> Tuple[float, ParamVector]:
    """batch_loss and its reverse-mode gradient w.r.t. the flat parameters"""
    batch = collate_graphs(graphs, net_config)
    y = _labelled_targets(batch)
    flat = params.values.detach().clone().requires_grad_(True)
    mean, variance = forward_batch(flat, batch, net_config, scaler)
    losses = interpolated_loss(y, mean, variance, LossWeights.from_lambda(lam), include_constant)
    _check_losses(losses.detach(), batch.ids)
    loss = losses.mean()
    (grad,) = torch.autograd.grad(loss, flat)
    return float(loss.detach()), ParamVector(grad.detach(), param_layout(net_config))


def fit_target_scaler(graphs: Sequence[MolecularGraph], per_atom: bool = False) -> TargetScaler:
    """Standardisation fitted on training targets"""
    return TargetScaler.fit(
        [graph.target for graph in graphs],
        [graph.n_atoms for graph in graphs],
        per_atom=per_atom,
    )


def evaluate_batch(
    params: Union[ParamVector, torch.Tensor],
    batch: GraphBatch,
    net_config: NetConfig,
    scaler: TargetScaler,
) -> Tuple[float, float]:
    """Mean NLL (with the ln 2pi constant) and MAE of a labelled batch, in eV"""
    with torch.no_grad():
        mean, variance = forward_batch(params, batch, net_config, scaler)
        y = _labelled_targets(batch)
        nll = gaussian_nll(y, mean, variance, include_constant=True).mean()
        mae = (y - mean).abs().mean()
    return float(nll), float(mae)


@dataclass
class TrainState:
    """Mutable state owned by one trainer"""
    step: int
    params: torch.Tensor
    optimizer: AdamW
    scheduler: StepLR
    rng: np.random.Generator
    best_val_nll: float = math.inf
    best_params: Optional[torch.Tensor] = None
    best_step: Optional[int] = None
    stalled_windows: int = 0
    nonfinite_steps: int = 0
    window_losses: List[float] = field(default_factory=list)

    def snapshot(self, layout) -> ParamVector:
        values = self.best_params if self.best_params is not None else self.params
        return ParamVector(values.detach().clone(), layout)


class _BatchSampler:
    """Reshuffles the training indices each epoch from the member's stream"""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._cursor = 0

    def next(self) -> np.ndarray:
        if self._cursor + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._cursor = 0
        indices = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return indices


def train_member(
    dataset: MolecularDataset,
    split: SplitSpec,
    net_config: NetConfig,
    train_config: TrainConfig,
    scaler: Optional[TargetScaler] = None,
    name: str = "member",
) -> Tuple[ParamVector, TrainingLog]:
    """
    Train one member and return the parameters with the lowest validation NLL

    Args:
        dataset: Labelled molecules
        split: Train and validation ids are used; test ids are ignored
        net_config: Architecture; net_config.seed drives initialisation
        train_config: Schedule; train_config.seed drives batch shuffling
        scaler: Target standardisation; fitted on the training targets if None
        name: Label used in log lines

    Returns:
        (best parameters, training log)

    Raises:
        TrainingDivergence: eval_every consecutive non-finite steps; carries the
            best parameters seen so far and the log
    """
    if not split.train_ids or not split.val_ids:
        raise DataError("training needs nonempty train and validation splits")
    train_graphs = dataset.graphs(net_config.cutoff, split.train_ids)
    val_graphs = dataset.graphs(net_config.cutoff, split.val_ids)
    val_batch = collate_graphs(val_graphs, net_config)
    _labelled_targets(val_batch)
    if scaler is None:
        scaler = fit_target_scaler(train_graphs, train_config.per_atom_targets)

    layout = param_layout(net_config)
    initial = init_params(net_config, net_config.seed)
    log = TrainingLog()
    if train_config.max_steps == 0:
        return initial, log

    flat = torch.nn.Parameter(initial.values.clone())
    optimizer = AdamW(
        [flat],
        lr=train_config.lr0,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
        weight_decay=train_config.weight_decay,
    )
    state = TrainState(
        step=0,
        params=flat,
        optimizer=optimizer,
        scheduler=StepLR(optimizer, step_size=train_config.decay_interval, gamma=train_config.lr_decay),
        rng=numpy_rng("shuffle", train_config.seed),
    )
    sampler = _BatchSampler(len(train_graphs), train_config.batch_size, state.rng)
    logger.info(
        f"[{name}] training on {len(train_graphs)} molecules, validating on {len(val_graphs)}, "
        f"{train_config.max_steps} steps"
    )

    while state.step < train_config.max_steps:
        lam = lambda_schedule(state.step, train_config)
        batch = collate_graphs([train_graphs[i] for i in sampler.next()], net_config)
        _take_step(state, batch, lam, net_config, train_config, scaler, name, layout, log)
        state.scheduler.step()
        state.step += 1

        if state.step % train_config.eval_every == 0 or state.step == train_config.max_steps:
            if _end_window(state, val_batch, lam, net_config, train_config, scaler, name, log):
                log.stopped_early = True
                break

    log.steps_run = state.step
    log.best_step = state.best_step
    log.best_val_nll = state.best_val_nll
    logger.info(
        f"[{name}] finished after {state.step} steps; best val NLL {state.best_val_nll:.4f} "
        f"at step {state.best_step}"
    )
    return state.snapshot(layout), log


def _take_step(
    state: TrainState,
    batch: GraphBatch,
    lam: float,
    net_config: NetConfig,
    train_config: TrainConfig,
    scaler: TargetScaler,
    name: str,
    layout,
    log: TrainingLog,
) -> None:
    state.optimizer.zero_grad()
    finite = False
    try:
        mean, variance = forward_batch(state.params, batch, net_config, scaler)
        losses = interpolated_loss(batch.targets, mean, variance, LossWeights.from_lambda(lam))
        loss = losses.mean()
        if bool(torch.isfinite(loss)):
            loss.backward()
            if train_config.clip_grad_norm is not None:
                clip_grad_norm_([state.params], train_config.clip_grad_norm)
            finite = bool(torch.isfinite(state.params.grad).all())
    except NumericError as e:
        logger.debug(f"[{name}] step {state.step}: {e}")

    if finite:
        state.optimizer.step()
        state.nonfinite_steps = 0
        state.window_losses.append(float(loss.detach()))
        return

    state.nonfinite_steps += 1
    logger.warning(f"[{name}] step {state.step}: non-finite loss, update skipped")
    if state.nonfinite_steps >= train_config.eval_every:
        log.steps_run = state.step + 1
        log.best_step = state.best_step
        log.best_val_nll = state.best_val_nll
        raise TrainingDivergence(
            f"{name}: {state.nonfinite_steps} consecutive non-finite steps at step {state.step}",
            params=state.snapshot(layout),
            log=log,
        )


def _end_window(
    state: TrainState,
    val_batch: GraphBatch,
    lam: float,
    net_config: NetConfig,
    train_config: TrainConfig,
    scaler: TargetScaler,
    name: str,
    log: TrainingLog,
) -> bool:
    """Record the window and return True when patience is exhausted"""
    try:
        val_nll, val_mae = evaluate_batch(state.params.detach(), val_batch, net_config, scaler)
    except NumericError as e:
        logger.warning(f"[{name}] validation failed at step {state.step}: {e}")
        val_nll, val_mae = math.nan, math.nan

    train_loss = float(np.mean(state.window_losses)) if state.window_losses else math.nan
    state.window_losses = []
    lr = state.optimizer.param_groups[0]["lr"]
    log.append(TrainingLogRow(state.step, lam, lr, train_loss, val_nll, val_mae))
    logger.info(
        f"[{name}] step {state.step}: lambda={lam:.3f} lr={lr:.2e} loss={train_loss:.5f} "
        f"val_nll={val_nll:.4f} val_mae={val_mae:.5f}"
    )

    if val_nll < state.best_val_nll:
        state.best_val_nll = val_nll
        state.best_params = state.params.detach().clone()
        state.best_step = state.step
        state.stalled_windows = 0
    elif lam < 1.0:
        state.stalled_windows += 1

    if state.stalled_windows >= train_config.patience:
        logger.info(f"[{name}] early stop at step {state.step}: {state.stalled_windows} windows without improvement")
        return True
    return False


def save_training_log(log: TrainingLog, path: Union[str, Path]) -> Path:
    """Write the evaluation-window rows as CSV"""
    frame = pd.DataFrame(log.records(), columns=list(TrainingLog.COLUMNS))
    return write_csv(path, frame)


def load_training_log(path: Union[str, Path]) -> TrainingLog:
    frame = read_csv(path, TrainingLog.COLUMNS)
    log = TrainingLog()
    for row in frame.to_dict("records"):
        log.append(
            TrainingLogRow(
                step=int(row["step"]),
                lam=float(row["lambda"]),
                lr=float(row["lr"]),
                train_loss=float(row["train_loss"]),
                val_nll=float(row["val_nll"]),
                val_mae=float(row["val_mae"]),
            )
        )
    if log.rows:
        best = min(log.rows, key=lambda r: (math.isnan(r.val_nll), r.val_nll))
        log.best_step, log.best_val_nll = best.step, best.val_nll
        log.steps_run = log.rows[-1].step
    return log


def member_summary(log: TrainingLog) -> Dict[str, Any]:
    """Manifest fields of a finished member"""
    return {
        "best_step": log.best_step,
        "best_val_nll": None if not math.isfinite(log.best_val_nll) else log.best_val_nll,
        "steps_run": log.steps_run,
        "stopped_early": log.stopped_early,
    }

"""Ensemble-level training: seeded members, checkpoints and the training manifest"""

import asyncio
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from config.pipeline import NetConfig, TrainConfig
from core.chemgraph import MolecularDataset
from core.diffnet import TargetScaler, check_config_match, load_checkpoint, save_checkpoint
from core.ensemble import Member
from core.errors import DataError, MolUQError, TrainingDivergence
from core.models import SplitSpec
from core.training import fit_target_scaler, member_summary, save_training_log, train_member
from utils import derive_seed, get_logger, read_json, write_json

logger = get_logger(__name__)

MANIFEST_FORMAT = "moluq-manifest"
MANIFEST_VERSION = 1

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"
STATUS_FAILED = "failed"


@dataclass
class MemberRecord:
    """Manifest entry of one member"""
    index: int
    seed: int
    status: str
    checkpoint: Optional[str] = None
    log: Optional[str] = None
    best_val_nll: Optional[float] = None
    best_step: Optional[int] = None
    steps_run: int = 0
    stopped_early: bool = False
    error: Optional[str] = None

    @property
    def usable(self) -> bool:
        return self.status == STATUS_OK and self.checkpoint is not None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        return {
            "index": self.index,
            "seed": self.seed,
            "status": self.status,
            "checkpoint": self.checkpoint,
            "log": self.log,
            "best_val_nll": self.best_val_nll,
            "best_step": self.best_step,
            "steps_run": self.steps_run,
            "stopped_early": self.stopped_early,
            "error": self.error,
        }


@dataclass
class TrainingManifest:
    global_seed: int
    net_config: NetConfig
    train_config: TrainConfig
    members: List[MemberRecord] = field(default_factory=list)

    @property
    def failed(self) -> List[MemberRecord]:
        return [m for m in self.members if not m.usable]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "global_seed": self.global_seed,
            "net_config": self.net_config.model_dump(mode="json"),
            "train_config": self.train_config.model_dump(mode="json"),
            "members": [m.to_dict() for m in self.members],
        }


def member_seed(global_seed: int, index: int) -> int:
    return derive_seed(global_seed, index)


def member_configs(net_config: NetConfig, train_config: TrainConfig, seed: int):
    """Configs of one member: both initialisation and shuffling follow the member seed"""
    return net_config.model_copy(update={"seed": seed}), train_config.model_copy(update={"seed": seed})


def _train_one(
    index: int,
    dataset: MolecularDataset,
    split: SplitSpec,
    net_config: NetConfig,
    train_config: TrainConfig,
    scaler: TargetScaler,
    global_seed: int,
    output_dir: Path,
) -> MemberRecord:
    seed = member_seed(global_seed, index)
    net, train = member_configs(net_config, train_config, seed)
    name = f"member {index}"
    checkpoint = output_dir / f"member_{index}.pt"
    log_path = output_dir / f"member_{index}_log.csv"
    record = MemberRecord(index=index, seed=seed, status=STATUS_OK)

    try:
        params, log = train_member(dataset, split, net, train, scaler=scaler, name=name)
    except TrainingDivergence as e:
        logger.error(f"[{name}] diverged: {e}")
        record.status = STATUS_DIVERGED
        record.error = str(e)
        if e.params is not None:
            save_checkpoint(checkpoint, e.params, net, scaler, {"status": STATUS_DIVERGED})
            record.checkpoint = str(checkpoint)
        if e.log is not None:
            save_training_log(e.log, log_path)
            record.log = str(log_path)
        return record
    except MolUQError as e:
        logger.error(f"[{name}] failed: {e}", exc_info=True)
        record.status = STATUS_FAILED
        record.error = str(e)
        return record

    summary = member_summary(log)
    save_checkpoint(checkpoint, params, net, scaler, {**summary, "index": index, "seed": seed})
    save_training_log(log, log_path)
    record.checkpoint = str(checkpoint)
    record.log = str(log_path)
    record.best_val_nll = summary["best_val_nll"]
    record.best_step = summary["best_step"]
    record.steps_run = summary["steps_run"]
    record.stopped_early = summary["stopped_early"]
    return record


async def train_ensemble(
    dataset: MolecularDataset,
    split: SplitSpec,
    net_config: NetConfig,
    train_config: TrainConfig,
    size: int,
    global_seed: int,
    output_dir: Union[str, Path],
    workers: int = 1,
) -> TrainingManifest:
    """
    Train `size` members with seeds derived from (global_seed, index)

    Members run in a thread pool when workers > 1; otherwise sequentially.
    Failed members are recorded in the manifest rather than raised.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    train_graphs = dataset.graphs(net_config.cutoff, split.train_ids)
    scaler = fit_target_scaler(train_graphs, train_config.per_atom_targets)
    logger.info(
        f"Target scaling: shift={scaler.shift:.6f} scale={scaler.scale:.6f} per_atom={scaler.per_atom}"
    )

    def job(index: int) -> MemberRecord:
        return _train_one(index, dataset, split, net_config, train_config, scaler, global_seed, output_dir)

    if workers > 1 and size > 1:
        logger.info(f"Training {size} members on {workers} workers")
        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = await asyncio.gather(*(loop.run_in_executor(pool, job, i) for i in range(size)))
    else:
        records = []
        for index in range(size):
            logger.info(f"[{index + 1}/{size}] Training member {index}...")
            records.append(job(index))

    manifest = TrainingManifest(global_seed, net_config, train_config, list(records))
    ok = len(manifest.members) - len(manifest.failed)
    logger.info(f"Ensemble training finished: {ok} of {size} members usable")
    return manifest


def save_manifest(manifest: TrainingManifest, path: Union[str, Path]) -> Path:
    return write_json(path, manifest.to_dict(), MANIFEST_FORMAT, MANIFEST_VERSION)


def load_manifest(path: Union[str, Path]) -> TrainingManifest:
    document = read_json(path, MANIFEST_FORMAT, (MANIFEST_VERSION,))
    return TrainingManifest(
        global_seed=int(document["global_seed"]),
        net_config=NetConfig.model_validate(document["net_config"]),
        train_config=TrainConfig.model_validate(document["train_config"]),
        members=[MemberRecord(**entry) for entry in document["members"]],
    )


def load_members(manifest: TrainingManifest, expected: Optional[NetConfig] = None) -> List[Member]:
    """
    Load the usable members of a manifest

    Raises:
        ConfigError: a checkpoint's architecture differs from `expected`
        DataError: no usable member
    """
    members = []
    for record in manifest.members:
        if not record.usable:
            logger.warning(f"Skipping member {record.index} ({record.status}): {record.error}")
            continue
        checkpoint = load_checkpoint(record.checkpoint)
        check_config_match(expected or manifest.net_config, checkpoint.config, source=record.checkpoint)
        members.append(
            Member(
                params=checkpoint.params,
                config=checkpoint.config,
                scaler=checkpoint.scaler,
                index=record.index,
                val_nll=record.best_val_nll,
            )
        )
    if not members:
        raise DataError("the manifest lists no usable member")
    return members

"""Data models shared across the uncertainty pipeline"""

import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import DataError


@dataclass(frozen=True)
class MoleculeRecord:
    """Parsed structure with its energies and provenance key"""
    id: str
    elements: Tuple[int, ...]
    positions: np.ndarray  # (n_atoms, 3), Å
    total_energy: Optional[float] = None  # eV
    zpe: Optional[float] = None  # eV
    structure_key: Optional[str] = None
    properties: Dict[str, float] = field(default_factory=dict)
    target: Optional[float] = None  # eV, filled in at ingest
    source: Optional[str] = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise DataError(f"{self.id}: positions must have shape (n, 3), got {positions.shape}")
        if len(self.elements) < 1:
            raise DataError(f"{self.id}: a molecule needs at least one atom")
        if len(self.elements) != positions.shape[0]:
            raise DataError(
                f"{self.id}: {len(self.elements)} elements but {positions.shape[0]} positions"
            )
        positions.setflags(write=False)
        object.__setattr__(self, "elements", tuple(int(z) for z in self.elements))
        object.__setattr__(self, "positions", positions)

    @property
    def n_atoms(self) -> int:
        return len(self.elements)

    def check_elements(self, supported: Iterable[int]) -> None:
        """Raise DataError if an atomic number is outside the supported set"""
        unsupported = sorted(set(self.elements) - set(supported))
        if unsupported:
            raise DataError(f"{self.id}: unsupported atomic numbers {unsupported}")

    def with_target(self, target: float) -> "MoleculeRecord":
        return replace(self, target=float(target))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        return {
            "id": self.id,
            "elements": list(self.elements),
            "positions": self.positions.tolist(),
            "total_energy": self.total_energy,
            "zpe": self.zpe,
            "structure_key": self.structure_key,
            "properties": dict(self.properties),
            "target": self.target,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MoleculeRecord":
        return cls(
            id=data["id"],
            elements=tuple(data["elements"]),
            positions=np.asarray(data["positions"], dtype=np.float64),
            total_energy=data.get("total_energy"),
            zpe=data.get("zpe"),
            structure_key=data.get("structure_key"),
            properties=dict(data.get("properties") or {}),
            target=data.get("target"),
            source=data.get("source"),
        )


@dataclass(frozen=True)
class MolecularGraph:
    """Cutoff graph of one molecule: the model input"""
    id: str
    atomic_numbers: np.ndarray  # (n_atoms,)
    edge_index: np.ndarray  # (2, n_edges): row 0 source v, row 1 destination w
    edge_distance: np.ndarray  # (n_edges,), Å
    cutoff: float
    target: Optional[float] = None  # eV

    @property
    def n_atoms(self) -> int:
        return int(self.atomic_numbers.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edge_index.shape[1])

    def edge_set(self) -> set:
        return set(zip(self.edge_index[0].tolist(), self.edge_index[1].tolist()))


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/validation/test id lists; extra holds auxiliary id sets"""
    train_ids: Tuple[str, ...]
    val_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]
    seed: int
    extra: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        parts = {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}
        seen: Dict[str, str] = {}
        for name, ids in parts.items():
            if len(set(ids)) != len(ids):
                raise DataError(f"split '{name}' contains duplicate ids")
            for molecule_id in ids:
                if molecule_id in seen:
                    raise DataError(
                        f"id {molecule_id!r} appears in both '{seen[molecule_id]}' and '{name}'"
                    )
                seen[molecule_id] = name

    def ids(self, part: str) -> Tuple[str, ...]:
        """Id list of a named part: train, val, test, all, or an extra key"""
        if part == "train":
            return self.train_ids
        if part == "val":
            return self.val_ids
        if part == "test":
            return self.test_ids
        if part == "all":
            return self.train_ids + self.val_ids + self.test_ids
        if part in self.extra:
            return self.extra[part]
        raise DataError(f"unknown split part {part!r}")

    def counts(self) -> Dict[str, int]:
        counts = {"train": len(self.train_ids), "val": len(self.val_ids), "test": len(self.test_ids)}
        counts.update({name: len(ids) for name, ids in self.extra.items()})
        return counts

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        return {
            "seed": self.seed,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
            "extra": {name: list(ids) for name, ids in self.extra.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitSpec":
        return cls(
            train_ids=tuple(data["train_ids"]),
            val_ids=tuple(data["val_ids"]),
            test_ids=tuple(data["test_ids"]),
            seed=int(data["seed"]),
            extra={name: tuple(ids) for name, ids in (data.get("extra") or {}).items()},
        )


@dataclass(frozen=True)
class OverlapSplit:
    """Cross-dataset partition by shared structure keys"""
    exclusive_a: Tuple[str, ...]
    shared_a: Tuple[str, ...]
    exclusive_b: Tuple[str, ...]
    shared_b: Tuple[str, ...]

    def as_tuple(self) -> Tuple[Tuple[str, ...], ...]:
        return (self.exclusive_a, self.shared_a, self.exclusive_b, self.shared_b)


@dataclass(frozen=True)
class ProbPrediction:
    """Gaussian predictive distribution of one member, N(mean, variance)"""
    mean: float  # eV
    variance: float  # eV²

    @property
    def sigma(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class EnsemblePrediction:
    """Moment-matched mixture prediction with its uncertainty decomposition"""
    mean: float
    total_variance: float
    aleatoric: float
    epistemic: float
    member_means: Tuple[float, ...]
    member_variances: Tuple[float, ...]
    id: Optional[str] = None
    scale_factor: Optional[float] = None  # s² after calibration

    @property
    def M(self) -> int:
        return len(self.member_means)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.total_variance)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        return {
            "id": self.id,
            "mean": self.mean,
            "total_variance": self.total_variance,
            "aleatoric": self.aleatoric,
            "epistemic": self.epistemic,
            "member_means": list(self.member_means),
            "member_variances": list(self.member_variances),
            "M": self.M,
            "scale_factor": self.scale_factor,
        }


@dataclass
class PredictionTable:
    """Columnar predictions for many molecules (one row per molecule)"""
    ids: List[str]
    y: np.ndarray  # NaN where the target is unknown
    mean: np.ndarray
    total: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    member_means: np.ndarray  # (N, M)
    member_variances: np.ndarray  # (N, M)
    scale_factor: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def M(self) -> int:
        return int(self.member_means.shape[1])

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.total)

    def row(self, i: int) -> EnsemblePrediction:
        return EnsemblePrediction(
            mean=float(self.mean[i]),
            total_variance=float(self.total[i]),
            aleatoric=float(self.aleatoric[i]),
            epistemic=float(self.epistemic[i]),
            member_means=tuple(float(v) for v in self.member_means[i]),
            member_variances=tuple(float(v) for v in self.member_variances[i]),
            id=self.ids[i],
            scale_factor=None if self.scale_factor is None else float(self.scale_factor[i]),
        )

    def predictions(self) -> List[EnsemblePrediction]:
        return [self.row(i) for i in range(len(self))]

    @classmethod
    def from_predictions(
        cls,
        predictions: Sequence[EnsemblePrediction],
        targets: Optional[Sequence[float]] = None,
    ) -> "PredictionTable":
        n = len(predictions)
        members = max((p.M for p in predictions), default=0)
        scale = [p.scale_factor for p in predictions]
        return cls(
            ids=[p.id if p.id is not None else str(i) for i, p in enumerate(predictions)],
            y=np.full(n, np.nan) if targets is None else np.asarray(targets, dtype=np.float64),
            mean=np.array([p.mean for p in predictions], dtype=np.float64),
            total=np.array([p.total_variance for p in predictions], dtype=np.float64),
            aleatoric=np.array([p.aleatoric for p in predictions], dtype=np.float64),
            epistemic=np.array([p.epistemic for p in predictions], dtype=np.float64),
            member_means=np.array([p.member_means for p in predictions], dtype=np.float64).reshape(n, members),
            member_variances=np.array([p.member_variances for p in predictions], dtype=np.float64).reshape(n, members),
            scale_factor=None if any(s is None for s in scale) or n == 0 else np.array(scale, dtype=np.float64),
        )


@dataclass(frozen=True)
class ReliabilityBins:
    """Binned reliability data sorted by predicted variance"""
    counts: np.ndarray
    rmv: np.ndarray  # root mean variance per bin
    rmse: np.ndarray
    aleatoric_share: np.ndarray  # NaN when the split is unknown
    rule: str = "equal_count"

    @property
    def K(self) -> int:
        return int(self.counts.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        return {
            "K": self.K,
            "rule": self.rule,
            "counts": self.counts.tolist(),
            "rmv": self.rmv.tolist(),
            "rmse": self.rmse.tolist(),
            "aleatoric_share": [None if math.isnan(v) else v for v in self.aleatoric_share.tolist()],
        }


@dataclass(frozen=True)
class CalibrationReport:
    """Error and calibration metrics of one evaluation run"""
    n: int
    mae: float
    rmse: float
    nll: float
    ence: float
    cv: float
    quantile_se: float
    bins: ReliabilityBins
    quantile_curve: Tuple[Tuple[float, float], ...]
    calibrated: bool = False
    mean_scale_factor: Optional[float] = None
    scale_factor_sd: Optional[float] = None
    flags: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        """Metric vocabulary follows the usual table header: MAE, RMSE, NLL, ENCE, CV"""
        return {
            "N": self.n,
            "MAE": self.mae,
            "RMSE": self.rmse,
            "NLL": self.nll,
            "ENCE": self.ence,
            "CV": self.cv,
            "quantile_SE": self.quantile_se,
            "calibrated": self.calibrated,
            "mean_scale_factor": self.mean_scale_factor,
            "scale_factor_sd": self.scale_factor_sd,
            "flags": list(self.flags),
            "bins": self.bins.to_dict(),
        }


@dataclass
class TrainingLogRow:
    step: int
    lam: float
    lr: float
    train_loss: float
    val_nll: float
    val_mae: float


@dataclass
class TrainingLog:
    """Evaluation-window records of one member's training run"""
    rows: List[TrainingLogRow] = field(default_factory=list)
    best_step: Optional[int] = None
    best_val_nll: float = math.inf
    stopped_early: bool = False
    steps_run: int = 0

    COLUMNS = ("step", "lambda", "lr", "train_loss", "val_nll", "val_mae")

    def append(self, row: TrainingLogRow) -> None:
        self.rows.append(row)

    def records(self) -> List[Dict[str, float]]:
        return [
            {
                "step": r.step,
                "lambda": r.lam,
                "lr": r.lr,
                "train_loss": r.train_loss,
                "val_nll": r.val_nll,
                "val_mae": r.val_mae,
            }
            for r in self.rows
        ]


@dataclass
class CommandResult:
    """Result of one CLI command"""
    command: str
    success: bool
    reason: str
    error: Optional[str] = None
    exit_code: int = 0
    artifacts: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        return {
            "command": self.command,
            "success": self.success,
            "reason": self.reason,
            "error": self.error,
            "exit_code": self.exit_code,
            "artifacts": dict(self.artifacts),
            "summary": dict(self.summary),
        }

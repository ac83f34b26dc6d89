"""Core package: data models, errors and the domain modules

Domain modules (chemgraph, diffnet, training, ensemble, calibrate,
evalmetrics) are imported by name; only the dependency-free models and
errors are re-exported here so that utils can import core.errors.
"""

from .errors import (
    MolUQError,
    ConfigError,
    DataError,
    XYZParseError,
    NumericError,
    DomainError,
    TrainingDivergence,
)
from .models import (
    MoleculeRecord,
    MolecularGraph,
    SplitSpec,
    OverlapSplit,
    ProbPrediction,
    EnsemblePrediction,
    PredictionTable,
    ReliabilityBins,
    CalibrationReport,
    TrainingLog,
    TrainingLogRow,
    CommandResult,
)

__all__ = [
    "MolUQError",
    "ConfigError",
    "DataError",
    "XYZParseError",
    "NumericError",
    "DomainError",
    "TrainingDivergence",
    "MoleculeRecord",
    "MolecularGraph",
    "SplitSpec",
    "OverlapSplit",
    "ProbPrediction",
    "EnsemblePrediction",
    "PredictionTable",
    "ReliabilityBins",
    "CalibrationReport",
    "TrainingLog",
    "TrainingLogRow",
    "CommandResult",
]

"""CLI command implementations"""

from .base_command import BaseCommand
from .ingest_command import IngestCommand
from .train_command import TrainCommand
from .predict_command import PredictCommand
from .recalibrate_command import RecalibrateCommand
from .evaluate_command import EvaluateCommand
from .sweep_command import SweepCommand

COMMANDS = {
    "ingest": IngestCommand,
    "train": TrainCommand,
    "predict": PredictCommand,
    "recalibrate": RecalibrateCommand,
    "evaluate": EvaluateCommand,
    "sweep": SweepCommand,
}

__all__ = [
    "BaseCommand",
    "IngestCommand",
    "TrainCommand",
    "PredictCommand",
    "RecalibrateCommand",
    "EvaluateCommand",
    "SweepCommand",
    "COMMANDS",
]

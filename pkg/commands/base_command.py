"""Base class for all CLI commands"""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Optional

from config.pipeline import PipelineConfig
from config.settings import Config, get_config
from core.chemgraph import MolecularDataset, load_dataset_cache, load_split
from core.errors import ConfigError, MolUQError
from core.models import CommandResult, SplitSpec
from utils import get_logger

logger = get_logger(__name__)

DATASET_FILE = "dataset.jsonl"
SPLIT_FILE = "split.json"
MANIFEST_FILE = "manifest.json"
MEMBERS_DIR = "members"
CALIBRATION_FILE = "calibration.json"
AFFINE_FILE = "affine.json"
EVALUATION_DIR = "evaluation"


def predictions_file(part: str) -> str:
    return f"predictions_{part}.csv"


class BaseCommand(ABC):
    """Abstract base class for pipeline commands"""

    name = "command"

    def __init__(
        self,
        pipeline_config: PipelineConfig,
        output_dir: Path,
        app_config: Optional[Config] = None,
        strict: bool = False,
    ):
        """
        Initialize command

        Args:
            pipeline_config: Validated run configuration
            output_dir: Directory holding this run's artifacts
            app_config: Environment configuration (workers, batch size)
            strict: Force sequential execution for byte-identical reruns
        """
        self.config = pipeline_config
        self.output_dir = Path(output_dir)
        self.app_config = app_config or get_config()
        self.strict = strict or self.app_config.STRICT_DETERMINISTIC
        self.logger = get_logger(f"{__name__}.{self.name}")

    @property
    def workers(self) -> int:
        return 1 if self.strict else max(1, self.app_config.WORKERS)

    def path(self, *parts: str) -> Path:
        return self.output_dir.joinpath(*parts)

    async def run(self, **kwargs) -> CommandResult:
        """
        Execute the command, converting failures into a CommandResult

        Returns:
            CommandResult with success status, artifacts and exit code
        """
        try:
            self.logger.info(f"Running {self.name}...")
            self.output_dir.mkdir(parents=True, exist_ok=True)
            result = await self._execute(**kwargs)
            if result.success:
                self.logger.info(f"✓ {self.name}: {result.reason}")
            else:
                self.logger.error(f"✗ {self.name}: {result.reason}")
            return result

        except MolUQError as e:
            self.logger.error(f"{self.name} failed: {e}")
            return CommandResult(
                command=self.name,
                success=False,
                reason=type(e).__name__,
                error=str(e),
                exit_code=e.exit_code,
            )

        except Exception as e:
            self.logger.error(f"Unexpected error in {self.name}: {str(e)}", exc_info=True)
            return CommandResult(
                command=self.name,
                success=False,
                reason="Exception occurred",
                error=str(e),
                exit_code=1,
            )

    @abstractmethod
    async def _execute(self, **kwargs) -> CommandResult:
        """
        Command body; raise MolUQError subclasses on failure

        Returns:
            CommandResult describing the produced artifacts
        """
        pass

    def _ok(self, reason: str, artifacts: Dict[str, Any], summary: Optional[Dict[str, Any]] = None) -> CommandResult:
        return CommandResult(
            command=self.name,
            success=True,
            reason=reason,
            artifacts={key: str(value) for key, value in artifacts.items()},
            summary=summary or {},
        )

    def _require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise ConfigError(f"{path} not found; run '{produced_by}' first")
        return path

    def _load_dataset(self) -> MolecularDataset:
        return load_dataset_cache(self._require(self.path(DATASET_FILE), "ingest"))

    def _load_split(self) -> SplitSpec:
        return load_split(self._require(self.path(SPLIT_FILE), "ingest"))

"""Run configuration: pydantic models loaded from flat dotted key-value files"""

from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError
from utils.serialization import read_key_values, write_key_values

QM9_ELEMENTS: Tuple[int, ...] = (1, 6, 7, 8, 9)


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NetConfig(_Section):
    """Architecture of one ensemble member"""

    embedding_dim: int = Field(default=64, ge=1)
    interaction_steps: int = Field(default=3, ge=1)
    rbf_count: int = Field(default=32, ge=1)
    cutoff: float = Field(default=5.0, gt=0.0)
    min_variance: float = Field(default=1e-6, gt=0.0)
    hidden_dims: Tuple[int, ...] = (64,)
    elements: Tuple[int, ...] = QM9_ELEMENTS
    seed: int = Field(default=0, ge=0)

    @field_validator("hidden_dims", "elements", mode="before")
    @classmethod
    def _parse_int_list(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("hidden_dims")
    @classmethod
    def _positive_widths(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value or any(width < 1 for width in value):
            raise ValueError("hidden_dims must be a nonempty list of positive widths")
        return value

    @field_validator("elements")
    @classmethod
    def _unique_elements(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value or len(set(value)) != len(value) or min(value) < 1:
            raise ValueError("elements must be distinct positive atomic numbers")
        return tuple(sorted(value))


class TrainConfig(_Section):
    """Optimisation schedule of one ensemble member"""

    max_steps: int = Field(default=30_000, ge=0)
    warmup_steps: int = Field(default=10_000, ge=0)
    interp_steps: int = Field(default=10_000, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr0: float = Field(default=1e-4, gt=0.0)
    lr_decay: float = Field(default=0.96, gt=0.0, le=1.0)
    lr_decay_every: Optional[int] = Field(default=None, ge=1)
    weight_decay: float = Field(default=0.01, ge=0.0)
    eval_every: int = Field(default=500, ge=1)
    patience: int = Field(default=20, ge=1)
    clip_grad_norm: Optional[float] = Field(default=10.0, gt=0.0)
    per_atom_targets: bool = False
    seed: int = Field(default=0, ge=0)

    @field_validator("lr_decay_every", "clip_grad_norm", mode="before")
    @classmethod
    def _empty_is_none(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in ("", "none", "off"):
            return None
        return value

    @model_validator(mode="after")
    def _schedule_fits(self) -> "TrainConfig":
        if self.warmup_steps + self.interp_steps > self.max_steps:
            raise ValueError(
                f"warmup_steps + interp_steps ({self.warmup_steps} + {self.interp_steps}) "
                f"exceeds max_steps ({self.max_steps})"
            )
        return self

    @property
    def decay_interval(self) -> int:
        """Steps between multiplicative lr decays"""
        if self.lr_decay_every is not None:
            return self.lr_decay_every
        return max(1, self.max_steps // 100)


class EnsembleConfig(_Section):
    size: int = Field(default=5, ge=1, le=10)


class EvalConfig(_Section):
    bins: int = Field(default=10, ge=1)
    binning: Literal["equal_count", "equal_width"] = "equal_count"
    quantile_levels: int = Field(default=99, ge=1)
    quantile_mode: Literal["gaussian", "mixture"] = "gaussian"
    nll_mode: Literal["gaussian", "exact"] = "gaussian"

    def level_grid(self) -> Tuple[float, ...]:
        """Evenly spaced levels strictly inside (0, 1); 99 levels gives 0.01..0.99"""
        n = self.quantile_levels
        return tuple((i + 1) / (n + 1) for i in range(n))


class CalibrationConfig(_Section):
    method: Literal["isotonic", "scalar"] = "isotonic"
    interpolation: Literal["step", "linear"] = "step"
    huber_delta: float = Field(default=1.35, gt=0.0)


class SweepConfig(_Section):
    kind: Literal["ensemble_size", "train_fraction"] = "ensemble_size"
    max_size: int = Field(default=5, ge=1, le=10)
    fractions: Tuple[float, ...] = (0.1, 0.5, 1.0)

    @field_validator("fractions", mode="before")
    @classmethod
    def _parse_fractions(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("fractions")
    @classmethod
    def _valid_fractions(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value or any(not 0.0 < f <= 1.0 for f in value):
            raise ValueError("fractions must lie in (0, 1]")
        return tuple(sorted(value))


class DataConfig(_Section):
    """Where molecules come from and how they are split"""

    source: Literal["xyz", "synthetic"] = "xyz"
    xyz_path: Optional[Path] = None
    reference_energies: Optional[Path] = None
    target: Literal["U0", "E"] = "U0"
    split_mode: Literal["random", "overlap"] = "random"
    n_train: int = Field(default=110_000, ge=0)
    n_val: int = Field(default=10_000, ge=0)

    # Second dataset for overlap mode
    xyz_path_b: Optional[Path] = None
    reference_energies_b: Optional[Path] = None
    keys_path_a: Optional[Path] = None
    keys_path_b: Optional[Path] = None

    # Synthetic diatomic task
    synthetic_size: int = Field(default=1_000, ge=1)

    @field_validator(
        "xyz_path", "reference_energies", "xyz_path_b",
        "reference_energies_b", "keys_path_a", "keys_path_b",
        mode="before",
    )
    @classmethod
    def _empty_path(cls, value: Any) -> Any:
        if isinstance(value, str) and not value.strip():
            return None
        return value


class PipelineConfig(_Section):
    """Root configuration of a pipeline run"""

    data: DataConfig = DataConfig()
    net: NetConfig = NetConfig()
    train: TrainConfig = TrainConfig()
    ensemble: EnsembleConfig = EnsembleConfig()
    eval: EvalConfig = EvalConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    sweep: SweepConfig = SweepConfig()
    output_dir: Optional[Path] = None
    seed: int = Field(default=0, ge=0)

    @field_validator("output_dir", mode="before")
    @classmethod
    def _empty_output_dir(cls, value: Any) -> Any:
        if isinstance(value, str) and not value.strip():
            return None
        return value

    def require_paths(self, *dotted_keys: str) -> None:
        """Raise ConfigError unless each named path is set and exists"""
        for key in dotted_keys:
            section, _, name = key.partition(".")
            value = getattr(getattr(self, section), name) if name else getattr(self, section)
            if value is None:
                raise ConfigError("required path is not set", key=key)
            if not Path(value).exists():
                raise ConfigError(f"path does not exist: {value}", key=key)

    def flat(self) -> Dict[str, Any]:
        """Dotted key-value view used to echo the effective configuration"""
        flat: Dict[str, Any] = {}
        for name, value in self.model_dump().items():
            if isinstance(value, dict):
                for key, inner in value.items():
                    flat[f"{name}.{key}"] = inner
            else:
                flat[name] = value
        return flat


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        if len(parts) > 2:
            raise ConfigError("keys have at most one dot (section.name)", key=key)
        if len(parts) == 1:
            nested[key] = value
        else:
            section = nested.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError("key used both as a value and as a section", key=parts[0])
            section[parts[1]] = value
    return nested


def build_pipeline_config(flat: Mapping[str, Any]) -> PipelineConfig:
    """Validate a flat dotted mapping into a PipelineConfig"""
    try:
        return PipelineConfig.model_validate(_nest(flat))
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or None
        raise ConfigError(first["msg"], key=key) from e


def load_pipeline_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> PipelineConfig:
    """
    Load a run configuration

    Args:
        path: Optional flat key-value file with dotted keys (train.max_steps = 100)
        overrides: Dotted keys taking precedence over the file (from --set flags)

    Returns:
        Validated PipelineConfig
    """
    flat: Dict[str, Any] = dict(read_key_values(path)) if path else {}
    flat.update(overrides or {})
    return build_pipeline_config(flat)


def parse_overrides(assignments: Optional[list]) -> Dict[str, str]:
    """Turn ["train.max_steps=10", ...] into a mapping"""
    overrides: Dict[str, str] = {}
    for assignment in assignments or []:
        if "=" not in assignment:
            raise ConfigError(f"--set expects key=value, got {assignment!r}")
        key, value = assignment.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def echo_config(config: PipelineConfig, output_dir: Union[str, Path]) -> Path:
    """Write the effective configuration next to the run's artifacts"""
    return write_key_values(Path(output_dir) / "effective_config.txt", config.flat())

"""Artifact serialization helpers: versioned JSON, flat key-value text and CSV"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import pandas as pd

from core.errors import ConfigError, DataError

PathLike = Union[str, Path]


def write_json(path: PathLike, payload: Mapping[str, Any], kind: str, version: int) -> Path:
    """
    Write a JSON artifact with a format tag and version header

    Args:
        path: Destination file
        payload: JSON-serialisable mapping
        kind: Artifact kind checked again on read (e.g. "calibration-map")
        version: Schema version of the artifact

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"format": kind, "version": version, **payload}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def read_json(path: PathLike, kind: str, versions: Iterable[int] = (1,)) -> Dict[str, Any]:
    """Read an artifact written by write_json, checking its tag and version"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"artifact not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e

    if document.get("format") != kind:
        raise DataError(f"{path}: expected a '{kind}' artifact, found '{document.get('format')}'")
    if document.get("version") not in tuple(versions):
        raise DataError(f"{path}: unsupported {kind} version {document.get('version')}")
    return document


def parse_key_values(text: str, source: Optional[str] = None) -> Dict[str, str]:
    """
    Parse flat key-value text: one `key = value` per line, `#` starts a comment

    Later keys override earlier ones. Values are returned as stripped strings.
    """
    values: Dict[str, str] = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            where = f"{source}:" if source else ""
            raise ConfigError(f"{where}line {line_number}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            where = f"{source}:" if source else ""
            raise ConfigError(f"{where}line {line_number}: empty key")
        values[key] = value.strip()
    return values


def read_key_values(path: PathLike) -> Dict[str, str]:
    """Read a flat key-value file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    return parse_key_values(path.read_text(encoding="utf-8"), source=str(path))


def write_key_values(path: PathLike, values: Mapping[str, Any]) -> Path:
    """Write a flat key-value file, keys sorted"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {_format_value(values[key])}" for key in sorted(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if value is None:
        return ""
    return str(value)


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    """Write a CSV artifact with full float precision"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_csv(path: PathLike, required: Iterable[str] = ()) -> pd.DataFrame:
    """Read a CSV artifact and check that the required columns are present"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"artifact not found: {path}")
    frame = pd.read_csv(path, dtype={"id": str})
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return frame

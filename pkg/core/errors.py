"""Exception hierarchy shared by the library and the CLI"""

from typing import Any, Optional


class MolUQError(Exception):
    """Base error; carries the process exit code used by the CLI"""

    exit_code = 1


class ConfigError(MolUQError):
    """Invalid or inconsistent configuration"""

    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class DataError(MolUQError):
    """Unreadable or inconsistent input data"""

    exit_code = 3


class XYZParseError(DataError):
    """Malformed XYZ input; line numbers are 1-based"""

    def __init__(self, message: str, line_number: int, source: Optional[str] = None):
        where = f"{source}:" if source else ""
        super().__init__(f"{where}line {line_number}: {message}")
        self.line_number = line_number
        self.source = source


class NumericError(MolUQError):
    """Non-finite or out-of-domain numbers"""

    exit_code = 4

    def __init__(
        self,
        message: str,
        layer: Optional[str] = None,
        instance_id: Optional[str] = None,
    ):
        details = []
        if layer is not None:
            details.append(f"layer={layer}")
        if instance_id is not None:
            details.append(f"instance={instance_id}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")
        self.layer = layer
        self.instance_id = instance_id


class DomainError(NumericError, ValueError):
    """Argument outside the mathematical domain of a function"""


class TrainingDivergence(NumericError):
    """Training produced non-finite losses for a whole evaluation window"""

    def __init__(self, message: str, params: Any = None, log: Any = None):
        super().__init__(message)
        self.params = params
        self.log = log

"""Utilities package"""

from .logger import setup_logger, get_logger, configure_logging
from .seeding import derive_seed, numpy_rng, torch_generator
from .serialization import (
    write_json,
    read_json,
    parse_key_values,
    read_key_values,
    write_key_values,
    write_csv,
    read_csv,
)

__all__ = [
    "setup_logger",
    "get_logger",
    "configure_logging",
    "derive_seed",
    "numpy_rng",
    "torch_generator",
    "write_json",
    "read_json",
    "parse_key_values",
    "read_key_values",
    "write_key_values",
    "write_csv",
    "read_csv",
]

"""Environment configuration for the molecular uncertainty toolkit"""

import os
from typing import Optional

from dotenv import load_dotenv

from core.errors import ConfigError

# Load environment variables
load_dotenv()


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() == "true"


class Config:
    """Base configuration"""

    # Logging
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    SAVE_RUN_LOG = _flag("SAVE_RUN_LOG", "true")

    # Output
    OUTPUT_ROOT = os.getenv("MOLUQ_OUTPUT_ROOT", "./output")

    # Parallelism: member training workers; 1 trains members sequentially
    WORKERS = int(os.getenv("MOLUQ_WORKERS", "1"))
    TORCH_THREADS = int(os.getenv("MOLUQ_TORCH_THREADS", "0"))  # 0 keeps torch's default

    # Forces sequential reductions so reruns are byte-identical
    STRICT_DETERMINISTIC = _flag("STRICT_DETERMINISTIC", "false")

    # Prediction batch size (graphs per forward pass)
    PREDICT_BATCH_SIZE = int(os.getenv("MOLUQ_PREDICT_BATCH_SIZE", "256"))


class DevelopmentConfig(Config):
    """Development configuration"""
    LOG_LEVEL = "DEBUG"


class ProductionConfig(Config):
    """Production configuration"""
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")


class TestingConfig(Config):
    """Testing configuration"""
    LOG_LEVEL = "DEBUG"
    SAVE_RUN_LOG = False
    WORKERS = 1
    STRICT_DETERMINISTIC = True
    PREDICT_BATCH_SIZE = 64


ENVIRONMENTS = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "testing": TestingConfig,
}


def get_config(env: Optional[str] = None) -> Config:
    """
    Environment configuration by name; APP_ENV when env is None, production
    when neither is set

    Raises:
        ConfigError: Unknown environment name
    """
    name = (env or os.getenv("APP_ENV") or "production").strip().lower()
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {name!r}; expected one of {sorted(ENVIRONMENTS)}", key="APP_ENV")
    return ENVIRONMENTS[name]()

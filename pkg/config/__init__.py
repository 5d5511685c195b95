"""
Configuration module for the TRG toolkit
"""

from .run_config import RunConfig
from .settings import BASE_DIR, LOG_FILE_PATH, LOG_LEVEL, OUTPUT_DIR, WORKERS

__all__ = ["RunConfig", "BASE_DIR", "LOG_FILE_PATH", "LOG_LEVEL", "OUTPUT_DIR", "WORKERS"]

"""
Configuration settings for the TRG toolkit
"""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).parent.parent

# Logging Configuration
LOG_LEVEL = os.getenv("TRG_LOG_LEVEL", "INFO").upper()
LOG_FILE_PATH = os.getenv("TRG_LOG_FILE") or None

# Run Configuration
OUTPUT_DIR = os.getenv("TRG_OUTPUT_DIR", "runs")
WORKERS = int(os.getenv("TRG_WORKERS", "1"))

# File names inside a run directory
DATASET_FILE = "dataset.trgd"
CHECKPOINT_FILE = "model.trgw"
METRICS_FILE = "metrics.csv"

# Gradient check instance
GRADCHECK_FRAMES = 4
GRADCHECK_CHANNELS = 3
GRADCHECK_SIZE = 2
GRADCHECK_HEADS = 2

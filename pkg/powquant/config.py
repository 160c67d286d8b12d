"""
CONFIGURATION - Environment-based settings management

This file loads toolkit-wide settings from environment variables with sensible defaults.
It handles:
1. Results store URL (SQLite file by default)
2. Log level and progress bars
3. Worker count for concurrent sweep points and ensemble members
4. Data directory for IDX files

Experiment settings (task, sweeps, optimizer, schedule) live in YAML files
parsed by powquant.schemas.ExperimentConfig; this module only covers the
process environment. All settings can be overridden via environment variables or .env file.
"""

import os
from dotenv import load_dotenv
from powquant.utils import setup_logging

# Load environment variables from .env file if it exists
load_dotenv()

# STEP 1: Results store configuration
DEFAULT_RESULTS_DB = "sqlite:///./powquant_results.db"
_raw_results_db = os.getenv("POWQUANT_RESULTS_DB", "").strip()
RESULTS_DB = _raw_results_db or DEFAULT_RESULTS_DB

# STEP 2: Logging and progress output
LOG_LEVEL = os.getenv("POWQUANT_LOG_LEVEL", "INFO").upper()
SHOW_PROGRESS = os.getenv("POWQUANT_PROGRESS", "0") == "1"
setup_logging(LOG_LEVEL)

# STEP 3: Concurrency
WORKERS = max(1, int(os.getenv("POWQUANT_WORKERS", "1")))

# STEP 4: Dataset files
DATA_DIR = os.getenv("POWQUANT_DATA_DIR", "./data")

"""
UTILITIES - Shared functions, errors and decorators

This module provides common utilities used across the toolkit:
1. Structured JSON logging (console + JSON-lines run logs)
2. The PowQuant exception hierarchy
3. CLI error handling decorator
4. Common validation functions
5. Constants (recipe defaults) in one place
"""

import logging
import json
from functools import wraps
from pathlib import Path
from typing import Callable, Union
from datetime import datetime, timezone

import click
from pydantic import ValidationError
from sqlalchemy.exc import SQLAlchemyError

# Attributes every LogRecord carries; anything else came in through `extra=`
_RESERVED_ATTRS = set(vars(logging.LogRecord("", 0, "", 0, "", (), None)).keys()) | {"message", "asctime"}


class JSONFormatter(logging.Formatter):
    """Custom JSON formatter for structured logging."""

    def format(self, record):
        log_entry = {
            "timestamp": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno
        }

        # Fields passed through extra={...} (event name, step, metric, ...)
        for key, value in record.__dict__.items():
            if key not in _RESERVED_ATTRS and not key.startswith("_"):
                log_entry[key] = value

        # Add exception info if present
        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_entry, default=str)


_LOGGING_READY = False


def setup_logging(level: Union[int, str] = logging.INFO) -> None:
    """Setup structured JSON logging on the package logger (idempotent)."""
    global _LOGGING_READY
    logger = logging.getLogger("powquant")
    logger.setLevel(level)
    if _LOGGING_READY:
        return

    handler = logging.StreamHandler()
    handler.setFormatter(JSONFormatter())
    logger.addHandler(handler)

    # Prevent duplicate logs
    logger.propagate = False
    _LOGGING_READY = True


def attach_jsonl_log(path: Union[str, Path]) -> logging.Handler:
    """
    Mirror every package log record into a JSON-lines file.

    Returns the handler so callers can detach it when the run finishes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setFormatter(JSONFormatter())
    logging.getLogger("powquant").addHandler(handler)
    return handler


def detach_log(handler: logging.Handler) -> None:
    """Remove and close a handler added by attach_jsonl_log."""
    logging.getLogger("powquant").removeHandler(handler)
    handler.close()


def get_logger(name: str) -> logging.Logger:
    """Get a configured logger instance with consistent formatting."""
    if not name.startswith("powquant"):
        name = f"powquant.{name}"
    return logging.getLogger(name)


# Error hierarchy
class PowQuantError(Exception):
    """Base class for every error raised by the toolkit."""


class LevelSetError(PowQuantError, ValueError):
    """Invalid level set parameters, degenerate layers, values outside P_l."""


class QuantizationError(PowQuantError, ValueError):
    """A value cannot be quantized (non-finite input)."""


class ShapeMismatchError(PowQuantError, ValueError):
    """Tensor shapes disagree with what a layer or model expects."""


class TargetError(PowQuantError, ValueError):
    """Training targets are not valid class indices."""


class PartitionError(PowQuantError, ValueError):
    """Weight partition contract violated (fractions, disjointness)."""


class SQWFormatError(PowQuantError, ValueError):
    """An SQW byte stream cannot be decoded."""


class BadMagicError(SQWFormatError):
    """The stream does not start with the SQW magic bytes."""


class UnsupportedVersionError(SQWFormatError):
    """The SQW version field is not one we can read."""


class TruncatedFileError(SQWFormatError):
    """The stream ended before the declared content."""


class RequiresQuantizedModelError(PowQuantError, ValueError):
    """A shift-add operation met a float32 weight tensor."""


class EnsembleError(PowQuantError, ValueError):
    """Ensemble misuse: too few members, mismatched members, empty pools."""


class MetricError(PowQuantError, ValueError):
    """Metric inputs are empty or misaligned."""


class DatasetError(PowQuantError, ValueError):
    """Dataset files are unreadable or malformed."""


def handle_cli_errors(func: Callable) -> Callable:
    """
    Decorator to handle errors consistently across all CLI commands.

    Usage:
    @click.command()
    @handle_cli_errors
    def my_command(...):
        # Your command logic here
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except PowQuantError as e:
            logger = get_logger(func.__module__)
            logger.error(f"{func.__name__} failed: {format_error_message(e)}")
            raise click.ClickException(str(e))
        except ValidationError as e:
            raise click.ClickException(f"Invalid configuration: {e}")
        except SQLAlchemyError as e:
            logger = get_logger(func.__module__)
            logger.error(f"Database error in {func.__name__}: {e}")
            raise click.ClickException("Database error")
        except click.ClickException:
            # Re-raise click exceptions as-is
            raise
        except Exception as e:
            logger = get_logger(func.__module__)
            logger.exception(f"Unexpected error in {func.__name__}: {e}")
            raise click.ClickException("Internal error")
    return wrapper


# Constants
class Constants:
    """Toolkit constants in one place."""

    # Bit widths
    MIN_BIT_WIDTH = 2
    MAX_BIT_WIDTH = 16
    FLOAT_BITS = 32

    # Incremental quantization
    DEFAULT_SCHEDULE = (0.5, 0.75, 0.875, 1.0)
    DEFAULT_EPOCHS_PER_STEP = 2
    CLS_MAX_LEVEL = 4.0

    # Optimizer defaults per task
    SEG_LR = 5e-4
    SEG_LR_DROPPED = 5e-5
    SEG_STEP_DROP_AT = 200
    CLS_LR = 1e-4
    ASR_LR = 1e-4
    LR_DECAY = 1e-6
    MOMENTUM = 0.9
    WEIGHT_DECAY = 0.0

    # Experiments
    DEFAULT_SEEDS = (0, 1, 2)
    DEFAULT_BATCH_SIZE = 32
    CONFIG_VERSION = 1

    # Suggestive annotation
    SA_UNCERTAINTY_TAKE = 16
    SA_REPRESENTATIVE_TAKE = 8
    SA_ITERATIONS = 120

    # Shift-add kernel: max elements materialized per product chunk
    KERNEL_CHUNK_ELEMENTS = 1 << 22


# Validation helpers
def validate_bit_width(bits: int) -> int:
    """Validate a code bit width."""
    if not Constants.MIN_BIT_WIDTH <= int(bits) <= Constants.MAX_BIT_WIDTH:
        raise LevelSetError(
            f"Bit width must be between {Constants.MIN_BIT_WIDTH} and {Constants.MAX_BIT_WIDTH}, got {bits}"
        )
    return int(bits)


def validate_fraction(fraction: float) -> float:
    """Validate a fraction is in [0, 1]."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("Fraction must be between 0 and 1")
    return float(fraction)


def validate_percentage(percent: float) -> float:
    """Validate percentage is in valid range."""
    if not 0 <= percent <= 100:
        raise ValueError("Percentage must be between 0 and 100")
    return percent


# Utility functions
def round_score(score: float, decimals: int = 3) -> float:
    """Round score to specified decimal places."""
    return round(score, decimals)


def format_error_message(error: Exception) -> str:
    """Format error message for logging."""
    return f"{type(error).__name__}: {str(error)}"


# Initialize logging
setup_logging()

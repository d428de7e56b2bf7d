"""
Logging utilities for training runs and CLI commands.
Outputs to both stdout and rotating log file.
"""

import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

from daq8 import config


def setup_logger(name: str = "daq8", log_dir: Optional[Path] = None,
                 level: Optional[str] = None) -> logging.Logger:
    """
    Set up a logger that outputs to both stdout and a rotating log file.

    Args:
        name: Logger name (also the log file stem)
        log_dir: Directory for log files (defaults to LOG_DIR)
        level: Level name (defaults to LOG_LEVEL)

    Returns:
        Configured logger instance
    """
    log_dir = Path(log_dir) if log_dir is not None else config.LOG_DIR
    log_dir.mkdir(parents=True, exist_ok=True)
    level_value = getattr(logging, (level or config.LOG_LEVEL).upper(), logging.INFO)

    logger = logging.getLogger(name)
    logger.setLevel(level_value)

    # Remove existing handlers to avoid duplicates
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level_value)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # File handler (rotating, max 10MB per file, keep 5 backups)
    log_file = log_dir / f"{name}.log"
    file_handler = RotatingFileHandler(
        str(log_file),
        maxBytes=10 * 1024 * 1024,
        backupCount=5,
        encoding='utf-8'
    )
    file_handler.setLevel(level_value)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    return logger

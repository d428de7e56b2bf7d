"""
Environment-driven settings shared by the engine, the harness and the CLI.
Values come from the process environment (optionally a local .env file).
"""

import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Internal parallelism cap for batch-parallel kernels (0 = auto)
DAQ8_THREADS = int(os.getenv('DAQ8_THREADS', '0'))

# Logging configuration
LOG_DIR = Path(os.getenv('LOG_DIR', 'logs'))
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

# Default output directory for runs when --out is not given
DAQ8_OUT_DIR = Path(os.getenv('DAQ8_OUT_DIR', 'runs'))

# Quantization grid: symmetric 8-bit, -128 never produced
QMAX = 127

# Per-output-element product bound for 32-bit integer accumulation
INT_ACC_PRODUCT_BOUND = 2 ** 14


def thread_count() -> int:
    """Resolve DAQ8_THREADS to a concrete worker count (>= 1)."""
    threads = int(os.getenv('DAQ8_THREADS', str(DAQ8_THREADS)))
    if threads <= 0:
        return os.cpu_count() or 1
    return threads

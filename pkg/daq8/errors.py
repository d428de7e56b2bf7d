"""
Exception taxonomy for the engine.

The CLI maps these onto exit codes (see main.py); library code raises the most
specific class so callers can tell data problems from contract violations.
"""

from typing import Optional, Sequence


class Daq8Error(Exception):
    """Base class for all engine errors."""


class DimensionError(Daq8Error, ValueError):
    """Shapes or extents do not line up."""

    def __init__(self, message: str, extents: Optional[Sequence] = None):
        if extents is not None:
            message = f"{message} (extents: {', '.join(str(e) for e in extents)})"
        super().__init__(message)
        self.extents = extents


class ContractViolation(Daq8Error, ValueError):
    """A precondition on values was broken (NaN, Inf, non-positive scale, ...)."""


class OverflowRiskError(Daq8Error):
    """Integer accumulation could exceed 32 bits for the given extents."""


class DomainError(Daq8Error, ValueError):
    """Argument outside the domain where a formula is defined."""


class DegenerateSliceError(Daq8Error):
    """Gradient slice is all zeros; scale update must be skipped."""


class CheckpointError(Daq8Error):
    """Checkpoint container is corrupt, has the wrong version or topology."""


class FormatError(Daq8Error):
    """Malformed binary input (dataset or dump file)."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
        self.offset = offset


class ConfigError(Daq8Error, ValueError):
    """Run configuration failed validation."""


class TrainingDivergedError(Daq8Error):
    """Loss became NaN/Inf; carries where the diagnostic dump was written."""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        if dump_path:
            message = f"{message} (diagnostics: {dump_path})"
        super().__init__(message)
        self.dump_path = dump_path

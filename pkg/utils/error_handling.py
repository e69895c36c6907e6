"""
Error handling utilities for the AHP-Net low-dose CT toolkit.

This module provides the exception hierarchy shared by the numeric tools,
the model and the command line, plus helpers that map errors to exit codes
and log their context in one structured record.
"""

import logging
import traceback
from collections import defaultdict, deque
from datetime import datetime
from enum import Enum
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class ErrorSeverity(Enum):
    """Error severity levels for categorization and handling."""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class ErrorCategory(Enum):
    """Error categories for specific handling strategies."""
    VALIDATION = "validation"
    GEOMETRY = "geometry"
    CONFIGURATION = "configuration"
    CONVERGENCE = "convergence"
    NUMERICAL = "numerical"
    IO = "io"
    UNKNOWN = "unknown"


class ExitCode(int, Enum):
    """Process exit codes of the command line."""
    SUCCESS = 0
    USAGE = 1
    FAILURE = 2


class ReconstructionError(Exception):
    """Base exception for reconstruction toolkit errors."""

    def __init__(
        self,
        message: str,
        category: ErrorCategory = ErrorCategory.UNKNOWN,
        severity: ErrorSeverity = ErrorSeverity.MEDIUM,
        context: Optional[Dict[str, Any]] = None,
        original_error: Optional[Exception] = None
    ):
        super().__init__(message)
        self.message = message
        self.category = category
        self.severity = severity
        self.context = context or {}
        self.original_error = original_error
        self.timestamp = datetime.now()


class ValidationError(ReconstructionError):
    """Shape, size or range violations of an input."""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message,
            category=ErrorCategory.VALIDATION,
            severity=ErrorSeverity.LOW,
            **kwargs
        )


class GeometryError(ReconstructionError):
    """Invalid scan geometry."""

    def __init__(self, message: str, dimension: Optional[str] = None, **kwargs):
        super().__init__(
            message,
            category=ErrorCategory.GEOMETRY,
            **kwargs
        )
        self.dimension = dimension


class ConfigurationError(ReconstructionError):
    """Unknown keys, malformed overrides or unresolvable paths."""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message,
            category=ErrorCategory.CONFIGURATION,
            severity=ErrorSeverity.LOW,
            **kwargs
        )


class ConvergenceError(ReconstructionError):
    """A solver that was required to converge did not."""

    def __init__(self, message: str, iterations: Optional[int] = None, severity: ErrorSeverity = ErrorSeverity.HIGH, **kwargs):
        super().__init__(
            message,
            category=ErrorCategory.CONVERGENCE,
            severity=severity,
            **kwargs
        )
        self.iterations = iterations


class NumericalError(ReconstructionError):
    """Non-finite values where finite ones are required."""

    def __init__(self, message: str, dump_path: Optional[str] = None, **kwargs):
        super().__init__(
            message,
            category=ErrorCategory.NUMERICAL,
            severity=ErrorSeverity.CRITICAL,
            **kwargs
        )
        self.dump_path = dump_path


class FileFormatError(ReconstructionError):
    """Bad magic bytes, truncated payloads or unsupported versions."""

    def __init__(self, message: str, path: Optional[str] = None, **kwargs):
        super().__init__(
            message,
            category=ErrorCategory.IO,
            **kwargs
        )
        self.path = path


class ErrorMetrics:
    """Tracks error counts per category over a sliding window."""

    def __init__(self, window_size: int = 100):
        self.window_size = window_size
        self.errors = deque(maxlen=window_size)
        self.category_counts = defaultdict(int)

    def record_error(self, error: ReconstructionError):
        """Record an error occurrence."""
        self.errors.append({
            "timestamp": error.timestamp,
            "category": error.category.value,
            "severity": error.severity.value,
            "message": error.message,
        })
        self.category_counts[error.category.value] += 1

    def get_metrics(self) -> Dict[str, Any]:
        """Get current error metrics."""
        return {
            "total_errors": len(self.errors),
            "category_breakdown": dict(self.category_counts),
        }


_error_metrics = ErrorMetrics()


def get_error_metrics() -> ErrorMetrics:
    """Get the global error metrics instance."""
    return _error_metrics


def exit_code_for(error: Exception) -> ExitCode:
    """Map an exception to the process exit code of the command line."""
    if isinstance(error, ConfigurationError):
        return ExitCode.USAGE
    if isinstance(error, ReconstructionError):
        return ExitCode.FAILURE
    return ExitCode.FAILURE


def format_reason(error: Exception) -> str:
    """One-line machine-parsable failure reason for standard error."""
    if isinstance(error, ReconstructionError):
        category = error.category.value
        message = error.message
    else:
        category = ErrorCategory.UNKNOWN.value
        message = str(error)
    message = " ".join(message.split())
    return f"error category={category} reason={message}"


def log_error_context(error: ReconstructionError, additional_context: Optional[Dict[str, Any]] = None):
    """Log one structured record describing an error."""
    context = {
        "error_type": type(error).__name__,
        "category": error.category.value,
        "severity": error.severity.value,
        "message": error.message,
        "timestamp": error.timestamp.isoformat(),
        "context": error.context,
    }
    if additional_context:
        context.update(additional_context)
    if error.original_error:
        context["original_error"] = str(error.original_error)
        context["traceback"] = "".join(
            traceback.format_exception(
                type(error.original_error),
                error.original_error,
                error.original_error.__traceback__,
            )
        )

    _error_metrics.record_error(error)
    if error.severity in (ErrorSeverity.HIGH, ErrorSeverity.CRITICAL):
        logger.error(f"Reconstruction error: {context}")
    else:
        logger.warning(f"Reconstruction error: {context}")


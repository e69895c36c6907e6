"""
Monitoring and logging utilities for the AHP-Net low-dose CT toolkit.

This module configures logging once per process and tracks named timing
and counter metrics (epoch durations, CG iteration counts) so that runs can
report where their time went.
"""

import json
import logging
import logging.handlers
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Dict, Optional

from .config import LoggingConfig


@dataclass
class PerformanceMetric:
    """Performance metric data structure."""
    name: str
    value: float
    unit: str
    timestamp: datetime
    tags: Dict[str, str]


class StructuredFormatter(logging.Formatter):
    """Formats log records as single-line JSON objects."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": datetime.fromtimestamp(record.created).isoformat(),
            "logger": record.name,
            "level": record.levelname,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload)


def setup_logging(config: Optional[LoggingConfig] = None) -> logging.Logger:
    """Configure the root logger from a LoggingConfig."""
    config = config or LoggingConfig()
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(getattr(logging, config.level.upper(), logging.INFO))

    formatter = StructuredFormatter() if config.structured_logging else logging.Formatter(config.format)
    if config.log_to_console:
        console = logging.StreamHandler()
        console.setFormatter(formatter)
        root.addHandler(console)
    if config.file_path:
        file_handler = logging.handlers.RotatingFileHandler(
            config.file_path,
            maxBytes=config.max_file_size,
            backupCount=config.backup_count,
        )
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)
    return root


class PerformanceMonitor:
    """Records named metrics and summarizes them."""

    def __init__(self, window_size: int = 1000):
        self.window_size = window_size
        self.metrics = defaultdict(lambda: deque(maxlen=window_size))
        self.failures = defaultdict(int)
        self._lock = threading.Lock()

    def record_metric(
        self,
        name: str,
        value: float,
        unit: str = "",
        tags: Optional[Dict[str, str]] = None
    ):
        """Record a performance metric."""
        with self._lock:
            self.metrics[name].append(
                PerformanceMetric(
                    name=name,
                    value=float(value),
                    unit=unit,
                    timestamp=datetime.now(),
                    tags=tags or {},
                )
            )

    def record_failure(self, name: str):
        with self._lock:
            self.failures[name] += 1

    def get_metric_stats(self, metric_name: str) -> Dict[str, Any]:
        """Get statistics for a specific metric."""
        with self._lock:
            metrics = list(self.metrics.get(metric_name, ()))
            failures = self.failures.get(metric_name, 0)
        if not metrics:
            return {"count": 0, "failures": failures}

        values = [m.value for m in metrics]
        return {
            "count": len(values),
            "failures": failures,
            "min": min(values),
            "max": max(values),
            "avg": sum(values) / len(values),
            "total": sum(values),
            "latest": values[-1],
            "unit": metrics[-1].unit,
        }

    def get_all_metrics(self) -> Dict[str, Any]:
        """Get statistics for every recorded metric."""
        with self._lock:
            names = list(self.metrics)
        return {name: self.get_metric_stats(name) for name in names}

    def track_operation(self, operation_name: str) -> "OperationTracker":
        """Context manager that times a block under `<name>_seconds`."""
        return OperationTracker(self, operation_name)

    def log_summary(self, logger: Optional[logging.Logger] = None):
        logger = logger or logging.getLogger(__name__)
        for name, stats in sorted(self.get_all_metrics().items()):
            if stats["count"]:
                logger.info(
                    f"{name}: count={stats['count']} avg={stats['avg']:.4g} "
                    f"min={stats['min']:.4g} max={stats['max']:.4g} failures={stats['failures']}"
                )


class OperationTracker:
    """Context manager for tracking individual operations."""

    def __init__(self, monitor: PerformanceMonitor, operation_name: str):
        self.monitor = monitor
        self.operation_name = operation_name
        self.start_time = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        duration = time.perf_counter() - self.start_time
        name = f"{self.operation_name}_seconds"
        self.monitor.record_metric(name, duration, "seconds")
        if exc_type is not None:
            self.monitor.record_failure(name)
        return False


_global_monitor = PerformanceMonitor()


def get_performance_monitor() -> PerformanceMonitor:
    """Get the process-wide performance monitor."""
    return _global_monitor

import json
import logging

import pytest

from utils.config import LoggingConfig
from utils.monitoring import PerformanceMonitor, StructuredFormatter, setup_logging


@pytest.fixture
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield root
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(level)


def test_metric_stats():
    monitor = PerformanceMonitor()
    for value in (3.0, 1.0, 2.0):
        monitor.record_metric("cg_iterations", value, "iterations")
    stats = monitor.get_metric_stats("cg_iterations")
    assert stats["count"] == 3
    assert stats["min"] == 1.0 and stats["max"] == 3.0
    assert stats["avg"] == pytest.approx(2.0)
    assert stats["latest"] == 2.0
    assert stats["unit"] == "iterations"
    assert monitor.get_metric_stats("unknown") == {"count": 0, "failures": 0}


def test_window_keeps_the_latest_values():
    monitor = PerformanceMonitor(window_size=2)
    for value in (1.0, 2.0, 3.0):
        monitor.record_metric("loss", value)
    assert monitor.get_metric_stats("loss")["total"] == 5.0


def test_track_operation_times_blocks_and_counts_failures():
    monitor = PerformanceMonitor()
    with monitor.track_operation("epoch"):
        pass
    with pytest.raises(RuntimeError):
        with monitor.track_operation("epoch"):
            raise RuntimeError("diverged")
    stats = monitor.get_metric_stats("epoch_seconds")
    assert stats["count"] == 2
    assert stats["failures"] == 1
    assert stats["min"] >= 0.0


def test_log_summary_reports_each_metric(caplog):
    monitor = PerformanceMonitor()
    monitor.record_metric("train_seconds", 1.5, "seconds")
    with caplog.at_level(logging.INFO):
        monitor.log_summary(logging.getLogger("summary"))
    assert "train_seconds: count=1 avg=1.5" in caplog.text


def test_structured_formatter_emits_json():
    record = logging.LogRecord("tools.inversion_tools", logging.WARNING, __file__, 1, "stage %d", (2,), None)
    payload = json.loads(StructuredFormatter().format(record))
    assert payload["logger"] == "tools.inversion_tools"
    assert payload["level"] == "WARNING"
    assert payload["message"] == "stage 2"


def test_setup_logging_replaces_root_handlers(restore_root_logger, tmp_path):
    log_file = tmp_path / "run.log"
    root = setup_logging(
        LoggingConfig(level="DEBUG", log_to_console=False, file_path=str(log_file), structured_logging=True)
    )
    assert root.level == logging.DEBUG
    assert len(root.handlers) == 1
    logging.getLogger("models.trainer").debug("epoch 1 done")
    root.handlers[0].flush()
    line = log_file.read_text().strip().splitlines()[-1]
    assert json.loads(line)["message"] == "epoch 1 done"

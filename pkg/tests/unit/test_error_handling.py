import logging

from utils.error_handling import (
    ConfigurationError,
    ConvergenceError,
    ErrorCategory,
    ErrorMetrics,
    ErrorSeverity,
    ExitCode,
    FileFormatError,
    GeometryError,
    NumericalError,
    ValidationError,
    exit_code_for,
    format_reason,
    get_error_metrics,
    log_error_context,
)


def test_error_categories():
    assert ValidationError("x").category == ErrorCategory.VALIDATION
    assert GeometryError("x", dimension="n_bins").dimension == "n_bins"
    assert ConfigurationError("x").category == ErrorCategory.CONFIGURATION
    assert ConvergenceError("x", iterations=7).iterations == 7
    assert ConvergenceError("x").severity == ErrorSeverity.HIGH
    assert ConvergenceError("x", severity=ErrorSeverity.MEDIUM).severity == ErrorSeverity.MEDIUM
    assert NumericalError("x", dump_path="d.ahpc").severity == ErrorSeverity.CRITICAL
    assert FileFormatError("x", path="p").category == ErrorCategory.IO


def test_exit_codes():
    assert exit_code_for(ConfigurationError("x")) == ExitCode.USAGE == 1
    assert exit_code_for(ValidationError("x")) == ExitCode.FAILURE == 2
    assert exit_code_for(ConvergenceError("x")) == 2
    assert exit_code_for(NumericalError("x")) == 2
    assert exit_code_for(RuntimeError("x")) == 2


def test_reason_is_a_single_line():
    reason = format_reason(GeometryError("image wider\nthan the field of view", dimension="image width"))
    assert reason == "error category=geometry reason=image wider than the field of view"
    assert format_reason(KeyError("k")).startswith("error category=unknown reason=")


def test_error_metrics_count_categories():
    metrics = ErrorMetrics(window_size=2)
    for error in (ValidationError("a"), ValidationError("b"), ConfigurationError("c")):
        metrics.record_error(error)
    summary = metrics.get_metrics()
    assert summary["total_errors"] == 2
    assert summary["category_breakdown"] == {"validation": 2, "configuration": 1}


def test_log_error_context_level_follows_severity(caplog):
    before = get_error_metrics().category_counts["numerical"]
    with caplog.at_level(logging.WARNING):
        log_error_context(ValidationError("minor"))
        log_error_context(NumericalError("major"), {"command": "train"})
    levels = [record.levelname for record in caplog.records]
    assert levels == ["WARNING", "ERROR"]
    assert "'command': 'train'" in caplog.records[1].getMessage()
    assert get_error_metrics().category_counts["numerical"] == before + 1


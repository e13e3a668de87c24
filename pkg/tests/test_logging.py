"""Tests for log files and the terminal renderings."""

import logging

import pytest
from rich.console import Console

from pixel_mamba import logging as pm_logging
from pixel_mamba.config import load_config
from pixel_mamba.errors import NumericError
from pixel_mamba.errors import ValidationError
from pixel_mamba.errors import exit_code_for
from pixel_mamba.network import shape_trace
from pixel_mamba.ui import error_panel
from pixel_mamba.ui import print_trace


@pytest.fixture
def file_logger(isolated_logs):
    """Package logger writing into the test's log directory."""
    logger = pm_logging.setup_logging(directory=isolated_logs)
    yield logger
    pm_logging.setup_logging()


def flush(logger: logging.Logger) -> None:
    for handler in logger.handlers:
        handler.flush()


class TestLogFiles:
    """Test the rotating log file helpers."""

    def test_log_dir_follows_environment(self, isolated_logs):
        assert pm_logging.get_log_file_path() == isolated_logs / "pixel-mamba.log"

    def test_child_logger_name(self):
        assert pm_logging.get_logger("fusion").name == "pixel_mamba.fusion"
        assert pm_logging.get_logger().name == "pixel_mamba"

    def test_records_reach_file(self, file_logger):
        pm_logging.get_logger("train").info("epoch 1 done")
        flush(file_logger)
        recent = pm_logging.read_recent_logs(5)
        assert "pixel_mamba.train - INFO" in recent
        assert "epoch 1 done" in recent

    def test_read_recent_limits_lines(self, isolated_logs):
        isolated_logs.mkdir(parents=True)
        (isolated_logs / "pixel-mamba.log").write_text("a\nb\nc\n")
        assert pm_logging.read_recent_logs(2) == "b\nc\n"

    def test_read_without_file(self):
        assert pm_logging.read_recent_logs().startswith("No log file found")

    def test_stats_and_clear(self, isolated_logs):
        isolated_logs.mkdir(parents=True)
        (isolated_logs / "pixel-mamba.log").write_text("x" * 100)
        (isolated_logs / "pixel-mamba.log.1").write_text("y" * 100)
        stats = pm_logging.get_log_stats()
        assert stats["total_files"] == 2
        assert stats["total_size_mb"] == pytest.approx(200 / 1024 / 1024)

        ok, message = pm_logging.clear_logs()
        assert ok
        assert message == "Cleared 2 log file(s)."
        assert pm_logging.get_log_files() == []

    def test_clear_nothing(self):
        assert pm_logging.clear_logs() == (True, "No log files to clear.")

    def test_console_handler_added_once(self, file_logger):
        first = pm_logging.enable_console()
        second = pm_logging.enable_console(logging.DEBUG)
        assert first is second
        assert second.level == logging.DEBUG
        assert file_logger.handlers.count(first) == 1


class TestErrors:
    """Test exit-code mapping."""

    def test_exit_codes(self):
        assert exit_code_for(ValidationError("x")) == 2
        assert exit_code_for(NumericError("x")) == 3
        assert exit_code_for(RuntimeError("x")) == 1


class TestUi:
    """Test rich renderings."""

    def test_trace_rendering(self):
        console = Console(record=True, width=120)
        print_trace(console, shape_trace(load_config("tiny-4"), (16, 16)))
        text = console.export_text()
        assert "Shape trace" in text
        assert "Peak within 2M: yes" in text

    def test_error_panel_names_error(self):
        console = Console(record=True, width=120)
        console.print(error_panel(ValidationError("bad window"), hint="try 8x8"))
        text = console.export_text()
        assert "ValidationError" in text
        assert "bad window" in text
        assert "try 8x8" in text

"""Logging configuration for Pixel-Mamba.

Every module logs through a child of the `pixel_mamba` logger:
- File: <log dir>/pixel-mamba.log, rotating at 10MB with 3 backups
- Log dir: $PIXELMAMBA_LOG_DIR, else /tmp/pixel-mamba (read on every call)
- DEBUG by default: per-layer token counts, fusion merges, epoch losses
- Optional rich console mirror on stderr (`pixel-mamba --verbose ...`)
"""

import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional


DEFAULT_LOG_DIR = "/tmp/pixel-mamba"
LOG_NAME = "pixel-mamba.log"
MAX_LOG_SIZE = 10 * 1024 * 1024
BACKUP_COUNT = 3

ROOT_LOGGER_NAME = "pixel_mamba"
FILE_FORMAT = (
    "%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s"
)


def log_dir() -> Path:
    return Path(os.getenv("PIXELMAMBA_LOG_DIR", DEFAULT_LOG_DIR))


def get_log_file_path() -> Path:
    """Path of the current (unrotated) log file."""
    return log_dir() / LOG_NAME


def setup_logging(
    level: int = logging.DEBUG, directory: Optional[Path] = None
) -> logging.Logger:
    """Attach the rotating file handler to the package logger.

    Calling again replaces the handlers, so a new directory takes effect.

    Args:
        level: Logging level (default: DEBUG)
        directory: Log directory (default: log_dir())

    Returns:
        The `pixel_mamba` logger
    """
    logger = logging.getLogger(ROOT_LOGGER_NAME)
    logger.setLevel(level)
    logger.handlers.clear()
    # CLI output stays clean unless --verbose adds a console handler
    logger.propagate = False

    path = (directory or log_dir()) / LOG_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        handler: logging.Handler = RotatingFileHandler(
            path, maxBytes=MAX_LOG_SIZE, backupCount=BACKUP_COUNT, encoding="utf-8"
        )
    except OSError:
        handler = logging.NullHandler()
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    logger.addHandler(handler)
    logger.debug(f"Logging to {path}")
    return logger


def enable_console(level: int = logging.INFO) -> logging.Handler:
    """Mirror package log records to stderr through rich.

    Returns:
        The added handler (at most one is ever attached)
    """
    from rich.console import Console
    from rich.logging import RichHandler

    logger = logging.getLogger(ROOT_LOGGER_NAME)
    for handler in logger.handlers:
        if isinstance(handler, RichHandler):
            handler.setLevel(level)
            return handler
    handler = RichHandler(
        console=Console(stderr=True), show_path=False, rich_tracebacks=True
    )
    handler.setLevel(level)
    logger.addHandler(handler)
    return handler


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Logger for a component: `pixel_mamba.<name>`, or the root when None."""
    if name:
        return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")
    return logging.getLogger(ROOT_LOGGER_NAME)


def get_log_files() -> list[Path]:
    """Current and rotated log files, newest first."""
    directory = log_dir()
    if not directory.exists():
        return []
    files = list(directory.glob(f"{LOG_NAME}*"))
    files.sort(key=lambda f: f.stat().st_mtime, reverse=True)
    return files


def read_recent_logs(lines: int = 50) -> str:
    """Last `lines` lines of the current log file."""
    path = get_log_file_path()
    if not path.exists():
        return "No log file found. Logs will be created on the next run."
    try:
        with open(path, "r", encoding="utf-8") as f:
            return "".join(f.readlines()[-lines:]) if lines > 0 else ""
    except OSError as e:
        return f"Error reading log file: {e}"


def clear_logs() -> tuple[bool, str]:
    """Delete every log file.

    Returns:
        Tuple of (success, message)
    """
    try:
        files = get_log_files()
        if not files:
            return True, "No log files to clear."
        for path in files:
            path.unlink()
        return True, f"Cleared {len(files)} log file(s)."
    except OSError as e:
        return False, f"Error clearing logs: {e}"


def get_log_stats() -> dict:
    """File count, total size in MB, and the newest and oldest log paths."""
    files = get_log_files()
    if not files:
        return {
            "total_files": 0,
            "total_size_mb": 0,
            "current_log": None,
            "oldest_log": None,
        }
    return {
        "total_files": len(files),
        "total_size_mb": sum(f.stat().st_size for f in files) / 1024 / 1024,
        "current_log": str(files[0]),
        "oldest_log": str(files[-1]),
    }


_root_logger = setup_logging()

"""
console.py

Tagged status logging. Console lines keep the familiar shape

    ✅ [SAVED] checkpoints/checkpoint_last.ckpt

and every CLI session also gets a plain-text log file in the log directory.
Library modules only call setup_logger(__name__); handlers are attached by
the CLI.
"""

import logging
import os
from datetime import datetime

# --- CONFIGURATION ---
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_LOG_DIR = os.path.join(BASE_DIR, "logs")
ROOT_LOGGER = "rangeseg"

LEVEL_ICONS = {
    logging.DEBUG: "🔍",
    logging.INFO: "✅",
    logging.WARNING: "⚠️",
    logging.ERROR: "🛑",
    logging.CRITICAL: "🛑",
}


def get_log_dir():
    return os.environ.get("RANGESEG_LOG_DIR", DEFAULT_LOG_DIR)


class TaggedFormatter(logging.Formatter):
    """Formats `extra={"tag": ...}` records as '<icon> [TAG] message'."""

    def __init__(self, with_time=False):
        super().__init__()
        self.with_time = with_time

    def format(self, record):
        tag = getattr(record, "tag", None) or record.name.rsplit(".", 1)[-1].upper()
        icon = LEVEL_ICONS.get(record.levelno, "•")
        line = f"{icon} [{tag}] {record.getMessage()}"
        if self.with_time:
            line = f"{datetime.fromtimestamp(record.created).isoformat(timespec='seconds')} {line}"
        if record.exc_info:
            line += "\n" + self.formatException(record.exc_info)
        return line


def setup_logger(name):
    """Module logger under the package root logger."""
    if name != ROOT_LOGGER and not name.startswith(ROOT_LOGGER + "."):
        name = f"{ROOT_LOGGER}.{name.rsplit('.', 1)[-1]}"
    return logging.getLogger(name)


def configure_console(verbose=False):
    root = logging.getLogger(ROOT_LOGGER)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in list(root.handlers):
        if getattr(handler, "_rangeseg_console", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(TaggedFormatter())
    handler._rangeseg_console = True
    root.addHandler(handler)
    return root


def start_session_log(subcommand, log_dir=None):
    """Attach a file handler writing run_log_<timestamp>.txt; returns its path."""
    log_dir = log_dir or get_log_dir()
    os.makedirs(log_dir, exist_ok=True)
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_file = os.path.join(log_dir, f"run_log_{timestamp}.txt")
    root = logging.getLogger(ROOT_LOGGER)
    handler = logging.FileHandler(log_file, encoding="utf-8")
    handler.setFormatter(TaggedFormatter(with_time=True))
    handler._rangeseg_session = True
    root.addHandler(handler)
    root.info("session started: %s", subcommand, extra={"tag": "SESSION"})
    return log_file


def stop_session_log():
    root = logging.getLogger(ROOT_LOGGER)
    for handler in list(root.handlers):
        if getattr(handler, "_rangeseg_session", False):
            handler.close()
            root.removeHandler(handler)

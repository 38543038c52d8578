"""Logging configuration.

structlog renders one JSON object per line on top of the stdlib logging
module. Log lines go to stderr (and optionally a file); stdout is left to
the CLI summaries. Training and evaluation records are not log lines: they
are written as JSONL artifacts by the pipeline.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Optional

import structlog

from src.core.config import settings


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Setup structured logging."""

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer(sort_keys=True),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        # loggers are created at import time, before the CLI knows the level
        cache_logger_on_first_use=False,
    )

    level = getattr(logging, log_level.upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"unknown log level {log_level!r}")

    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_path, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(logging.Formatter("%(message)s"))

    logging.basicConfig(level=level, handlers=handlers, force=True)


def bind_run_context(**context: Any) -> None:
    """Attach ``context`` (command, seed, config hash) to every following log line."""
    structlog.contextvars.clear_contextvars()
    structlog.contextvars.bind_contextvars(**context)


def get_logger(name: str) -> structlog.BoundLogger:
    """Get a structured logger."""
    return structlog.get_logger(name)


# Defaults until the CLI has resolved its settings
setup_logging(settings.app.log_level, settings.app.log_file)

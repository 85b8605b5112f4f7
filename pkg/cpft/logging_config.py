"""
Logging configuration for cpft.

Console output by default, optional rotating files, and structured JSON for
machine consumption. Library modules only call logging.getLogger(__name__);
handlers are installed once by the CLI through setup_logging().

Environment Variables:
- LOG_LEVEL: debug, info, warning, error (default: info)
- LOG_FORMAT: json or text (default: text)
- LOG_TO_FILE: true/false (default: false)
- LOG_DIR: Directory for log files (default: logs)
- ASYNC_LOGGING: true/false, hand records to a background listener (default: false)
"""

import atexit
import json
import logging
import logging.handlers
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from queue import Queue
from typing import Any, Callable, Dict, List, Optional, Tuple

TRACE_LOGGER_NAME = "cpft.trace"

# Contextual fields copied from the record into JSON output when present
CONTEXT_FIELDS = ("run_id", "verb", "stage", "epoch", "user")


class StructuredFormatter(logging.Formatter):
    """JSON formatter: one object per record."""

    def format(self, record: logging.LogRecord) -> str:
        try:
            log_data: Dict[str, Any] = {
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "level": record.levelname,
                "logger": record.name,
                "message": record.getMessage(),
                "module": record.module,
                "function": record.funcName,
                "line": record.lineno,
            }
            for field in CONTEXT_FIELDS:
                if hasattr(record, field):
                    log_data[field] = getattr(record, field)
            if hasattr(record, "trace"):
                log_data["trace"] = record.trace

            if record.exc_info:
                log_data["exception"] = self.formatException(record.exc_info)

            return json.dumps(log_data, default=str)
        except Exception as e:
            # Logging must never take a training run down
            fallback = {
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "level": "ERROR",
                "message": f"Logging error: {e} | Original message: {getattr(record, 'msg', 'unknown')}",
                "formatter_error": True,
            }
            return json.dumps(fallback)


class ReadableFormatter(logging.Formatter):
    """Human-readable formatter for terminals."""

    def __init__(self):
        super().__init__(
            fmt="%(asctime)s | %(levelname)-8s | %(name)-20s | %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() == "true"


# (file name, size cap in MiB, backups, minimum level, JSON-only trace file)
_LOG_FILES: Tuple[Tuple[str, int, int, int, bool], ...] = (
    ("cpft.log", 50, 10, logging.NOTSET, False),
    ("cpft-error.log", 10, 5, logging.ERROR, False),
    ("trace.log", 100, 20, logging.NOTSET, True),
)


def _only_traces(record: logging.LogRecord) -> bool:
    return record.name == TRACE_LOGGER_NAME


def _file_handlers(log_dir: Path, formatter: logging.Formatter) -> List[logging.Handler]:
    log_dir.mkdir(parents=True, exist_ok=True)
    handlers: List[logging.Handler] = []
    for name, cap_mib, backups, level, traces_only in _LOG_FILES:
        handler = logging.handlers.RotatingFileHandler(
            log_dir / name, maxBytes=cap_mib << 20, backupCount=backups, encoding="utf-8",
        )
        handler.setLevel(level)
        handler.setFormatter(StructuredFormatter() if traces_only else formatter)
        if traces_only:
            handler.addFilter(_only_traces)
        handlers.append(handler)
    return handlers


def setup_logging() -> None:
    """Install handlers on the root logger according to the environment."""
    logging.raiseExceptions = False

    level_name = os.getenv("LOG_LEVEL", "INFO").upper()
    fmt = os.getenv("LOG_FORMAT", "text").lower()
    to_file = _env_flag("LOG_TO_FILE", "false")
    log_dir = Path(os.getenv("LOG_DIR", "logs"))
    async_mode = _env_flag("ASYNC_LOGGING", "false")

    root = logging.getLogger()
    root.setLevel(getattr(logging, level_name, logging.INFO))
    root.handlers.clear()

    formatter = StructuredFormatter() if fmt == "json" else ReadableFormatter()

    # stderr keeps stdout free for tables and paths the CLI prints
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    handlers: List[logging.Handler] = [console]
    if to_file:
        try:
            handlers.extend(_file_handlers(log_dir, formatter))
        except PermissionError:
            logging.warning(f"Cannot write logs under {log_dir}; logging to stderr only")

    if async_mode:
        queue: Queue = Queue(-1)
        root.addHandler(logging.handlers.QueueHandler(queue))
        listener = logging.handlers.QueueListener(queue, *handlers, respect_handler_level=True)
        listener.start()
        atexit.register(listener.stop)
    else:
        for handler in handlers:
            root.addHandler(handler)

    logging.getLogger(__name__).debug(
        f"logging ready: level={level_name} format={fmt} files={to_file} async={async_mode}"
    )


def get_trace_logger() -> logging.Logger:
    """Dedicated logger for per-epoch training traces."""
    return logging.getLogger(TRACE_LOGGER_NAME)


class LogContext:
    """
    Attach fields to every record created inside the block. Contexts nest;
    inner fields win.

        with LogContext(run_id="finetune-...", stage="finetune"):
            logger.info("epoch done")  # record carries run_id and stage
    """

    def __init__(self, **fields: Any):
        self.fields = fields
        self._previous: Optional[Callable[..., logging.LogRecord]] = None

    def __enter__(self) -> "LogContext":
        previous = self._previous = logging.getLogRecordFactory()
        fields = self.fields

        def factory(*args, **kwargs) -> logging.LogRecord:
            record = previous(*args, **kwargs)
            record.__dict__.update(fields)
            return record

        logging.setLogRecordFactory(factory)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        if self._previous is not None:
            logging.setLogRecordFactory(self._previous)
            self._previous = None

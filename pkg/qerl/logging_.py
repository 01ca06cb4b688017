import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, Optional, Union

from .errors import ValidationError

PACKAGE_LOGGER = "qerl"
RUN_LOG_FILE = "run.log"
LOG_FORMAT = "[qerl] %(levelname)-5s %(asctime)s %(filename)s:%(lineno)d | %(message)s"
LEVEL_NAMES: Dict[str, int] = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}

_console_level = logging.INFO


class QerlLogFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        return record.name == PACKAGE_LOGGER or record.name.startswith(PACKAGE_LOGGER + ".")


class TqdmLoggingHandler(logging.Handler):
    """Writes records through tqdm so that an active training bar is not broken."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            msg = self.format(record)
            try:
                import tqdm
            except ImportError:
                print(msg, file=sys.stdout)
                return
            tqdm.tqdm.write(msg, file=sys.stdout)
        except Exception:
            self.handleError(record)


def parse_level(level: Union[int, str]) -> int:
    """Accepts a logging constant or one of debug/info/warning/error (any case)."""
    if isinstance(level, int) and not isinstance(level, bool):
        return level
    name = str(level).strip().lower()
    if name not in LEVEL_NAMES:
        raise ValidationError(
            f"Unknown log level '{level}', expected one of {', '.join(LEVEL_NAMES)}",
            key="log_level",
            module="cli",
        )
    return LEVEL_NAMES[name]


def _console_handler() -> logging.Handler:
    handler: logging.Handler = TqdmLoggingHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.addFilter(QerlLogFilter())
    return handler


def setup_logging(level: Optional[Union[int, str]] = None) -> None:
    """Replaces the root handlers with one console handler that only passes package records."""
    global _console_level
    if level is not None:
        _console_level = parse_level(level)
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(_console_level)
    handler = _console_handler()
    handler.setLevel(_console_level)
    root.addHandler(handler)


def set_log_level(level: Union[int, str]) -> None:
    global _console_level
    _console_level = parse_level(level)
    root = logging.getLogger()
    root.setLevel(_console_level)
    for handler in root.handlers:
        if not isinstance(handler, logging.FileHandler):
            handler.setLevel(_console_level)


@contextmanager
def run_log(directory: Union[str, Path], filename: str = RUN_LOG_FILE) -> Iterator[Path]:
    """Mirrors package records into `directory/filename` for the duration of the block.

    The file is appended to, so a resumed run keeps one log.
    """
    path = Path(directory) / filename
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="a", encoding="utf8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.addFilter(QerlLogFilter())
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield path
    finally:
        root.removeHandler(handler)
        handler.close()


__all__ = [
    "PACKAGE_LOGGER",
    "RUN_LOG_FILE",
    "LOG_FORMAT",
    "LEVEL_NAMES",
    "QerlLogFilter",
    "TqdmLoggingHandler",
    "parse_level",
    "setup_logging",
    "set_log_level",
    "run_log",
]

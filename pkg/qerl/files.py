import csv
import io
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Sequence, Tuple, Union

from danielutils import file_exists

from .errors import IOFailure, ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _format_cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_text_atomic(path: PathLike, text: str) -> None:
    """Writes to a sibling temporary file and renames it over `path`."""
    target = Path(path)
    tmp = target.with_name(target.name + ".tmp")
    logger.debug("Writing %d characters to %s", len(text), target)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf8", newline="") as f:
            f.write(text)
        os.replace(tmp, target)
    except OSError as e:
        logger.error("Failed writing %s: %s", target, e)
        raise IOFailure(f"Cannot write '{target}': {e}", module="files") from e


def dump_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def write_json_atomic(path: PathLike, data: Any) -> None:
    write_text_atomic(path, dump_json(data))


def read_text(path: PathLike, module: str = "files") -> str:
    if not file_exists(str(path)):
        logger.error("File not found: %s", path)
        raise IOFailure(f"File not found: '{path}'", module=module)
    try:
        with open(path, "r", encoding="utf8") as f:
            return f.read()
    except OSError as e:
        raise IOFailure(f"Cannot read '{path}': {e}", module=module) from e


def read_json(path: PathLike, module: str = "files") -> Any:
    text = read_text(path, module)
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        logger.error("Invalid JSON in %s at line %d: %s", path, e.lineno, e.msg)
        raise ParseError(
            f"Invalid JSON in '{path}' at line {e.lineno}: {e.msg}", line=e.lineno, module=module
        ) from e


def csv_text(columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_cell(row[c]) for c in columns])
    return buffer.getvalue()


def write_csv(path: PathLike, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> None:
    write_text_atomic(path, csv_text(columns, rows))


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    return list(csv.DictReader(io.StringIO(read_text(path))))


def iter_lines(path: PathLike, module: str = "files") -> Iterator[Tuple[int, str]]:
    """Non-blank lines with 1-based line numbers."""
    for number, line in enumerate(read_text(path, module).splitlines(), start=1):
        if line.strip():
            yield number, line


def write_jsonl(path: PathLike, objects: Iterable[Any]) -> None:
    write_text_atomic(path, "".join(json.dumps(o, sort_keys=True) + "\n" for o in objects))


class JsonlAppender:
    """Line-oriented append log. `truncate(n)` rewinds to the first n lines."""

    def __init__(self, path: PathLike) -> None:
        self.path = Path(path)
        self.lines_written = 0

    def reset(self) -> None:
        write_text_atomic(self.path, "")
        self.lines_written = 0

    def append(self, objects: Iterable[Any]) -> None:
        chunk = [json.dumps(o, sort_keys=True) + "\n" for o in objects]
        if not chunk:
            return
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf8", newline="") as f:
                f.writelines(chunk)
        except OSError as e:
            logger.error("Failed appending to %s: %s", self.path, e)
            raise IOFailure(f"Cannot append to '{self.path}': {e}", module="files") from e
        self.lines_written += len(chunk)

    def truncate(self, n_lines: int) -> None:
        kept: List[str] = []
        if file_exists(str(self.path)):
            kept = read_text(self.path).splitlines(keepends=True)[:n_lines]
        write_text_atomic(self.path, "".join(kept))
        self.lines_written = len(kept)


__all__ = [
    "write_text_atomic",
    "dump_json",
    "write_json_atomic",
    "read_text",
    "read_json",
    "csv_text",
    "write_csv",
    "read_csv",
    "iter_lines",
    "write_jsonl",
    "JsonlAppender",
]

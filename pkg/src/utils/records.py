"""JSON Lines reading and writing shared by every file-based command."""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Tuple, Union

from .async_helpers import write_file_async
from .errors import RecordFormatError

PathLike = Union[str, Path]


def iter_jsonl(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield ``(line_no, record)`` for every non-blank line of a JSON Lines file.

    Raises:
        RecordFormatError: If the file is missing, or a line is not UTF-8 or not a JSON object.
    """
    path = Path(path)
    if not path.exists():
        raise RecordFormatError(f"Input file not found: {path}")

    with open(path, 'rb') as handle:
        for line_no, raw in enumerate(handle, start=1):
            try:
                line = raw.decode('utf-8')
            except UnicodeDecodeError as e:
                raise RecordFormatError(f"invalid UTF-8 at byte {e.start}", str(path), line_no)
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordFormatError(f"invalid JSON ({e.msg})", str(path), line_no)
            if not isinstance(record, dict):
                raise RecordFormatError("record must be a JSON object", str(path), line_no)
            yield line_no, record


def dumps_jsonl(records: Iterable[Dict[str, Any]]) -> bytes:
    """Serialize records canonically: sorted keys, one object per line."""
    lines = [json.dumps(record, sort_keys=True, ensure_ascii=False) for record in records]
    return ''.join(f"{line}\n" for line in lines).encode('utf-8')


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_jsonl(records))


async def write_jsonl_async(path: PathLike, records: Iterable[Dict[str, Any]]) -> None:
    await write_file_async(path, dumps_jsonl(records))

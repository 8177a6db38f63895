"""
JSON-lines reading and writing.

Serialization is deterministic (sorted keys, fixed separators, UTF-8) so
identical records always produce identical bytes. A path of None or '-'
means stdin/stdout.
"""
import json
import sys
from contextlib import contextmanager
from typing import Any, Dict, Iterable, Iterator, List, Optional

from exceptions import UserInputError


def dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(',', ':'))


@contextmanager
def _open_text(path: Optional[str], mode: str):
    if path is None or str(path) == '-':
        stream = sys.stdin if 'r' in mode else sys.stdout
        yield stream
        if 'w' in mode:
            stream.flush()
        return
    with open(path, mode, encoding='utf-8', newline='\n') as handle:
        yield handle


def iter_jsonl(path: Optional[str]) -> Iterator[Dict[str, Any]]:
    """Yield one dict per non-blank line."""
    with _open_text(path, 'r') as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise UserInputError(f"{path or '<stdin>'}:{line_number}: invalid JSON ({e.msg})") from e


def read_jsonl(path: Optional[str]) -> List[Dict[str, Any]]:
    return list(iter_jsonl(path))


def write_jsonl(records: Iterable[Dict[str, Any]], path: Optional[str]) -> int:
    """Write records, one per line; returns the number written."""
    count = 0
    with _open_text(path, 'w') as handle:
        for record in records:
            handle.write(dumps(record))
            handle.write('\n')
            count += 1
    return count

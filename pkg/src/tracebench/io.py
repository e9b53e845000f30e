"""Line-oriented file helpers. ``-`` means stdin/stdout throughout."""

from __future__ import annotations

import contextlib
import csv
import json
import os
import sys
from typing import Any, Callable, Iterable, Iterator, TextIO, TypeVar

from .errors import MalformedInputLine, TraceBenchError

T = TypeVar("T")

PathLike = str | os.PathLike

# A JSONL artifact may open with one ``{"_meta": {...}}`` line carrying the
# producing tool, version and resolved config. Readers skip it.
META_KEY = "_meta"


def _name(path: PathLike) -> str:
    return "<stdin>" if str(path) == "-" else str(path)


@contextlib.contextmanager
def open_text(path: PathLike, mode: str = "r") -> Iterator[TextIO]:
    if str(path) == "-":
        yield sys.stdin if "r" in mode else sys.stdout
        return
    try:
        fh = open(path, mode, encoding="utf-8", newline="" if "w" in mode else None)
    except OSError as exc:
        raise TraceBenchError(f"{path}: {exc.strerror or exc}") from None
    with fh:
        yield fh


def iter_jsonl(
    path: PathLike,
    decode: Callable[[dict], T] | None = None,
    meta: dict | None = None,
) -> Iterator[tuple[int, T]]:
    """Yield ``(line_no, record)`` for each non-blank line.

    ``decode`` turns the parsed object into a domain record; any exception it
    raises is re-raised as :class:`MalformedInputLine` naming path and line.
    A leading meta line is skipped, and copied into ``meta`` when given.
    """
    first = True
    with open_text(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedInputLine(_name(path), line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MalformedInputLine(_name(path), line_no, "expected a JSON object")
            if first:
                first = False
                if len(obj) == 1 and META_KEY in obj:
                    if meta is not None and isinstance(obj[META_KEY], dict):
                        meta.update(obj[META_KEY])
                    continue
            if decode is None:
                yield line_no, obj  # type: ignore[misc]
                continue
            try:
                rec = decode(obj)
            except (KeyError, TypeError, ValueError) as exc:
                reason = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
                raise MalformedInputLine(_name(path), line_no, reason) from None
            yield line_no, rec


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path: PathLike, records: Iterable[dict], meta: dict | None = None) -> int:
    """Write one JSON object per line; returns the record count (meta excluded)."""
    n = 0
    with open_text(path, "w") as fh:
        if meta is not None:
            fh.write(dumps({META_KEY: meta}))
            fh.write("\n")
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")
            n += 1
    return n


def write_json(path: PathLike, obj: Any) -> None:
    with open_text(path, "w") as fh:
        json.dump(obj, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def read_split_csv(path: PathLike) -> dict[str, str]:
    """Read a ``patient_id,split`` CSV. A header row with those names is optional."""
    from .corpus import SPLITS

    out: dict[str, str] = {}
    with open_text(path) as fh:
        for line_no, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if line_no == 1 and [c.strip() for c in row] == ["patient_id", "split"]:
                continue
            if len(row) != 2:
                raise MalformedInputLine(_name(path), line_no, "expected 'patient_id,split'")
            pid, split = row[0].strip(), row[1].strip().lower()
            if split not in SPLITS:
                raise MalformedInputLine(_name(path), line_no, f"unknown split {split!r}")
            if pid in out and out[pid] != split:
                raise MalformedInputLine(_name(path), line_no, f"patient {pid!r} assigned twice")
            out[pid] = split
    return out


def write_split_csv(path: PathLike, assignment: dict[str, str]) -> None:
    with open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "split"])
        for pid, split in assignment.items():
            w.writerow([pid, split])

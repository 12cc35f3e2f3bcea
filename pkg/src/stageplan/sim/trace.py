"""Trace events and their CSV / JSON serializations."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

COLUMNS = ("time_us", "worker", "kind", "node", "start", "end", "detail")


class Kind(str, Enum):
    LOAD = "LOAD"
    TRAIN = "TRAIN"
    SAVE = "SAVE"
    EVAL = "EVAL"
    IDLE = "IDLE"
    ASSIGN = "ASSIGN"


BUSY_KINDS = frozenset({Kind.LOAD, Kind.TRAIN, Kind.SAVE, Kind.EVAL})


@dataclass(frozen=True)
class TraceEvent:
    """One row of the trace.  Busy rows carry their duration in ``duration_us``."""

    time_us: int
    worker: int
    kind: Kind
    node: int | None = None
    start: int | None = None
    end: int | None = None
    duration_us: int = 0
    note: str = ""

    @property
    def detail(self) -> str:
        parts = []
        if self.kind in BUSY_KINDS:
            parts.append(f"dur_us={self.duration_us}")
        if self.note:
            parts.append(self.note)
        return ";".join(parts)

    def row(self) -> list[Any]:
        blank = lambda v: "" if v is None else v  # noqa: E731
        return [self.time_us, self.worker, self.kind.value, blank(self.node), blank(self.start), blank(self.end), self.detail]


def trace_csv(events: Iterable[TraceEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for e in events:
        w.writerow(e.row())
    return buf.getvalue()


def write_trace(path: str | Path, events: Iterable[TraceEvent]) -> None:
    Path(path).write_text(trace_csv(events))


def read_trace(path: str | Path) -> list[TraceEvent]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(COLUMNS)}")
        for row in reader:
            dur = 0
            notes = []
            for part in filter(None, row["detail"].split(";")):
                if part.startswith("dur_us="):
                    dur = int(part[7:])
                else:
                    notes.append(part)
            num = lambda v: int(v) if v != "" else None  # noqa: E731
            out.append(
                TraceEvent(
                    int(row["time_us"]),
                    int(row["worker"]),
                    Kind(row["kind"]),
                    num(row["node"]),
                    num(row["start"]),
                    num(row["end"]),
                    dur,
                    ";".join(notes),
                )
            )
    return out


def busy_us(events: Iterable[TraceEvent]) -> int:
    return sum(e.duration_us for e in events if e.kind in BUSY_KINDS)


def dumps_summary(summary: dict[str, Any]) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"

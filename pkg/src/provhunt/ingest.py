"""Audit event parsing and provenance graph construction.

The canonical event format is line-delimited JSON, one event per line,
with exactly these fields (extra fields are ignored):

    ts        integer nanoseconds since epoch, >= 0
    src_id    opaque entity id
    src_type  process | file | socket
    src_name  process name / file path / "ip:port"
    op        event type string (open, read, write, execute, connect, ...)
    dst_id    opaque entity id
    dst_type  process | file | socket
    dst_name  as src_name

Dataset-specific formats (CDM and friends) are converted upstream.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import EventParseError, EventValidationError
from .graph import NODE_TYPES, EdgeRecord, NodeRecord, ProvenanceGraph

REQUIRED_FIELDS = (
    "ts",
    "src_id",
    "src_type",
    "src_name",
    "op",
    "dst_id",
    "dst_type",
    "dst_name",
)


@dataclass(frozen=True)
class Event:
    ts: int
    src_id: str
    src_type: str
    src_name: str
    op: str
    dst_id: str
    dst_type: str
    dst_name: str


@dataclass(frozen=True)
class ParseIssue:
    line_no: int
    message: str


def parse_event_line(line: str, line_no: int | None = None) -> Event:
    """Parse one canonical event record.

    Raises EventParseError on malformed records (naming the missing field)
    and EventValidationError when a field violates an event invariant.
    """
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise EventParseError(f"not valid JSON: {exc.msg}", line_no=line_no) from exc
    if not isinstance(raw, dict):
        raise EventParseError("record is not an object", line_no=line_no)
    for field in REQUIRED_FIELDS:
        if field not in raw:
            raise EventParseError("missing", line_no=line_no, field=field)

    try:
        ts = int(raw["ts"])
    except (TypeError, ValueError):
        raise EventParseError("not an integer", line_no=line_no, field="ts") from None
    if ts < 0:
        raise EventValidationError("negative timestamp", line_no=line_no, field="ts")

    ev = Event(
        ts=ts,
        src_id=str(raw["src_id"]),
        src_type=str(raw["src_type"]),
        src_name=str(raw["src_name"]),
        op=str(raw["op"]),
        dst_id=str(raw["dst_id"]),
        dst_type=str(raw["dst_type"]),
        dst_name=str(raw["dst_name"]),
    )
    for field in ("src_type", "dst_type"):
        value = getattr(ev, field)
        if value not in NODE_TYPES:
            raise EventValidationError(
                f"unknown entity type {value!r}", line_no=line_no, field=field
            )
    if ev.src_id == ev.dst_id and ev.src_type == ev.dst_type:
        # Self-loops only make sense for self-referential process events (exec).
        if ev.src_type != "process":
            raise EventValidationError(
                "self-referential event on non-process entity",
                line_no=line_no,
                field="dst_id",
            )
    return ev


def parse_events(
    path: str, lenient: bool = False
) -> tuple[list[Event], list[ParseIssue]]:
    """Parse an event file (optionally gzipped).

    Strict mode raises on the first bad line. Lenient mode skips bad lines
    and reports them as ParseIssue entries.
    """
    events: list[Event] = []
    issues: list[ParseIssue] = []
    for line_no, line in enumerate(_open_lines(path), start=1):
        if not line.strip():
            continue
        try:
            events.append(parse_event_line(line, line_no=line_no))
        except EventParseError as exc:
            if not lenient:
                raise
            issues.append(ParseIssue(line_no=line_no, message=str(exc)))
    return events, issues


def _open_lines(path: str) -> Iterator[str]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as f:
        yield from f


def build_graph(events: Iterable[Event]) -> ProvenanceGraph:
    """Build a provenance graph: one node per distinct (type, id), one edge per event.

    Permutation-invariant: the node name chosen for a key is the one attached
    to its earliest event (ties broken by lexicographically smallest name), so
    any ordering of the same event multiset yields an identical graph.
    """
    # key -> (ts, name) best candidate
    best_name: dict[tuple[str, str], tuple[int, str]] = {}
    edges: list[EdgeRecord] = []
    for ev in events:
        src_key = (ev.src_type, ev.src_id)
        dst_key = (ev.dst_type, ev.dst_id)
        for key, name in ((src_key, ev.src_name), (dst_key, ev.dst_name)):
            cand = (ev.ts, name)
            cur = best_name.get(key)
            if cur is None or cand < cur:
                best_name[key] = cand
        edges.append(EdgeRecord(src_key, dst_key, ev.op, ev.ts))
    nodes = {
        key: NodeRecord(key[0], key[1], name) for key, (_, name) in best_name.items()
    }
    g = ProvenanceGraph(nodes, edges)
    g.sort_edges()
    return g


def graph_to_events(g: ProvenanceGraph) -> list[Event]:
    """Serialize a graph back to canonical events (one per edge, in edge order)."""
    out = []
    for e in g.edges:
        src = g.nodes[e.src_key]
        dst = g.nodes[e.dst_key]
        out.append(
            Event(
                ts=e.ts,
                src_id=src.id,
                src_type=src.type,
                src_name=src.name,
                op=e.op,
                dst_id=dst.id,
                dst_type=dst.type,
                dst_name=dst.name,
            )
        )
    return out


def write_events(path: str, events: Iterable[Event]) -> None:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8") as f:
        for ev in events:
            f.write(
                json.dumps(
                    {
                        "ts": ev.ts,
                        "src_id": ev.src_id,
                        "src_type": ev.src_type,
                        "src_name": ev.src_name,
                        "op": ev.op,
                        "dst_id": ev.dst_id,
                        "dst_type": ev.dst_type,
                        "dst_name": ev.dst_name,
                    }
                )
                + "\n"
            )

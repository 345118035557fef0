"""Provenance graph data model and snapshot persistence.

A provenance graph is a timestamped directed multigraph over process, file
and socket nodes. Node identity is the (type, id) pair; the human-readable
name (process name, file path, "ip:port") is an attribute. Edges are kept
in a canonical order: ascending timestamp, ties broken by
(src_name, op, dst_name).
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass
from typing import Iterable

from .errors import FormatError

NODE_TYPES = ("process", "file", "socket")

SNAPSHOT_MAGIC = "PROVG1"

NodeKey = tuple[str, str]


@dataclass(frozen=True)
class NodeRecord:
    type: str
    id: str
    name: str

    @property
    def key(self) -> NodeKey:
        return (self.type, self.id)


@dataclass(frozen=True)
class EdgeRecord:
    src_key: NodeKey
    dst_key: NodeKey
    op: str
    ts: int


class ProvenanceGraph:
    """Immutable-by-convention container for nodes and canonically sorted edges."""

    def __init__(self, nodes: dict[NodeKey, NodeRecord], edges: list[EdgeRecord]):
        self.nodes = nodes
        self.edges = edges

    # -- construction ------------------------------------------------------

    @classmethod
    def from_records(
        cls,
        nodes: Iterable[NodeRecord],
        edges: Iterable[EdgeRecord],
        presorted: bool = False,
    ) -> "ProvenanceGraph":
        node_map = {n.key: n for n in nodes}
        edge_list = list(edges)
        g = cls(node_map, edge_list)
        if not presorted:
            g.sort_edges()
        g.validate()
        return g

    def sort_edges(self) -> None:
        """Sort edges by (ts, src_name, op, dst_name)."""
        names = {k: n.name for k, n in self.nodes.items()}
        self.edges.sort(
            key=lambda e: (e.ts, names[e.src_key], e.op, names[e.dst_key])
        )

    def validate(self) -> None:
        for e in self.edges:
            if e.src_key not in self.nodes:
                raise FormatError(f"edge references missing node {e.src_key}")
            if e.dst_key not in self.nodes:
                raise FormatError(f"edge references missing node {e.dst_key}")
            if e.ts < 0:
                raise FormatError(f"negative edge timestamp {e.ts}")

    # -- views -------------------------------------------------------------

    def name_of(self, key: NodeKey) -> str:
        return self.nodes[key].name

    def degree_counts(self) -> dict[NodeKey, int]:
        deg = {k: 0 for k in self.nodes}
        for e in self.edges:
            deg[e.src_key] += 1
            deg[e.dst_key] += 1
        return deg

    def undirected_adjacency(self) -> dict[NodeKey, set[NodeKey]]:
        adj: dict[NodeKey, set[NodeKey]] = {k: set() for k in self.nodes}
        for e in self.edges:
            adj[e.src_key].add(e.dst_key)
            adj[e.dst_key].add(e.src_key)
        return adj

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProvenanceGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges

    def __repr__(self) -> str:
        return f"ProvenanceGraph(nodes={len(self.nodes)}, edges={len(self.edges)})"

    # -- persistence ---------------------------------------------------------
    #
    # Snapshot layout (line-delimited UTF-8, optionally gzip by .gz suffix):
    #   line 1:  PROVG1
    #   line 2:  {"nodes": N, "edges": M}
    #   N lines: {"t": type, "id": id, "name": name}       sorted by (type, id)
    #   M lines: {"s": [t,id], "d": [t,id], "op": op, "ts": ts}   in edge order

    def save(self, path: str) -> None:
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wt", encoding="utf-8") as f:
            f.write(SNAPSHOT_MAGIC + "\n")
            f.write(json.dumps({"nodes": len(self.nodes), "edges": len(self.edges)}) + "\n")
            for key in sorted(self.nodes):
                n = self.nodes[key]
                f.write(json.dumps({"t": n.type, "id": n.id, "name": n.name}) + "\n")
            for e in self.edges:
                f.write(
                    json.dumps(
                        {
                            "s": list(e.src_key),
                            "d": list(e.dst_key),
                            "op": e.op,
                            "ts": e.ts,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str) -> "ProvenanceGraph":
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "rt", encoding="utf-8") as f:
            return cls._read_snapshot(f, path)

    @classmethod
    def _read_snapshot(cls, f: io.TextIOBase, path: str) -> "ProvenanceGraph":
        magic = f.readline().rstrip("\n")
        if magic != SNAPSHOT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {SNAPSHOT_MAGIC!r}")
        try:
            header = json.loads(f.readline())
            n_nodes, n_edges = int(header["nodes"]), int(header["edges"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad snapshot header: {exc}") from exc
        nodes: dict[NodeKey, NodeRecord] = {}
        for i in range(n_nodes):
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: truncated node table at row {i}")
            rec = json.loads(line)
            node = NodeRecord(rec["t"], rec["id"], rec["name"])
            nodes[node.key] = node
        edges: list[EdgeRecord] = []
        for i in range(n_edges):
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: truncated edge table at row {i}")
            rec = json.loads(line)
            edges.append(
                EdgeRecord(tuple(rec["s"]), tuple(rec["d"]), rec["op"], int(rec["ts"]))
            )
        g = cls(nodes, edges)
        g.validate()
        return g

"""Attack scenario reconstruction.

Flagged behavior subgraphs are stitched into one attack graph: subgraphs are
anchored by virtual nodes at their earliest edge time, sorted, and connected
by time-respecting shortest paths over the full reduced graph (undirected
traversal, edge timestamps non-decreasing and bounded below by the earlier
subgraph's start). Hop count is minimized first, then final timestamp. The
output graph never contains virtual nodes.
"""

from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field

from .graph import NodeKey, NodeRecord, ProvenanceGraph
from .partition import BehaviorSubgraph

log = logging.getLogger(__name__)

ORIGIN_SUBGRAPH = "attack-subgraph"
ORIGIN_PATH = "connecting-path"


@dataclass
class VirtualSubgraph:
    base: BehaviorSubgraph
    virtual_key: NodeKey
    t: int


def virtualize(sub: BehaviorSubgraph) -> VirtualSubgraph:
    """Anchor a subgraph with a synthetic node fanning out to all its nodes.

    The virtual node is bookkeeping only; path searches run between the base
    node sets, so the underlying graph is never mutated.
    """
    if not sub.edge_indices:
        raise ValueError("cannot virtualize an empty subgraph")
    return VirtualSubgraph(
        base=sub, virtual_key=("virtual", f"v{sub.id}"), t=sub.t_start
    )


@dataclass
class AttackEdge:
    src_key: NodeKey
    dst_key: NodeKey
    op: str
    ts: int
    origin: str  # attack-subgraph | connecting-path


@dataclass
class ConnectingPath:
    from_subgraph: int
    to_subgraph: int
    edge_indices: list[int]  # indices into the full graph's edge list


@dataclass
class AttackGraph:
    nodes: dict[NodeKey, NodeRecord] = field(default_factory=dict)
    edges: list[AttackEdge] = field(default_factory=list)
    ttp_annotations: dict[int, str] = field(default_factory=dict)
    paths: list[ConnectingPath] = field(default_factory=list)
    subgraph_nodes: dict[int, frozenset[NodeKey]] = field(default_factory=dict)


class _TemporalIncidence:
    """Per-node incident edges sorted by timestamp, for bisecting t >= floor."""

    def __init__(self, g: ProvenanceGraph):
        self.g = g
        self.incident: dict[NodeKey, list[tuple[int, int, NodeKey]]] = {}
        for idx, e in enumerate(g.edges):
            self.incident.setdefault(e.src_key, []).append((e.ts, idx, e.dst_key))
            if e.dst_key != e.src_key:
                self.incident.setdefault(e.dst_key, []).append((e.ts, idx, e.src_key))
        for lst in self.incident.values():
            lst.sort()
        self.ts_lists = {k: [t for t, _, _ in lst] for k, lst in self.incident.items()}


def time_respecting_shortest_path(
    g: ProvenanceGraph,
    from_nodes: frozenset[NodeKey] | set[NodeKey],
    to_nodes: frozenset[NodeKey] | set[NodeKey],
    t_floor: int,
    incidence: _TemporalIncidence | None = None,
) -> list[int] | None:
    """Minimum-hop undirected path whose edge timestamps are >= t_floor and
    non-decreasing; among equal-hop paths the one with the smallest final
    timestamp wins. Returns edge indices, [] when the node sets overlap, or
    None when no such path exists.
    """
    if not from_nodes or not to_nodes:
        raise ValueError("from_nodes and to_nodes must be nonempty")
    if from_nodes & to_nodes:
        return []
    inc = incidence or _TemporalIncidence(g)

    # Layered search. Per node keep the smallest arrival timestamp seen at any
    # layer so far: a smaller timestamp at fewer-or-equal hops dominates, since
    # it permits every continuation the larger one does. Parents are recorded
    # per layer so reconstruction cannot mix chains from different depths.
    best: dict[NodeKey, int] = {k: t_floor for k in from_nodes}
    frontier: dict[NodeKey, int] = dict(best)
    parent_layers: list[dict[NodeKey, tuple[NodeKey, int]]] = []

    while frontier:
        next_frontier: dict[NodeKey, int] = {}
        next_parents: dict[NodeKey, tuple[NodeKey, int]] = {}
        for node in sorted(frontier):
            arrival = frontier[node]
            edges = inc.incident.get(node)
            if not edges:
                continue
            pos = bisect.bisect_left(inc.ts_lists[node], arrival)
            for ts, idx, other in edges[pos:]:
                known = best.get(other)
                if known is not None and known <= ts:
                    continue
                pending = next_frontier.get(other)
                if pending is not None and pending <= ts:
                    continue
                next_frontier[other] = ts
                next_parents[other] = (node, idx)
        if not next_frontier:
            return None
        parent_layers.append(next_parents)
        hits = [n for n in next_frontier if n in to_nodes]
        if hits:
            target = min(hits, key=lambda n: (next_frontier[n], n))
            path: list[int] = []
            node = target
            layer = len(parent_layers) - 1
            while node not in from_nodes:
                prev, idx = parent_layers[layer][node]
                path.append(idx)
                node = prev
                layer -= 1
            path.reverse()
            return path
        for node, ts in next_frontier.items():
            cur = best.get(node)
            if cur is None or ts < cur:
                best[node] = ts
        frontier = next_frontier
    return None


def reconstruct(
    attack_subs: list[BehaviorSubgraph],
    g: ProvenanceGraph,
    labels: dict[int, str] | None = None,
) -> AttackGraph:
    """Union all attack subgraphs with connecting paths between them.

    Subgraphs are processed in ascending start-time order; each one scans its
    predecessors nearest-in-time-first for a time-respecting path (floor = the
    predecessor's start time). Subgraphs with no reachable predecessor stay as
    separate components with a warning.
    """
    if not attack_subs:
        raise ValueError("need at least one attack subgraph")
    labels = labels or {}
    anchors = sorted((virtualize(s) for s in attack_subs), key=lambda a: (a.t, a.base.id))
    inc = _TemporalIncidence(g)

    ag = AttackGraph()
    edge_origin: dict[int, str] = {}
    for anchor in anchors:
        sub = anchor.base
        ag.subgraph_nodes[sub.id] = sub.node_keys
        if sub.id in labels:
            ag.ttp_annotations[sub.id] = labels[sub.id]
        for key in sub.node_keys:
            ag.nodes.setdefault(key, g.nodes[key])
        for idx in sub.edge_indices:
            edge_origin[idx] = ORIGIN_SUBGRAPH

    for i in range(1, len(anchors)):
        current = anchors[i]
        connected = False
        for j in range(i - 1, -1, -1):
            prev = anchors[j]
            path = time_respecting_shortest_path(
                g,
                prev.base.node_keys,
                current.base.node_keys,
                t_floor=prev.t,
                incidence=inc,
            )
            if path is not None:
                ag.paths.append(
                    ConnectingPath(
                        from_subgraph=prev.base.id,
                        to_subgraph=current.base.id,
                        edge_indices=path,
                    )
                )
                for idx in path:
                    edge_origin.setdefault(idx, ORIGIN_PATH)
                    e = g.edges[idx]
                    ag.nodes.setdefault(e.src_key, g.nodes[e.src_key])
                    ag.nodes.setdefault(e.dst_key, g.nodes[e.dst_key])
                connected = True
                break
        if not connected:
            log.warning(
                "attack subgraph %d has no time-respecting connection to any "
                "earlier subgraph; leaving it as a separate component",
                current.base.id,
            )

    for idx in sorted(edge_origin):
        e = g.edges[idx]
        ag.edges.append(AttackEdge(e.src_key, e.dst_key, e.op, e.ts, edge_origin[idx]))
    return ag


# ---------------------------------------------------------------------------
# export

_SHAPES = {"process": "box", "socket": "diamond", "file": "ellipse"}


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def _node_id(key: NodeKey) -> str:
    return f"{key[0]}:{key[1]}"


def export(ag: AttackGraph, format: str = "dot") -> str:
    """Render an attack graph as DOT (clustered by subgraph, shaped by node
    type, TTP labels on clusters) or as line-delimited JSON."""
    if format == "dot":
        return _export_dot(ag)
    if format == "jsonl":
        return _export_jsonl(ag)
    raise ValueError(f"unknown export format {format!r}")


def _export_dot(ag: AttackGraph) -> str:
    lines = ["digraph attack_scenario {"]
    assigned: set[NodeKey] = set()
    for sub_id in sorted(ag.subgraph_nodes):
        keys = sorted(k for k in ag.subgraph_nodes[sub_id] if k not in assigned)
        label = ag.ttp_annotations.get(sub_id, f"subgraph {sub_id}")
        lines.append(f'  subgraph cluster_sg{sub_id} {{')
        lines.append(f'    label="{_dot_escape(label)}";')
        for key in keys:
            node = ag.nodes[key]
            shape = _SHAPES.get(node.type, "ellipse")
            lines.append(
                f'    "{_dot_escape(_node_id(key))}" '
                f'[shape={shape}, label="{_dot_escape(node.name)}"];'
            )
            assigned.add(key)
        lines.append("  }")
    for key in sorted(ag.nodes):
        if key in assigned:
            continue
        node = ag.nodes[key]
        shape = _SHAPES.get(node.type, "ellipse")
        lines.append(
            f'  "{_dot_escape(_node_id(key))}" '
            f'[shape={shape}, label="{_dot_escape(node.name)}"];'
        )
    for e in ag.edges:
        style = ', style=dashed' if e.origin == ORIGIN_PATH else ""
        lines.append(
            f'  "{_dot_escape(_node_id(e.src_key))}" -> '
            f'"{_dot_escape(_node_id(e.dst_key))}" '
            f'[label="{_dot_escape(e.op)} @{e.ts}"{style}];'
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


def _export_jsonl(ag: AttackGraph) -> str:
    lines = []
    for key in sorted(ag.nodes):
        n = ag.nodes[key]
        lines.append(json.dumps({"kind": "node", "type": n.type, "id": n.id, "name": n.name}))
    for e in ag.edges:
        lines.append(
            json.dumps(
                {
                    "kind": "edge",
                    "src": list(e.src_key),
                    "dst": list(e.dst_key),
                    "op": e.op,
                    "ts": e.ts,
                    "origin": e.origin,
                }
            )
        )
    for sub_id in sorted(ag.ttp_annotations):
        lines.append(
            json.dumps(
                {"kind": "annotation", "subgraph_id": sub_id, "label": ag.ttp_annotations[sub_id]}
            )
        )
    for p in ag.paths:
        lines.append(
            json.dumps(
                {
                    "kind": "path",
                    "from_subgraph": p.from_subgraph,
                    "to_subgraph": p.to_subgraph,
                    "edge_indices": p.edge_indices,
                }
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


def parse_jsonl_export(text: str) -> AttackGraph:
    """Rebuild an AttackGraph from its jsonl export (round-trip helper)."""
    ag = AttackGraph()
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec["kind"]
        if kind == "node":
            node = NodeRecord(rec["type"], rec["id"], rec["name"])
            ag.nodes[node.key] = node
        elif kind == "edge":
            ag.edges.append(
                AttackEdge(
                    tuple(rec["src"]), tuple(rec["dst"]), rec["op"], rec["ts"], rec["origin"]
                )
            )
        elif kind == "annotation":
            ag.ttp_annotations[rec["subgraph_id"]] = rec["label"]
        elif kind == "path":
            ag.paths.append(
                ConnectingPath(rec["from_subgraph"], rec["to_subgraph"], rec["edge_indices"])
            )
    return ag

"""Split a provenance graph into system-behavior subgraphs and log sequences.

A behavior subgraph is a temporally dense run of events inside one dependency
component: DFS along edge direction groups nodes into components, then each
component's time-sorted edge list is cut wherever the gap between consecutive
events reaches theta_max. Each subgraph serializes to a log sequence of
(src_name, op, dst_name) triples.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import NodeKey, ProvenanceGraph

NS_PER_MIN = 60_000_000_000

DEFAULT_THETA_NS = 20 * NS_PER_MIN


@dataclass
class BehaviorSubgraph:
    id: int
    edge_indices: list[int]
    node_keys: frozenset[NodeKey]
    t_start: int
    t_end: int


@dataclass
class LogSequence:
    subgraph_id: int
    triples: list[tuple[str, str, str]]
    text: str


def dependency_components(g: ProvenanceGraph) -> list[list[int]]:
    """Edge-index sets of the graph's dependency components.

    Start nodes are visited in ascending (earliest incident edge ts, node key)
    order; each DFS follows edge direction and claims every node it first
    visits. A component's edge set is the edges whose source it claimed, so
    the sets are disjoint and together cover every edge. Components that end
    up with no edges (isolated sinks) are dropped.
    """
    earliest: dict[NodeKey, int] = {}
    succ: dict[NodeKey, list[NodeKey]] = {k: [] for k in g.nodes}
    out_edges: dict[NodeKey, list[int]] = {k: [] for k in g.nodes}
    for idx, e in enumerate(g.edges):
        for key in (e.src_key, e.dst_key):
            if key not in earliest or e.ts < earliest[key]:
                earliest[key] = e.ts
        succ[e.src_key].append(e.dst_key)
        out_edges[e.src_key].append(idx)

    for key in succ:
        succ[key] = sorted(set(succ[key]))

    starts = sorted(g.nodes, key=lambda k: (earliest.get(k, 0), k))
    visited: set[NodeKey] = set()
    components: list[list[int]] = []
    total = 0
    for start in starts:
        if start in visited:
            continue
        owned: list[NodeKey] = []
        stack = [start]
        visited.add(start)
        while stack:
            node = stack.pop()
            owned.append(node)
            for nxt in succ[node]:
                if nxt not in visited:
                    visited.add(nxt)
                    stack.append(nxt)
        indices: list[int] = []
        for node in owned:
            indices.extend(out_edges[node])
        if indices:
            indices.sort()  # global edge order is ts order
            components.append(indices)
            total += len(indices)
    assert total == len(g.edges), "components must cover every edge exactly once"
    return components


def split_by_time_density(
    g: ProvenanceGraph, edge_indices: list[int], theta_max_ns: int
) -> list[list[int]]:
    """Cut a ts-sorted edge run wherever the gap to the previous edge is
    >= theta_max; the trailing segment is emitted too."""
    if not edge_indices:
        return []
    segments: list[list[int]] = []
    start = 0
    for i in range(1, len(edge_indices)):
        gap = g.edges[edge_indices[i]].ts - g.edges[edge_indices[i - 1]].ts
        if gap >= theta_max_ns:
            segments.append(edge_indices[start:i])
            start = i
    segments.append(edge_indices[start:])
    return segments


def _make_subgraph(g: ProvenanceGraph, sub_id: int, indices: list[int]) -> BehaviorSubgraph:
    keys: set[NodeKey] = set()
    for idx in indices:
        e = g.edges[idx]
        keys.add(e.src_key)
        keys.add(e.dst_key)
    return BehaviorSubgraph(
        id=sub_id,
        edge_indices=indices,
        node_keys=frozenset(keys),
        t_start=g.edges[indices[0]].ts,
        t_end=g.edges[indices[-1]].ts,
    )


def partition(
    g: ProvenanceGraph, theta_max_ns: int = DEFAULT_THETA_NS
) -> list[BehaviorSubgraph]:
    """Dependency components split by time density. Deterministic: same graph
    and threshold always yield the same subgraph ids and contents."""
    if theta_max_ns <= 0:
        raise ValueError("theta_max_ns must be positive")
    subs: list[BehaviorSubgraph] = []
    for component in dependency_components(g):
        for segment in split_by_time_density(g, component, theta_max_ns):
            subs.append(_make_subgraph(g, len(subs), segment))
    return subs


def to_sequence(sub: BehaviorSubgraph, g: ProvenanceGraph) -> LogSequence:
    """Render a subgraph as its ordered behavior triples and their text form."""
    triples = []
    for idx in sub.edge_indices:
        e = g.edges[idx]
        triples.append((g.name_of(e.src_key), e.op, g.name_of(e.dst_key)))
    text = " ; ".join(f"{s} {op} {d}" for s, op, d in triples)
    return LogSequence(subgraph_id=sub.id, triples=triples, text=text)

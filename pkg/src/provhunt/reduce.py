"""Redundancy reduction for provenance graphs.

Three rules, applied in order by reduce_all:

1. merge_network_events  — bursts of communication from one process to one
   remote IP collapse into a single edge (op types joined by "_", ports
   joined into the socket name, earliest timestamp kept).
2. collapse_directory_cascades — accesses to a path that is a proper
   component-prefix of a deeper path accessed nearby in time are dropped.
3. merge_similar_files   — files under the same parent directory touched by
   the same source within a time window whose basenames are near-duplicates
   (normalized edit-distance similarity above a threshold) merge into one
   node, represented by the earliest-touched member.

Every rule only shrinks the graph and is idempotent.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

from .graph import EdgeRecord, NodeKey, NodeRecord, ProvenanceGraph

log = logging.getLogger(__name__)

NS_PER_SEC = 1_000_000_000


@dataclass
class ReduceConfig:
    net_window_ns: int = 1 * NS_PER_SEC
    cascade_window_ns: int = 5 * NS_PER_SEC
    file_window_ns: int = 5 * NS_PER_SEC
    sim_threshold: float = 0.7

    def validate(self) -> None:
        if self.net_window_ns <= 0 or self.cascade_window_ns <= 0 or self.file_window_ns <= 0:
            raise ValueError("reduction windows must be positive")
        if not 0.0 <= self.sim_threshold <= 1.0:
            raise ValueError("sim_threshold must be in [0, 1]")


@dataclass
class ReduceReport:
    """Before/after counts per rule plus non-fatal warnings."""

    rules: dict[str, dict[str, int]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def record(self, rule: str, before: ProvenanceGraph, after: ProvenanceGraph) -> None:
        self.rules[rule] = {
            "nodes_before": len(before.nodes),
            "edges_before": len(before.edges),
            "nodes_after": len(after.nodes),
            "edges_after": len(after.edges),
        }

    def warn(self, message: str) -> None:
        self.warnings.append(message)
        log.warning(message)


# ---------------------------------------------------------------------------
# string similarity

def levenshtein(a: str, b: str) -> int:
    """Edit distance, two-row dynamic programming."""
    n, m = len(a), len(b)
    if n > m:
        a, b, n, m = b, a, m, n
    if n == 0:
        return m
    current = list(range(n + 1))
    for i in range(1, m + 1):
        previous, current = current, [i] + [0] * n
        bi = b[i - 1]
        for j in range(1, n + 1):
            add = previous[j] + 1
            delete = current[j - 1] + 1
            change = previous[j - 1] + (a[j - 1] != bi)
            current[j] = min(add, delete, change)
    return current[n]


def name_similarity(a: str, b: str) -> float:
    """1 - lev(a, b) / max(|a|, |b|); 1.0 when both strings are empty."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


# ---------------------------------------------------------------------------
# rule 1: network merge

def _parse_ip_port(name: str) -> tuple[str, int] | None:
    ip, sep, port = name.rpartition(":")
    if not sep or not ip or not port.isdigit():
        return None
    return ip, int(port)


def merge_network_events(
    g: ProvenanceGraph, cfg: ReduceConfig, report: ReduceReport | None = None
) -> ProvenanceGraph:
    """Merge bursts of process->socket edges sharing a remote IP.

    Edges from one process to sockets of one IP are grouped by a rolling
    window (a group extends while the next edge is within net_window_ns of
    the group's first edge). Each multi-edge group becomes a single edge:
    op = distinct event types joined by "_" in first-occurrence order,
    socket name = "ip:port1_port2_..." (distinct ports ascending),
    ts = earliest in the group. The surviving socket node is the group's
    earliest-touched member, renamed.
    """
    cfg.validate()
    sock_addr: dict[NodeKey, tuple[str, int]] = {}
    already_merged = 0
    for key, node in g.nodes.items():
        if node.type != "socket":
            continue
        parsed = _parse_ip_port(node.name)
        if parsed is None:
            # Names like "ip:1_25" produced by an earlier pass land here too.
            if "_" in node.name.rpartition(":")[2]:
                already_merged += 1
            elif report is not None:
                report.warn(f"socket name not ip:port, left untouched: {node.name!r}")
            continue
        sock_addr[key] = parsed

    # (process key, ip) -> ordered edge indices (edge list is ts-sorted)
    groups: dict[tuple[NodeKey, str], list[int]] = {}
    for idx, e in enumerate(g.edges):
        if g.nodes[e.src_key].type != "process":
            continue
        addr = sock_addr.get(e.dst_key)
        if addr is None:
            continue
        groups.setdefault((e.src_key, addr[0]), []).append(idx)

    removed: set[int] = set()
    new_edges: list[EdgeRecord] = []
    renames: dict[NodeKey, str] = {}
    member_keys: set[NodeKey] = set()

    for proc_key, ip in sorted(groups):
        indices = groups[(proc_key, ip)]
        runs: list[list[int]] = []
        for idx in indices:
            ts = g.edges[idx].ts
            if runs and ts - g.edges[runs[-1][0]].ts <= cfg.net_window_ns:
                runs[-1].append(idx)
            else:
                runs.append([idx])
        for run in runs:
            if len(run) < 2:
                continue
            ops: list[str] = []
            ports: set[int] = set()
            for idx in run:
                e = g.edges[idx]
                if e.op not in ops:
                    ops.append(e.op)
                ports.add(sock_addr[e.dst_key][1])
                member_keys.add(e.dst_key)
            rep_key = g.edges[run[0]].dst_key
            merged_name = f"{ip}:" + "_".join(str(p) for p in sorted(ports))
            renames[rep_key] = merged_name
            removed.update(run)
            new_edges.append(
                EdgeRecord(proc_key, rep_key, "_".join(ops), g.edges[run[0]].ts)
            )

    if not new_edges:
        result = g
    else:
        edges = [e for i, e in enumerate(g.edges) if i not in removed]
        edges.extend(new_edges)
        referenced = {e.src_key for e in edges} | {e.dst_key for e in edges}
        nodes = {}
        for key, node in g.nodes.items():
            if key in member_keys and key not in referenced:
                continue  # orphaned by the merge
            if key in renames:
                node = NodeRecord(node.type, node.id, renames[key])
            nodes[key] = node
        result = ProvenanceGraph(nodes, edges)
        result.sort_edges()

    if report is not None:
        report.record("merge_network_events", g, result)
    return result


# ---------------------------------------------------------------------------
# rule 2: directory cascade collapse

def _path_components(name: str) -> tuple[str, ...]:
    return tuple(p for p in name.split("/") if p)


def collapse_directory_cascades(
    g: ProvenanceGraph, cfg: ReduceConfig, report: ReduceReport | None = None
) -> ProvenanceGraph:
    """Drop a process's access to path A when it also accessed a deeper path B
    (A a proper component-prefix of B) within cascade_window_ns. Only the
    deepest edges of each prefix chain survive; orphaned file nodes are removed.
    """
    cfg.validate()
    by_proc: dict[NodeKey, list[int]] = {}
    for idx, e in enumerate(g.edges):
        if g.nodes[e.src_key].type == "process" and g.nodes[e.dst_key].type == "file":
            by_proc.setdefault(e.src_key, []).append(idx)

    removed: set[int] = set()
    for proc_key in sorted(by_proc):
        indices = by_proc[proc_key]
        # path components -> sorted list of edge timestamps
        ts_by_path: dict[tuple[str, ...], list[int]] = {}
        for idx in indices:
            e = g.edges[idx]
            ts_by_path.setdefault(_path_components(g.nodes[e.dst_key].name), []).append(e.ts)
        ordered_paths = sorted(ts_by_path)
        for idx in indices:
            e = g.edges[idx]
            comps = _path_components(g.nodes[e.dst_key].name)
            # Extensions of `comps` sit right after it in lexicographic order.
            pos = bisect.bisect_right(ordered_paths, comps)
            for other in ordered_paths[pos:]:
                if other[: len(comps)] != comps:
                    break
                if any(
                    abs(t - e.ts) <= cfg.cascade_window_ns for t in ts_by_path[other]
                ):
                    removed.add(idx)
                    break

    if not removed:
        result = g
    else:
        edges = [e for i, e in enumerate(g.edges) if i not in removed]
        referenced = {e.src_key for e in edges} | {e.dst_key for e in edges}
        nodes = {
            k: n
            for k, n in g.nodes.items()
            if n.type != "file" or k in referenced
        }
        result = ProvenanceGraph(nodes, edges)
        result.sort_edges()

    if report is not None:
        report.record("collapse_directory_cascades", g, result)
    return result


# ---------------------------------------------------------------------------
# rule 3: similar-file merge

def _split_parent_base(name: str) -> tuple[str, str]:
    parent, sep, base = name.rpartition("/")
    if not sep:
        return "", name
    return parent, base


class _UnionFind:
    def __init__(self):
        self.parent: dict[NodeKey, NodeKey] = {}

    def find(self, x: NodeKey) -> NodeKey:
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: NodeKey, b: NodeKey) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic: smaller key becomes the root
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def merge_similar_files(
    g: ProvenanceGraph, cfg: ReduceConfig, report: ReduceReport | None = None
) -> ProvenanceGraph:
    """Merge near-duplicate sibling files (same source, same parent directory,
    first touched within file_window_ns, basename similarity > threshold).

    Clusters are the transitive closure of the pairwise relation; each cluster
    collapses onto its earliest-touched member. Runs to a fixpoint so a second
    application is always a no-op.
    """
    cfg.validate()
    before = g
    while True:
        nxt = _merge_similar_files_once(g, cfg)
        if nxt is g:
            break
        g = nxt
    if report is not None:
        report.record("merge_similar_files", before, g)
    return g


def _merge_similar_files_once(g: ProvenanceGraph, cfg: ReduceConfig) -> ProvenanceGraph:
    # first-touch ts of a file for a given source; and globally
    first_touch_global: dict[NodeKey, int] = {}
    per_source: dict[tuple[NodeKey, str], dict[NodeKey, int]] = {}
    for e in g.edges:
        if g.nodes[e.dst_key].type != "file":
            continue
        cur = first_touch_global.get(e.dst_key)
        if cur is None or e.ts < cur:
            first_touch_global[e.dst_key] = e.ts
        parent, _ = _split_parent_base(g.nodes[e.dst_key].name)
        group = per_source.setdefault((e.src_key, parent), {})
        prev = group.get(e.dst_key)
        if prev is None or e.ts < prev:
            group[e.dst_key] = e.ts

    uf = _UnionFind()
    sim_cache: dict[tuple[str, str], float] = {}
    merged_any = False
    for group_key in sorted(per_source):
        touch = per_source[group_key]
        if len(touch) < 2:
            continue
        members = sorted(touch)
        for i, a in enumerate(members):
            base_a = _split_parent_base(g.nodes[a].name)[1]
            for b in members[i + 1 :]:
                if abs(touch[a] - touch[b]) > cfg.file_window_ns:
                    continue
                base_b = _split_parent_base(g.nodes[b].name)[1]
                pair = (base_a, base_b) if base_a <= base_b else (base_b, base_a)
                sim = sim_cache.get(pair)
                if sim is None:
                    # cheap length bound before the DP
                    longest = max(len(base_a), len(base_b))
                    if longest and abs(len(base_a) - len(base_b)) / longest > 1 - cfg.sim_threshold:
                        sim = 0.0
                    else:
                        sim = name_similarity(base_a, base_b)
                    sim_cache[pair] = sim
                if sim > cfg.sim_threshold:
                    uf.union(a, b)
                    merged_any = True

    if not merged_any:
        return g

    clusters: dict[NodeKey, list[NodeKey]] = {}
    for key in uf.parent:
        clusters.setdefault(uf.find(key), []).append(key)

    remap: dict[NodeKey, NodeKey] = {}
    reps: set[NodeKey] = set()
    for members in clusters.values():
        if len(members) < 2:
            continue
        rep = min(
            members, key=lambda k: (first_touch_global[k], g.nodes[k].name, k)
        )
        reps.add(rep)
        for m in members:
            if m != rep:
                remap[m] = rep

    edges = [
        EdgeRecord(
            remap.get(e.src_key, e.src_key),
            remap.get(e.dst_key, e.dst_key),
            e.op,
            e.ts,
        )
        for e in g.edges
    ]
    # dedupe (src, op, dst) around merged nodes, keeping the earliest ts
    earliest: dict[tuple[NodeKey, str, NodeKey], int] = {}
    for e in edges:
        if e.src_key in reps or e.dst_key in reps:
            key = (e.src_key, e.op, e.dst_key)
            if key not in earliest or e.ts < earliest[key]:
                earliest[key] = e.ts
    deduped: list[EdgeRecord] = []
    emitted: set[tuple[NodeKey, str, NodeKey]] = set()
    for e in edges:
        if e.src_key in reps or e.dst_key in reps:
            key = (e.src_key, e.op, e.dst_key)
            if key in emitted:
                continue
            emitted.add(key)
            deduped.append(EdgeRecord(e.src_key, e.dst_key, e.op, earliest[key]))
        else:
            deduped.append(e)

    nodes = {k: n for k, n in g.nodes.items() if k not in remap}
    result = ProvenanceGraph(nodes, deduped)
    result.sort_edges()
    return result


# ---------------------------------------------------------------------------

def reduce_all(
    g: ProvenanceGraph, cfg: ReduceConfig, report: ReduceReport | None = None
) -> ProvenanceGraph:
    """Apply the three rules in order: network merge, cascade collapse, file merge."""
    g = merge_network_events(g, cfg, report)
    g = collapse_directory_cascades(g, cfg, report)
    g = merge_similar_files(g, cfg, report)
    return g

"""Node-level and graph-level detection metrics, plus 2-hop truth expansion."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Collection, Hashable, Iterable

from .graph import NodeKey, ProvenanceGraph


@dataclass
class MetricReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    accuracy: float
    fpr: float
    precision_defined: bool = True
    recall_defined: bool = True
    fpr_defined: bool = True

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "fpr": self.fpr,
            "precision_pct": format_pct(self.precision),
            "recall_pct": format_pct(self.recall),
            "accuracy_pct": format_pct(self.accuracy),
        }


def format_pct(fraction: float) -> str:
    """Render a fraction as a percentage with two decimals, e.g. '76.67'."""
    return f"{fraction * 100.0:.2f}"


def confusion(
    pred: Collection[Hashable], truth: Collection[Hashable], universe: Collection[Hashable]
) -> MetricReport:
    pred = set(pred)
    truth = set(truth)
    universe = set(universe)
    if not truth <= universe or not pred <= universe:
        raise ValueError("pred and truth must be subsets of the universe")
    tp = len(pred & truth)
    fp = len(pred - truth)
    fn = len(truth - pred)
    tn = len(universe) - tp - fp - fn

    def ratio(num: int, denom: int) -> tuple[float, bool]:
        if denom == 0:
            return 0.0, False
        return num / denom, True

    precision, p_ok = ratio(tp, tp + fp)
    recall, r_ok = ratio(tp, tp + fn)
    fpr, f_ok = ratio(fp, fp + tn)
    total = len(universe)
    accuracy = (tp + tn) / total if total else 0.0
    return MetricReport(
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        precision=precision,
        recall=recall,
        accuracy=accuracy,
        fpr=fpr,
        precision_defined=p_ok,
        recall_defined=r_ok,
        fpr_defined=f_ok,
    )


def node_metrics(
    pred_attack_nodes: Collection[NodeKey],
    truth_attack_nodes: Collection[NodeKey],
    all_nodes: Collection[NodeKey],
) -> MetricReport:
    return confusion(pred_attack_nodes, truth_attack_nodes, all_nodes)


def graph_metrics(
    pred_subgraph_ids: Collection[int],
    truth_subgraph_ids: Collection[int],
    all_ids: Collection[int],
) -> MetricReport:
    return confusion(pred_subgraph_ids, truth_subgraph_ids, all_ids)


def expand_2hop(truth_nodes: Iterable[NodeKey], g: ProvenanceGraph) -> set[NodeKey]:
    """Truth set plus every node within undirected distance 2 of it."""
    truth = set(truth_nodes)
    unknown = truth - set(g.nodes)
    if unknown:
        raise ValueError(f"truth nodes not in graph: {sorted(unknown)[:3]}")
    adj = g.undirected_adjacency()
    dist = {k: 0 for k in truth}
    queue = deque(truth)
    while queue:
        node = queue.popleft()
        if dist[node] == 2:
            continue
        for nxt in adj[node]:
            if nxt not in dist:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    return set(dist)


def write_report(path: str, reports: dict[str, MetricReport]) -> None:
    with open(path, "wt", encoding="utf-8") as f:
        for level in sorted(reports):
            rec = {"level": level}
            rec.update(reports[level].to_dict())
            f.write(json.dumps(rec) + "\n")

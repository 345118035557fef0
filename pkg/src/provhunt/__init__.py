"""provhunt: provenance-log threat hunting.

Pipeline: parse audit events into a provenance graph, reduce redundancy,
partition into behavior subgraphs, align log sequences with threat
intelligence in a shared embedding space, classify by semantic nearest
neighbor against a TTP-labeled query database, and reconstruct end-to-end
attack scenario graphs.
"""

from .graph import EdgeRecord, NodeRecord, ProvenanceGraph
from .ingest import Event, build_graph, graph_to_events, parse_event_line, parse_events
from .partition import BehaviorSubgraph, LogSequence, partition, to_sequence
from .reduce import ReduceConfig, name_similarity, reduce_all

__version__ = "0.1.0"

__all__ = [
    "BehaviorSubgraph",
    "EdgeRecord",
    "Event",
    "LogSequence",
    "NodeRecord",
    "ProvenanceGraph",
    "ReduceConfig",
    "build_graph",
    "graph_to_events",
    "name_similarity",
    "parse_event_line",
    "parse_events",
    "partition",
    "reduce_all",
    "to_sequence",
]

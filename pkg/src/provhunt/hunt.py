"""Semantic nearest-neighbor classification of log sequences.

Every query entry is embedded once into a brute-force index of unit vectors.
A sequence is classified by the label of the index row with the highest
cosine similarity (dot product over unit vectors); all non-benign labels are
attack verdicts. Ties break to the lowest row index.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .embed import EncoderParams, embed_corpus, embed_text
from .errors import FormatError, MissingBenignAnchorError
from .graph import ProvenanceGraph
from .intel import BENIGN_LABEL, QueryDB
from .partition import BehaviorSubgraph, LogSequence, partition, to_sequence
from .pemb import EmbeddingTable

log = logging.getLogger(__name__)

INDEX_MAGIC = "PIDX1"


@dataclass
class QueryIndex:
    vectors: np.ndarray  # (K, out_dim), unit rows
    labels: list[str]
    texts: list[str]

    def __post_init__(self):
        if self.vectors.shape[0] < 1:
            raise ValueError("index must hold at least one entry")
        if BENIGN_LABEL not in self.labels:
            raise MissingBenignAnchorError(
                "query index has no benign entry; add the benign anchor sentence"
            )


@dataclass
class Verdict:
    subgraph_id: int
    label: str
    score: float
    matched_text: str
    is_attack: bool


def build_index(
    db: QueryDB,
    params: EncoderParams | None = None,
    embeddings: EmbeddingTable | None = None,
) -> QueryIndex:
    """Embed the query database (or adopt externally computed embeddings whose
    ids are entry row numbers)."""
    if not db.entries:
        raise ValueError("query database is empty")
    if (params is None) == (embeddings is None):
        raise ValueError("provide exactly one of params or embeddings")
    if params is not None:
        table = embed_corpus([e.text for e in db.entries], "text", params)
        vectors = table.vectors
    else:
        if len(embeddings.ids) != len(db.entries):
            raise FormatError(
                f"embedding rows ({len(embeddings.ids)}) do not match query db "
                f"entries ({len(db.entries)})"
            )
        order = np.argsort([int(i) for i in embeddings.ids])
        vectors = embeddings.vectors.astype(np.float64)[order]
        norms = np.linalg.norm(vectors, axis=1)
        safe = np.where(norms == 0.0, 1.0, norms)
        vectors = vectors / safe[:, None]
    return QueryIndex(
        vectors=vectors,
        labels=[e.label for e in db.entries],
        texts=[e.text for e in db.entries],
    )


def classify_sequence(
    seq: LogSequence,
    index: QueryIndex,
    params: EncoderParams,
    min_score: float | None = None,
) -> Verdict:
    """Label of the nearest query vector by cosine similarity."""
    if not seq.text:
        log.warning("subgraph %d has an empty sequence; defaulting to benign", seq.subgraph_id)
        return Verdict(seq.subgraph_id, BENIGN_LABEL, 0.0, "", False)
    v = embed_text(seq.text, "log", params)
    scores = index.vectors @ v
    best = int(np.argmax(scores))  # first maximum wins ties
    label = index.labels[best]
    score = float(scores[best])
    if min_score is not None and label != BENIGN_LABEL and score < min_score:
        label = BENIGN_LABEL
    return Verdict(
        subgraph_id=seq.subgraph_id,
        label=label,
        score=score,
        matched_text=index.texts[best],
        is_attack=label != BENIGN_LABEL,
    )


def hunt(
    g: ProvenanceGraph,
    theta_max_ns: int,
    index: QueryIndex,
    params: EncoderParams,
    min_score: float | None = None,
) -> list[tuple[BehaviorSubgraph, Verdict]]:
    """Partition, serialize and classify every behavior subgraph of a reduced
    graph; results ordered by subgraph start time."""
    results = []
    for sub in partition(g, theta_max_ns):
        seq = to_sequence(sub, g)
        results.append((sub, classify_sequence(seq, index, params, min_score)))
    results.sort(key=lambda pair: (pair[0].t_start, pair[0].id))
    return results


# -- persistence --------------------------------------------------------------

def save_index(path: str, index: QueryIndex) -> None:
    with open(path, "wt", encoding="utf-8") as f:
        f.write(
            json.dumps(
                {
                    "magic": INDEX_MAGIC,
                    "dim": int(index.vectors.shape[1]),
                    "count": int(index.vectors.shape[0]),
                }
            )
            + "\n"
        )
        for row, label, text in zip(index.vectors, index.labels, index.texts):
            f.write(
                json.dumps({"label": label, "text": text, "vec": [float(x) for x in row]})
                + "\n"
            )


def load_index(path: str) -> QueryIndex:
    with open(path, "rt", encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("magic") != INDEX_MAGIC:
            raise FormatError(f"{path}: not a query index file")
        labels, texts, rows = [], [], []
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            labels.append(rec["label"])
            texts.append(rec["text"])
            rows.append(rec["vec"])
    if len(rows) != header["count"]:
        raise FormatError(f"{path}: row count mismatch")
    vectors = np.array(rows, dtype=np.float64)
    if vectors.shape[1] != header["dim"]:
        raise FormatError(f"{path}: dim mismatch")
    return QueryIndex(vectors=vectors, labels=labels, texts=texts)


def save_verdicts(path: str, results: list[tuple[BehaviorSubgraph, Verdict]]) -> None:
    with open(path, "wt", encoding="utf-8") as f:
        for sub, v in results:
            f.write(
                json.dumps(
                    {
                        "subgraph_id": v.subgraph_id,
                        "label": v.label,
                        "score": v.score,
                        "matched_text": v.matched_text,
                        "is_attack": v.is_attack,
                        "t_start": sub.t_start,
                        "t_end": sub.t_end,
                    }
                )
                + "\n"
            )


def load_verdicts(path: str) -> list[dict]:
    out = []
    with open(path, "rt", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out

"""Threat-intelligence query database, training pairs, and text augmentation.

The query database is line-delimited JSON: {"text": ..., "label": ...,
"source": ...}. Labels are either an ATT&CK technique id (T followed by four
digits) or the literal "benign". Benign log sequences always pair with the
canonical benign sentence.

Augmentation is a pluggable callback boundary: the engine never talks to a
language model itself. A replay file of precomputed paraphrases
({"original_text": ..., "paraphrases": [...]}) is the usual offline source.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import IntelCoverageError, QueryDBError

log = logging.getLogger(__name__)

BENIGN_LABEL = "benign"
BENIGN_SENTENCE = "This is a benign sequence."

_LABEL_RE = re.compile(r"T\d{4}$")


@dataclass(frozen=True)
class QueryEntry:
    text: str
    label: str
    source: str = ""


@dataclass
class QueryDB:
    entries: list[QueryEntry] = field(default_factory=list)
    issues: list[tuple[int, str]] = field(default_factory=list)

    def labels(self) -> set[str]:
        return {e.label for e in self.entries}


def valid_label(label: str) -> bool:
    return label == BENIGN_LABEL or bool(_LABEL_RE.match(label))


def load_query_db(path: str, lenient: bool = False) -> QueryDB:
    """Load and validate entries; duplicate texts keep the first occurrence."""
    entries: list[QueryEntry] = []
    issues: list[tuple[int, str]] = []
    seen: set[str] = set()
    with open(path, "rt", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                text = str(rec["text"])
                label = str(rec["label"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                issues.append((line_no, f"bad record: {exc}"))
                continue
            if not text:
                issues.append((line_no, "empty text"))
                continue
            if not valid_label(label):
                issues.append((line_no, f"bad label syntax {label!r}"))
                continue
            if text in seen:
                continue
            seen.add(text)
            entries.append(QueryEntry(text=text, label=label, source=str(rec.get("source", ""))))
    if issues and not lenient:
        raise QueryDBError(f"{path}: invalid query db records", issues)
    if not entries:
        log.warning("%s: query database is empty", path)
    return QueryDB(entries=entries, issues=issues)


def save_query_db(path: str, db: QueryDB) -> None:
    with open(path, "wt", encoding="utf-8") as f:
        for e in db.entries:
            f.write(
                json.dumps({"text": e.text, "label": e.label, "source": e.source}) + "\n"
            )


@dataclass(frozen=True)
class TrainingPair:
    sequence_text: str
    intel_text: str
    label: str


def build_pairs(
    labeled_sequences: Sequence[tuple[str, str]],
    intel: Sequence[QueryEntry],
    benign_sample_rate: float = 1.0,
    seed: int = 0,
) -> list[TrainingPair]:
    """Pair attack sequences with every matching intelligence text; sample
    benign sequences (without replacement) and pair them with the canonical
    benign sentence. Deterministic given the seed.

    labeled_sequences: (sequence_text, label) tuples, label "benign" or Txxxx.
    """
    if not 0.0 < benign_sample_rate <= 1.0:
        raise ValueError("benign_sample_rate must be in (0, 1]")
    by_label: dict[str, list[QueryEntry]] = {}
    for entry in intel:
        by_label.setdefault(entry.label, []).append(entry)

    attack = [(t, l) for t, l in labeled_sequences if l != BENIGN_LABEL]
    benign = [t for t, l in labeled_sequences if l == BENIGN_LABEL]

    missing = {l for _, l in attack if l not in by_label}
    if missing:
        raise IntelCoverageError(missing)
    if not attack:
        log.warning("no attack sequences; building benign-only pairs")

    pairs: list[TrainingPair] = []
    for text, label in attack:
        for entry in by_label[label]:
            pairs.append(TrainingPair(text, entry.text, label))

    k = int(round(benign_sample_rate * len(benign)))
    if k < len(benign):
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.permutation(len(benign))[:k])
    else:
        chosen = range(len(benign))
    for i in chosen:
        pairs.append(TrainingPair(benign[i], BENIGN_SENTENCE, BENIGN_LABEL))
    return pairs


Augmenter = Callable[[str], list[str]]


def augment_intelligence(
    entries: Sequence[QueryEntry], n_aug: int, augmenter: Augmenter
) -> list[QueryEntry]:
    """Add up to n_aug paraphrases per entry (same label, source "aug").

    Duplicate paraphrases are dropped with a warning; a failing augmenter
    leaves the entry unaugmented.
    """
    if n_aug < 0:
        raise ValueError("n_aug must be >= 0")
    out: list[QueryEntry] = []
    for entry in entries:
        out.append(entry)
        if n_aug == 0:
            continue
        try:
            candidates = augmenter(entry.text)
        except Exception as exc:  # augmenters may call external services
            log.warning("augmenter failed for %r: %s", entry.text[:60], exc)
            continue
        kept: list[str] = []
        for cand in candidates:
            if cand == entry.text or cand in kept:
                continue
            kept.append(cand)
            if len(kept) == n_aug:
                break
        if len(kept) < n_aug:
            log.warning(
                "augmenter produced %d/%d distinct paraphrases for %r",
                len(kept),
                n_aug,
                entry.text[:60],
            )
        for cand in kept:
            out.append(QueryEntry(text=cand, label=entry.label, source="aug"))
    return out


# -- augmentation replay files ------------------------------------------------

def load_replay_file(path: str) -> dict[str, list[str]]:
    mapping: dict[str, list[str]] = {}
    with open(path, "rt", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                mapping[str(rec["original_text"])] = [str(p) for p in rec["paraphrases"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise QueryDBError(
                    f"{path}: bad replay record", [(line_no, str(exc))]
                ) from exc
    return mapping


def write_replay_file(path: str, mapping: Mapping[str, list[str]]) -> None:
    with open(path, "wt", encoding="utf-8") as f:
        for original, paraphrases in mapping.items():
            f.write(
                json.dumps({"original_text": original, "paraphrases": list(paraphrases)})
                + "\n"
            )


def replay_augmenter(mapping: Mapping[str, list[str]]) -> Augmenter:
    """Augmenter that replays precomputed paraphrases; unknown texts get none."""

    def augment(text: str) -> list[str]:
        return list(mapping.get(text, []))

    return augment


def identity_augmenter(text: str) -> list[str]:
    """Stub augmenter: returns the input itself (always deduplicated away)."""
    return [text]

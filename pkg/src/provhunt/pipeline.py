"""End-to-end pipeline: ingest -> reduce -> partition -> train/load ->
index -> hunt -> reconstruct -> eval.

Stage outputs are content-addressed: each artifact name embeds a hash of the
stage's configuration and its input artifacts, so rerunning with an unchanged
config skips up-to-date stages. Every hyperparameter lives in one JSON config
file; CLI flags override individual fields.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from typing import Any

from . import hunt as hunt_mod
from . import intel as intel_mod
from . import metrics as metrics_mod
from . import scenario as scenario_mod
from .embed import (
    EncoderConfig,
    TrainConfig,
    load_external_embeddings,
    load_params,
    save_params,
    train,
)
from .errors import ProvHuntError, StageError
from .graph import ProvenanceGraph
from .ingest import build_graph, parse_events
from .partition import DEFAULT_THETA_NS, partition, to_sequence
from .reduce import ReduceConfig, ReduceReport, reduce_all

log = logging.getLogger(__name__)

_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ns|us|ms|s|m|h)?\s*$")
_UNIT_NS = {
    "ns": 1,
    "us": 1_000,
    "ms": 1_000_000,
    "s": 1_000_000_000,
    "m": 60_000_000_000,
    "h": 3_600_000_000_000,
}


def parse_duration(value: str | int | float) -> int:
    """'20m' / '1.5s' / bare integer nanoseconds -> nanoseconds."""
    if isinstance(value, (int, float)):
        return int(value)
    m = _DURATION_RE.match(value)
    if not m:
        raise ValueError(f"cannot parse duration {value!r} (use e.g. 20m, 1s, 500ms)")
    qty, unit = m.groups()
    return int(float(qty) * _UNIT_NS[unit or "ns"])


@dataclass
class PipelineConfig:
    input_events: str
    query_db: str
    workdir: str
    lenient: bool = False
    theta_max_ns: int = DEFAULT_THETA_NS
    reduce: ReduceConfig = field(default_factory=ReduceConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    benign_sample_rate: float = 1.0
    n_aug: int = 3
    augment_replay: str | None = None
    labels_file: str | None = None
    params_file: str | None = None
    external_embeddings: str | None = None
    min_score: float | None = None
    truth_file: str | None = None
    eval_2hop: bool = False

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "PipelineConfig":
        raw = dict(raw)
        if "theta_max_ns" in raw:
            raw["theta_max_ns"] = parse_duration(raw["theta_max_ns"])
        reduce_raw = dict(raw.get("reduce", {}))
        for key in ("net_window_ns", "cascade_window_ns", "file_window_ns"):
            if key in reduce_raw:
                reduce_raw[key] = parse_duration(reduce_raw[key])
        raw["reduce"] = ReduceConfig(**reduce_raw)
        raw["encoder"] = EncoderConfig(**raw.get("encoder", {}))
        train_raw = dict(raw.get("train", {}))
        train_raw.setdefault("seed", raw.get("seed", 0))
        raw["train"] = TrainConfig(**train_raw)
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        with open(path, "rt", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stage_digest(stage: str, cfg_part: Any, input_digests: list[str]) -> str:
    payload = json.dumps(
        {"stage": stage, "cfg": cfg_part, "inputs": input_digests}, sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


@dataclass
class PipelineResult:
    artifacts: dict[str, str] = field(default_factory=dict)
    reports: dict[str, Any] = field(default_factory=dict)


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    os.makedirs(cfg.workdir, exist_ok=True)
    result = PipelineResult()
    artifacts = result.artifacts

    def path_for(stage: str, digest: str, ext: str) -> str:
        return os.path.join(cfg.workdir, f"{stage}-{digest}{ext}")

    def run_stage(stage, fn):
        try:
            return fn()
        except (ProvHuntError, OSError, ValueError) as exc:
            raise StageError(stage, exc, artifacts) from exc

    # -- ingest --------------------------------------------------------------
    def do_ingest() -> str:
        digest = _stage_digest(
            "ingest", {"lenient": cfg.lenient}, [_file_digest(cfg.input_events)]
        )
        out = path_for("ingest", digest, ".provg")
        if not os.path.exists(out):
            events, issues = parse_events(cfg.input_events, lenient=cfg.lenient)
            if issues:
                log.warning("skipped %d malformed event lines", len(issues))
            build_graph(events).save(out)
        else:
            log.info("ingest up to date: %s", out)
        return out

    artifacts["graph"] = run_stage("ingest", do_ingest)

    # -- reduce ----------------------------------------------------------------
    def do_reduce() -> str:
        digest = _stage_digest(
            "reduce", asdict(cfg.reduce), [_file_digest(artifacts["graph"])]
        )
        out = path_for("reduce", digest, ".provg")
        if not os.path.exists(out):
            g = ProvenanceGraph.load(artifacts["graph"])
            report = ReduceReport()
            reduce_all(g, cfg.reduce, report).save(out)
            result.reports["reduce"] = report
        else:
            log.info("reduce up to date: %s", out)
        return out

    artifacts["reduced"] = run_stage("reduce", do_reduce)

    # -- partition -------------------------------------------------------------
    g_reduced = ProvenanceGraph.load(artifacts["reduced"])
    subs = partition(g_reduced, cfg.theta_max_ns)
    sequences = [to_sequence(s, g_reduced) for s in subs]

    def do_partition() -> str:
        digest = _stage_digest(
            "partition", {"theta": cfg.theta_max_ns}, [_file_digest(artifacts["reduced"])]
        )
        out = path_for("partition", digest, ".jsonl")
        if not os.path.exists(out):
            with open(out, "wt", encoding="utf-8") as f:
                for sub, seq in zip(subs, sequences):
                    f.write(
                        json.dumps(
                            {
                                "id": sub.id,
                                "edge_indices": sub.edge_indices,
                                "t_start": sub.t_start,
                                "t_end": sub.t_end,
                                "text": seq.text,
                            }
                        )
                        + "\n"
                    )
        return out

    artifacts["subgraphs"] = run_stage("partition", do_partition)

    # -- params: train here or load an existing checkpoint ----------------------
    def do_params() -> str:
        if cfg.params_file:
            return cfg.params_file
        if not cfg.labels_file:
            raise ProvHuntError(
                "training requires labels_file (subgraph ground truth); "
                "alternatively set params_file to reuse a checkpoint"
            )
        inputs = [
            _file_digest(artifacts["subgraphs"]),
            _file_digest(cfg.labels_file),
            _file_digest(cfg.query_db),
        ]
        if cfg.augment_replay:
            inputs.append(_file_digest(cfg.augment_replay))
        digest = _stage_digest(
            "train",
            {
                "train": asdict(cfg.train),
                "encoder": asdict(cfg.encoder),
                "rate": cfg.benign_sample_rate,
                "n_aug": cfg.n_aug,
                "seed": cfg.seed,
            },
            inputs,
        )
        out = path_for("train", digest, ".pprm")
        if os.path.exists(out):
            log.info("train up to date: %s", out)
            return out
        labels = _load_labels(cfg.labels_file)
        labeled = [
            (seq.text, labels.get(sub.id, intel_mod.BENIGN_LABEL))
            for sub, seq in zip(subs, sequences)
        ]
        db = intel_mod.load_query_db(cfg.query_db, lenient=cfg.lenient)
        entries = db.entries
        if cfg.augment_replay and cfg.n_aug > 0:
            replay = intel_mod.replay_augmenter(intel_mod.load_replay_file(cfg.augment_replay))
            entries = intel_mod.augment_intelligence(entries, cfg.n_aug, replay)
        pairs = intel_mod.build_pairs(
            labeled, entries, benign_sample_rate=cfg.benign_sample_rate, seed=cfg.seed
        )
        outcome = train(pairs, cfg.train, encoder_cfg=cfg.encoder)
        save_params(out, outcome.params)
        result.reports["train_losses"] = outcome.epoch_losses
        return out

    artifacts["params"] = run_stage("train", do_params)
    params = load_params(artifacts["params"])

    # -- index -------------------------------------------------------------------
    def do_index() -> str:
        inputs = [_file_digest(cfg.query_db), _file_digest(artifacts["params"])]
        if cfg.external_embeddings:
            inputs.append(_file_digest(cfg.external_embeddings))
        digest = _stage_digest("index", {}, inputs)
        out = path_for("index", digest, ".jsonl")
        if not os.path.exists(out):
            db = intel_mod.load_query_db(cfg.query_db, lenient=cfg.lenient)
            if cfg.external_embeddings:
                table = load_external_embeddings(cfg.external_embeddings)
                index = hunt_mod.build_index(db, embeddings=table)
            else:
                index = hunt_mod.build_index(db, params=params)
            hunt_mod.save_index(out, index)
        return out

    artifacts["index"] = run_stage("index", do_index)

    # -- hunt ----------------------------------------------------------------------
    def do_hunt() -> str:
        digest = _stage_digest(
            "hunt",
            {"theta": cfg.theta_max_ns, "min_score": cfg.min_score},
            [
                _file_digest(artifacts["reduced"]),
                _file_digest(artifacts["index"]),
                _file_digest(artifacts["params"]),
            ],
        )
        out = path_for("hunt", digest, ".jsonl")
        if not os.path.exists(out):
            index = hunt_mod.load_index(artifacts["index"])
            results = hunt_mod.hunt(
                g_reduced, cfg.theta_max_ns, index, params, min_score=cfg.min_score
            )
            hunt_mod.save_verdicts(out, results)
        return out

    artifacts["verdicts"] = run_stage("hunt", do_hunt)

    # -- reconstruct ------------------------------------------------------------------
    def do_reconstruct() -> tuple[str, str]:
        digest = _stage_digest(
            "reconstruct",
            {"theta": cfg.theta_max_ns},
            [_file_digest(artifacts["reduced"]), _file_digest(artifacts["verdicts"])],
        )
        out_dot = path_for("scenario", digest, ".dot")
        out_jsonl = path_for("scenario", digest, ".jsonl")
        if not (os.path.exists(out_dot) and os.path.exists(out_jsonl)):
            verdicts = hunt_mod.load_verdicts(artifacts["verdicts"])
            attack_ids = {v["subgraph_id"]: v["label"] for v in verdicts if v["is_attack"]}
            attack_subs = [s for s in subs if s.id in attack_ids]
            if attack_subs:
                ag = scenario_mod.reconstruct(attack_subs, g_reduced, labels=attack_ids)
            else:
                log.warning("no attack subgraphs flagged; scenario is empty")
                ag = scenario_mod.AttackGraph()
            with open(out_dot, "wt", encoding="utf-8") as f:
                f.write(scenario_mod.export(ag, "dot"))
            with open(out_jsonl, "wt", encoding="utf-8") as f:
                f.write(scenario_mod.export(ag, "jsonl"))
        return out_dot, out_jsonl

    artifacts["scenario_dot"], artifacts["scenario_jsonl"] = run_stage(
        "reconstruct", do_reconstruct
    )

    # -- eval -----------------------------------------------------------------------
    if cfg.truth_file:

        def do_eval() -> str:
            digest = _stage_digest(
                "eval",
                {"2hop": cfg.eval_2hop},
                [_file_digest(artifacts["verdicts"]), _file_digest(cfg.truth_file)],
            )
            out = path_for("eval", digest, ".jsonl")
            if not os.path.exists(out):
                reports = evaluate_verdicts(
                    artifacts["verdicts"],
                    cfg.truth_file,
                    g_reduced,
                    subs,
                    two_hop=cfg.eval_2hop,
                )
                metrics_mod.write_report(out, reports)
                result.reports["eval"] = {k: r.to_dict() for k, r in reports.items()}
            return out

        artifacts["report"] = run_stage("eval", do_eval)

    manifest = os.path.join(cfg.workdir, "manifest.json")
    with open(manifest, "wt", encoding="utf-8") as f:
        json.dump(artifacts, f, indent=2, sort_keys=True)
    return result


def _load_labels(path: str) -> dict[int, str]:
    labels: dict[int, str] = {}
    with open(path, "rt", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "subgraph_id" in rec and "label" in rec:
                labels[int(rec["subgraph_id"])] = str(rec["label"])
    return labels


def load_truth(path: str) -> tuple[set[int], set[tuple[str, str]]]:
    """Truth files may carry subgraph ids, node keys, or both."""
    sub_ids: set[int] = set()
    node_keys: set[tuple[str, str]] = set()
    with open(path, "rt", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "subgraph_id" in rec:
                sub_ids.add(int(rec["subgraph_id"]))
            if "node" in rec:
                node_keys.add((rec["node"][0], rec["node"][1]))
    return sub_ids, node_keys


def evaluate_verdicts(
    verdicts_path: str,
    truth_path: str,
    g: ProvenanceGraph,
    subs,
    two_hop: bool = False,
) -> dict[str, metrics_mod.MetricReport]:
    verdicts = hunt_mod.load_verdicts(verdicts_path)
    truth_ids, truth_nodes = load_truth(truth_path)
    reports: dict[str, metrics_mod.MetricReport] = {}
    all_ids = {v["subgraph_id"] for v in verdicts}
    pred_ids = {v["subgraph_id"] for v in verdicts if v["is_attack"]}
    if truth_ids:
        reports["graph"] = metrics_mod.graph_metrics(pred_ids, truth_ids, all_ids)
        if not truth_nodes:
            by_id = {s.id: s for s in subs}
            truth_nodes = set()
            for sid in truth_ids:
                if sid in by_id:
                    truth_nodes |= set(by_id[sid].node_keys)
    if truth_nodes:
        pred_nodes: set = set()
        by_id = {s.id: s for s in subs}
        for sid in pred_ids:
            if sid in by_id:
                pred_nodes |= set(by_id[sid].node_keys)
        truth = truth_nodes
        if two_hop:
            truth = metrics_mod.expand_2hop(truth_nodes & set(g.nodes), g)
        reports["node"] = metrics_mod.node_metrics(pred_nodes, truth, set(g.nodes))
    return reports

"""provhunt command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/processing error.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from . import hunt as hunt_mod
from . import intel as intel_mod
from . import metrics as metrics_mod
from . import scenario as scenario_mod
from .embed import (
    EncoderConfig,
    TrainConfig,
    embed_corpus,
    load_external_embeddings,
    load_params,
    save_params,
    train,
)
from .errors import ProvHuntError
from .graph import ProvenanceGraph
from .ingest import build_graph, parse_events
from .partition import partition, to_sequence
from .pemb import write_pemb
from .pipeline import PipelineConfig, parse_duration, run_pipeline
from .reduce import ReduceConfig, ReduceReport, reduce_all

log = logging.getLogger("provhunt")


class Duration(click.ParamType):
    name = "duration"

    def convert(self, value, param, ctx):
        try:
            return parse_duration(value)
        except ValueError as exc:
            self.fail(str(exc), param, ctx)


DURATION = Duration()


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
@click.option("--seed", type=int, default=0, show_default=True, help="Default RNG seed.")
@click.pass_context
def cli(ctx, verbose, seed):
    """Provenance-log threat hunting pipeline."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--lenient", is_flag=True, help="Skip malformed lines with a report.")
def ingest(input_path, output, lenient):
    """Parse canonical events and build a provenance graph snapshot."""
    events, issues = parse_events(input_path, lenient=lenient)
    for issue in issues:
        click.echo(f"skipped line {issue.line_no}: {issue.message}", err=True)
    g = build_graph(events)
    g.save(output)
    click.echo(f"{len(g.nodes)} nodes, {len(g.edges)} edges -> {output}")


@cli.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--net-window", type=DURATION, default="1s", show_default=True)
@click.option("--cascade-window", type=DURATION, default="5s", show_default=True)
@click.option("--file-window", type=DURATION, default="5s", show_default=True)
@click.option("--sim", type=float, default=0.7, show_default=True)
@click.option("--report", "report_path", type=click.Path(), default=None)
def reduce(graph_path, out, net_window, cascade_window, file_window, sim, report_path):
    """Apply the three redundancy-reduction rules."""
    cfg = ReduceConfig(
        net_window_ns=net_window,
        cascade_window_ns=cascade_window,
        file_window_ns=file_window,
        sim_threshold=sim,
    )
    g = ProvenanceGraph.load(graph_path)
    report = ReduceReport()
    reduced = reduce_all(g, cfg, report)
    reduced.save(out)
    if report_path:
        with open(report_path, "wt", encoding="utf-8") as f:
            for rule, counts in report.rules.items():
                f.write(json.dumps({"rule": rule, **counts}) + "\n")
            for warning in report.warnings:
                f.write(json.dumps({"warning": warning}) + "\n")
    click.echo(
        f"{len(g.nodes)}/{len(g.edges)} -> {len(reduced.nodes)}/{len(reduced.edges)} "
        f"(nodes/edges) -> {out}"
    )


@cli.command("partition")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--theta", type=DURATION, default="20m", show_default=True)
@click.option("--out", required=True, type=click.Path())
def partition_cmd(graph_path, theta, out):
    """Split a graph into behavior subgraphs and their log sequences."""
    g = ProvenanceGraph.load(graph_path)
    subs = partition(g, theta)
    with open(out, "wt", encoding="utf-8") as f:
        for sub in subs:
            seq = to_sequence(sub, g)
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
    click.echo(f"{len(subs)} behavior subgraphs -> {out}")


@cli.command("train")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def train_cmd(ctx, pairs_path, config_path, out):
    """Train the dual encoder on (sequence text, intel text) pairs."""
    raw = {}
    if config_path:
        with open(config_path, "rt", encoding="utf-8") as f:
            raw = json.load(f)
    tcfg = TrainConfig(**raw.get("train", {}))
    if "seed" not in raw.get("train", {}):
        tcfg.seed = ctx.obj["seed"]
    ecfg = EncoderConfig(**raw.get("encoder", {}))
    pairs = []
    with open(pairs_path, "rt", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                pairs.append((rec["sequence_text"], rec["intel_text"]))
    outcome = train(pairs, tcfg, encoder_cfg=ecfg)
    save_params(out, outcome.params)
    click.echo(
        f"trained {tcfg.epochs} epochs on {len(pairs)} pairs; "
        f"loss {outcome.epoch_losses[0]:.4f} -> {outcome.epoch_losses[-1]:.4f}; -> {out}"
    )


@cli.command("embed")
@click.option("--params", "params_path", required=True, type=click.Path(exists=True))
@click.option("--side", type=click.Choice(["log", "text"]), required=True)
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def embed_cmd(params_path, side, in_path, out):
    """Embed a corpus of texts into a PEMB1 file."""
    params = load_params(params_path)
    texts, ids = [], []
    with open(in_path, "rt", encoding="utf-8") as f:
        for i, line in enumerate(f):
            if not line.strip():
                continue
            rec = json.loads(line)
            texts.append(rec["text"])
            ids.append(str(rec.get("id", rec.get("subgraph_id", i))))
    table = embed_corpus(texts, side, params, ids=ids)
    write_pemb(out, table)
    click.echo(f"{len(texts)} texts embedded (dim {params.out_dim}) -> {out}")


@cli.command("index")
@click.option("--db", "db_path", required=True, type=click.Path(exists=True))
@click.option("--params", "params_path", type=click.Path(exists=True), default=None)
@click.option("--embeddings", "emb_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
def index_cmd(db_path, params_path, emb_path, out):
    """Build the query index from the intelligence database."""
    db = intel_mod.load_query_db(db_path, lenient=True)
    if (params_path is None) == (emb_path is None):
        raise click.UsageError("provide exactly one of --params or --embeddings")
    if params_path:
        index = hunt_mod.build_index(db, params=load_params(params_path))
    else:
        index = hunt_mod.build_index(db, embeddings=load_external_embeddings(emb_path))
    hunt_mod.save_index(out, index)
    click.echo(f"{len(index.labels)} query vectors -> {out}")


@cli.command("hunt")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--params", "params_path", required=True, type=click.Path(exists=True))
@click.option("--theta", type=DURATION, default="20m", show_default=True)
@click.option("--min-score", type=float, default=None)
@click.option("--out", required=True, type=click.Path())
def hunt_cmd(graph_path, index_path, params_path, theta, min_score, out):
    """Classify every behavior subgraph against the query index."""
    g = ProvenanceGraph.load(graph_path)
    index = hunt_mod.load_index(index_path)
    params = load_params(params_path)
    results = hunt_mod.hunt(g, theta, index, params, min_score=min_score)
    hunt_mod.save_verdicts(out, results)
    n_attack = sum(1 for _, v in results if v.is_attack)
    click.echo(f"{len(results)} subgraphs, {n_attack} flagged -> {out}")


@cli.command("reconstruct")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--verdicts", "verdicts_path", required=True, type=click.Path(exists=True))
@click.option("--theta", type=DURATION, default="20m", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["dot", "jsonl"]), default="dot")
def reconstruct_cmd(graph_path, verdicts_path, theta, out, fmt):
    """Stitch flagged subgraphs into a complete attack scenario graph."""
    g = ProvenanceGraph.load(graph_path)
    verdicts = hunt_mod.load_verdicts(verdicts_path)
    attack = {v["subgraph_id"]: v["label"] for v in verdicts if v["is_attack"]}
    subs = [s for s in partition(g, theta) if s.id in attack]
    if subs:
        ag = scenario_mod.reconstruct(subs, g, labels=attack)
    else:
        log.warning("no attack subgraphs flagged; writing an empty scenario")
        ag = scenario_mod.AttackGraph()
    with open(out, "wt", encoding="utf-8") as f:
        f.write(scenario_mod.export(ag, fmt))
    click.echo(
        f"scenario: {len(ag.nodes)} nodes, {len(ag.edges)} edges, "
        f"{len(ag.paths)} connecting paths -> {out}"
    )


@cli.command("eval")
@click.option("--verdicts", "verdicts_path", required=True, type=click.Path(exists=True))
@click.option("--truth", "truth_path", required=True, type=click.Path(exists=True))
@click.option("--graph", "graph_path", type=click.Path(exists=True), default=None)
@click.option("--theta", type=DURATION, default="20m", show_default=True)
@click.option("--2hop", "two_hop", is_flag=True)
@click.option("--report", "report_path", required=True, type=click.Path())
def eval_cmd(verdicts_path, truth_path, graph_path, theta, two_hop, report_path):
    """Score verdicts against ground truth (graph level, node level, 2-hop)."""
    from .pipeline import evaluate_verdicts

    if two_hop and not graph_path:
        raise click.UsageError("--2hop requires --graph")
    g = ProvenanceGraph.load(graph_path) if graph_path else None
    subs = partition(g, theta) if g else []
    if g is None:
        # graph-level only
        verdicts = hunt_mod.load_verdicts(verdicts_path)
        from .pipeline import load_truth

        truth_ids, _ = load_truth(truth_path)
        all_ids = {v["subgraph_id"] for v in verdicts}
        pred = {v["subgraph_id"] for v in verdicts if v["is_attack"]}
        reports = {"graph": metrics_mod.graph_metrics(pred, truth_ids, all_ids)}
    else:
        reports = evaluate_verdicts(verdicts_path, truth_path, g, subs, two_hop=two_hop)
    metrics_mod.write_report(report_path, reports)
    for level in sorted(reports):
        r = reports[level]
        click.echo(
            f"{level}: precision {metrics_mod.format_pct(r.precision)} "
            f"recall {metrics_mod.format_pct(r.recall)} "
            f"(tp={r.tp} fp={r.fp} fn={r.fn} tn={r.tn})"
        )


@cli.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.pass_context
def run_cmd(ctx, config_path):
    """Run the full pipeline from a config file."""
    cfg = PipelineConfig.from_file(config_path)
    result = run_pipeline(cfg)
    for stage in sorted(result.artifacts):
        click.echo(f"{stage}: {result.artifacts[stage]}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
        return 0
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (ProvHuntError, OSError, ValueError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())

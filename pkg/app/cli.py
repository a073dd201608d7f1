# app/cli.py

import argparse
import json
import logging
import os
import sys

from app import __version__
from app.agent import AgentError, ToolCall, dispatch_tool
from app.backends import BackendError
from app.code_graph import GraphError, build_graph, dump_graph, get_definition, load_graph, read_snapshot
from app.evaluation import EvaluationError, compute_detection_metrics, render_text, reports_table
from app.harness import HarnessError, RunConfig, evaluate_run, run_benchmark, scan_snapshot
from app.history import HistoryError, build_samples, load_manifest, load_samples, make_provider, write_samples
from app.retrieval import top_k_dependencies
from app.utils.config import ConfigError, load_settings, log_level
from app.utils.constants import DETECTORS, STRATEGIES
from app.utils.jsonl import read_jsonl

logger = logging.getLogger("jitscan")

FAILURES = (
    ConfigError,
    GraphError,
    HistoryError,
    AgentError,
    BackendError,
    EvaluationError,
    HarnessError,
    OSError,
    ValueError,
)
QUERY_TOOLS = {"callers": "get_callers", "callees": "get_callees", "def": "get_definition"}


# ----------------------
# graph
# ----------------------
def cmd_graph_build(args):
    snapshot = read_snapshot(args.snapshot)
    graph = build_graph(snapshot, args.snapshot_id or args.snapshot, workers=args.workers)
    text = dump_graph(graph)
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        logger.info("Wrote %d functions, %d edges to %s", len(graph.functions), len(graph.edges), args.output)
    else:
        sys.stdout.write(text)
    return 0


def cmd_graph_query(args):
    if args.graph:
        with open(args.graph, "r", encoding="utf-8") as f:
            data = json.load(f)
        # bodies stay empty when the snapshot directory is gone
        path = args.snapshot or data.get("snapshot_id", "")
        snapshot = read_snapshot(path) if args.snapshot or os.path.isdir(path) else ()
        graph = load_graph(data, snapshot)
    elif args.snapshot:
        graph = build_graph(read_snapshot(args.snapshot), args.snapshot)
    else:
        raise ConfigError("graph query needs --snapshot or --graph")

    if args.query in QUERY_TOOLS:
        print(dispatch_tool(graph, ToolCall(QUERY_TOOLS[args.query], args.name, args.line)))
        return 0

    target = get_definition(graph, args.name, args.line)
    deps = top_k_dependencies(graph, target, k=args.k, per_relation=args.per_relation)
    if not deps:
        print("No dependencies retrieved.")
    for dep in deps:
        fn = dep.function
        print(f"{dep.score:.4f}  {dep.relation:<6}  {fn.name}  {fn.file}:{fn.start_line}-{fn.end_line}")
    return 0


# ----------------------
# pair
# ----------------------
def cmd_pair_build(args):
    entries = load_manifest(args.manifest)
    provider = make_provider(args.provider, args.history_root)
    samples, rejections = build_samples(
        entries,
        provider,
        workers=args.workers,
        allow_message_mention=args.allow_message_mention,
        progress=sys.stderr.isatty(),
    )
    write_samples(samples, rejections, args.output)
    print(f"{len(samples)} samples, {len(rejections)} rejected -> {args.output}")
    return 0


# ----------------------
# run / eval / scan
# ----------------------
def _run_config(args, output_dir):
    config = RunConfig.from_settings(
        load_settings(args.config),
        detector=args.detector,
        strategy=args.strategy,
        script=args.script,
        gateway=args.gateway or None,
        max_iterations=args.max_iterations,
        k=args.k,
        per_relation=args.per_relation or None,
        parallelism=args.parallelism,
        temperature=args.temperature,
        output_dir=output_dir,
        templates_dir=args.templates,
    )
    return config.validate()


def cmd_run(args):
    config = _run_config(args, args.output)
    samples = load_samples(args.samples)
    artifact = run_benchmark(samples, config, progress=sys.stderr.isatty())
    print(f"{len(artifact.records)} records, {len(artifact.aborts)} aborts -> {args.output}")
    return 0


def _load_cwe_parents(path):
    if not path:
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def cmd_eval(args):
    parents = _load_cwe_parents(args.cwe_parents)
    reports = [evaluate_run(run_dir, cwe_parents=parents) for run_dir in args.runs]
    if args.histogram_csv:
        if len(reports) != 1:
            raise ConfigError("--histogram-csv takes exactly one run directory")
        reports[0].write_histogram_csv(args.histogram_csv)

    if args.format == "json":
        data = [r.to_dict() for r in reports]
        print(json.dumps(data[0] if len(data) == 1 else data, sort_keys=True, indent=2))
    elif len(reports) == 1:
        sys.stdout.write(render_text(reports[0]))
    else:
        print(reports_table(reports))
    return 0


def cmd_scan(args):
    config = _run_config(args, args.output)
    snapshot = read_snapshot(args.snapshot)
    graph = build_graph(snapshot, args.snapshot)
    known = read_jsonl(args.known)
    scan = scan_snapshot(graph, config, known, progress=sys.stderr.isatty())
    vdr, mfr, dpi = compute_detection_metrics(scan)
    print(
        f"detected {scan.detected_known}/{scan.total_known}, marked {scan.marked}/{scan.total_functions}\n"
        f"VDR {vdr:.4f}  MFR {mfr:.4f}  DPI {dpi:.4f}"
    )
    return 0


# ----------------------
# Parser
# ----------------------
def _add_detector_args(parser):
    parser.add_argument("--detector", choices=DETECTORS)
    parser.add_argument("--strategy", choices=STRATEGIES)
    backend = parser.add_mutually_exclusive_group(required=True)
    backend.add_argument("--script", help="JSONL replay of model completions")
    backend.add_argument("--gateway", action="store_true", help="use the HTTP model gateway (JITSCAN_MODEL_URL)")
    parser.add_argument("--max-iterations", type=int)
    parser.add_argument("-k", type=int, help="dependencies retrieved by dep_aug")
    parser.add_argument("--per-relation", action="store_true", help="k callers plus k callees")
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--templates", help="prompt template directory")
    parser.add_argument("--config", help="settings JSON (default: jitscan_config.json)")


def build_parser():
    parser = argparse.ArgumentParser(prog="jitscan", description="JIT repository-level vulnerability detection toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    graph = commands.add_parser("graph", help="build or query call graphs").add_subparsers(dest="action", required=True)
    build = graph.add_parser("build")
    build.add_argument("snapshot")
    build.add_argument("-o", "--output")
    build.add_argument("--snapshot-id")
    build.add_argument("--workers", type=int, default=1)
    build.set_defaults(func=cmd_graph_build)

    query = graph.add_parser("query")
    query.add_argument("query", choices=("callers", "callees", "def", "deps"))
    query.add_argument("name")
    query.add_argument("--snapshot", help="snapshot directory; optional when --graph is given")
    query.add_argument("--graph", help="graph JSON written by `graph build`")
    query.add_argument("--line", type=int)
    query.add_argument("-k", type=int, default=5)
    query.add_argument("--per-relation", action="store_true")
    query.set_defaults(func=cmd_graph_query)

    pair = commands.add_parser("pair", help="build pairwise samples").add_subparsers(dest="action", required=True)
    pair_build = pair.add_parser("build")
    pair_build.add_argument("--manifest", required=True)
    pair_build.add_argument("--history-root", required=True)
    pair_build.add_argument("-o", "--output", required=True)
    pair_build.add_argument("--provider", choices=("dir", "git"), default="dir")
    pair_build.add_argument("--workers", type=int, default=1)
    pair_build.add_argument("--allow-message-mention", action="store_true")
    pair_build.set_defaults(func=cmd_pair_build)

    run = commands.add_parser("run", help="run a detector over samples")
    run.add_argument("--samples", required=True)
    run.add_argument("-o", "--output", required=True)
    _add_detector_args(run)
    run.set_defaults(func=cmd_run)

    evaluate = commands.add_parser("eval", help="score finished runs")
    evaluate.add_argument("runs", nargs="+")
    evaluate.add_argument("--format", choices=("table", "json"), default="table")
    evaluate.add_argument("--histogram-csv")
    evaluate.add_argument("--cwe-parents", help="JSON map of CWE child -> parent for hierarchical CLA")
    evaluate.set_defaults(func=cmd_eval)

    scan = commands.add_parser("scan", help="scan every function of a snapshot")
    scan.add_argument("snapshot")
    scan.add_argument("--known", required=True, help="JSONL of known vulnerable functions")
    scan.add_argument("-o", "--output")
    _add_detector_args(scan)
    scan.set_defaults(func=cmd_scan)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else log_level(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FAILURES as e:
        print(f"jitscan: error: {e}", file=sys.stderr)
        return 2

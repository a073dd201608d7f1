"""
harness.py

Runs a detector over pairwise samples and persists the results:

  <out>/records.jsonl              one PredictionRecord per analyzed version
  <out>/aborts.jsonl               one entry per version that could not be analyzed
  <out>/transcripts/<id>.<v>.txt   Thought/Action/Observation trace per version
  <out>/run.json                   config, config hash and toolkit version

Also evaluates finished runs and scans whole snapshots for VDR/MFR.
"""

import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from typing import Optional

from tqdm import tqdm

from app import __version__
from app.agent import AgentError, Strategy, load_templates, run_dep_aug, run_plain, run_react
from app.backends import GatewayBackend, KeyedScript, load_script
from app.code_graph import GraphError, build_graph, snapshot_digest
from app.evaluation import PredictionRecord, ScanResult, summarize
from app.history import HistoryError, normalize_body, read_snapshot_ref
from app.utils.config import ConfigError, load_settings
from app.utils.constants import DETECTOR_LABELS, DETECTORS, STRATEGIES, STRATEGY_LABELS
from app.utils.jsonl import append_jsonl, dumps, read_jsonl

logger = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
ABORTS_FILE = "aborts.jsonl"
RUN_FILE = "run.json"
TRANSCRIPTS_DIR = "transcripts"
SCAN_FILE = "scan.jsonl"


class HarnessError(Exception):
    """Base class for per-sample orchestration failures."""


class TargetNotInGraph(HarnessError):
    pass


# ----------------------
# Run configuration
# ----------------------
@dataclass
class RunConfig:
    detector: str = "plain"
    strategy: str = "vanilla"
    script: Optional[str] = None
    gateway: bool = False
    max_iterations: int = 10
    max_parse_retries: int = 2
    k: int = 5
    per_relation: bool = False
    parallelism: int = 1
    temperature: float = 0.0
    output_dir: Optional[str] = None
    templates_dir: Optional[str] = None

    @classmethod
    def from_settings(cls, settings=None, **overrides):
        """Defaults < jitscan_config.json (or `settings`) < explicit overrides."""
        values = dict(load_settings() if settings is None else settings)
        values.update({key: value for key, value in overrides.items() if value is not None})
        known = set(cls.__dataclass_fields__)
        return cls(**{key: value for key, value in values.items() if key in known})

    def validate(self):
        problems = []
        if self.detector not in DETECTORS:
            problems.append(f"unknown detector {self.detector!r}")
        if self.strategy not in STRATEGIES:
            problems.append(f"unknown strategy {self.strategy!r}")
        if self.k < 0:
            problems.append("k must be >= 0")
        if self.max_iterations < 1:
            problems.append("max_iterations must be >= 1")
        if self.max_parse_retries < 0:
            problems.append("max_parse_retries must be >= 0")
        if self.parallelism < 1:
            problems.append("parallelism must be >= 1")
        if bool(self.script) == bool(self.gateway):
            problems.append("exactly one of a replay script or the gateway backend is required")
        if self.script and not os.path.isfile(self.script):
            problems.append(f"script file not found: {self.script}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def _backend_spec(self):
        if self.script:
            with open(self.script, "rb") as f:
                return f"script:{hashlib.sha256(f.read()).hexdigest()}"
        return "gateway"

    def identity(self):
        """Settings that determine the records; output location and pool size excluded."""
        data = asdict(self)
        for key in ("output_dir", "parallelism", "script", "gateway"):
            data.pop(key)
        data["backend"] = self._backend_spec()
        return data

    def config_hash(self):
        return hashlib.sha256(dumps(self.identity()).encode("utf-8")).hexdigest()

    def open_backend(self):
        if self.gateway:
            return GatewayBackend.from_env()
        backend = load_script(self.script)
        if self.parallelism > 1 and not isinstance(backend, KeyedScript):
            raise ConfigError("an unkeyed replay script cannot be shared by parallel workers; set parallelism to 1")
        return backend

    @property
    def label(self):
        strategy = STRATEGY_LABELS.get(self.strategy, self.strategy)
        detector = DETECTOR_LABELS.get(self.detector, self.detector)
        return detector if self.strategy == "vanilla" else f"{detector} {strategy}"


@dataclass
class RunArtifact:
    output_dir: str
    config_hash: str
    records: list = field(default_factory=list)
    aborts: list = field(default_factory=list)

    @property
    def records_path(self):
        return os.path.join(self.output_dir, RECORDS_FILE)


# ----------------------
# Graph cache
# ----------------------
class GraphCache:
    """CallGraphs keyed by snapshot content hash; locators map onto hashes."""

    def __init__(self, workers=1):
        self.workers = workers
        self._by_ref = {}
        self._by_digest = {}
        self._lock = threading.Lock()
        self.builds = 0

    def get(self, snapshot_ref):
        with self._lock:
            if snapshot_ref in self._by_ref:
                return self._by_digest[self._by_ref[snapshot_ref]]

        snapshot = read_snapshot_ref(snapshot_ref)
        digest = snapshot_digest(snapshot)
        with self._lock:
            graph = self._by_digest.get(digest)
        if graph is None:
            graph = build_graph(snapshot, digest, workers=self.workers)
            with self._lock:
                graph = self._by_digest.setdefault(digest, graph)
                self.builds += 1
        with self._lock:
            self._by_ref[snapshot_ref] = digest
        return graph


# ----------------------
# Detection
# ----------------------
def find_target(graph, file, name, body=None):
    candidates = [fn for fn in graph.name_index.get(name, ()) if fn.file == file]
    if not candidates:
        raise TargetNotInGraph(f"{file}:{name} not found in snapshot {graph.snapshot_id[:12]}")
    if body is not None and len(candidates) > 1:
        wanted = normalize_body(body)
        for fn in candidates:
            if normalize_body(fn.body) == wanted:
                return fn
    return candidates[0]


def detect(config, backend, graph, target, body, templates=None):
    """Run the configured detector; (None, transcript) when the backend failed."""
    strategy = Strategy.from_name(config.strategy)
    if config.detector == "plain":
        return run_plain(backend, strategy, body, templates=templates, temperature=config.temperature)
    if config.detector == "dep_aug":
        return run_dep_aug(
            backend,
            strategy,
            graph,
            target,
            k=config.k,
            per_relation=config.per_relation,
            target_body=body,
            templates=templates,
            temperature=config.temperature,
        )
    return run_react(
        backend,
        strategy,
        graph,
        target,
        max_iterations=config.max_iterations,
        max_parse_retries=config.max_parse_retries,
        target_body=body,
        templates=templates,
        temperature=config.temperature,
    )


def _write_transcript(out_dir, sample, version, transcript):
    path = os.path.join(out_dir, TRANSCRIPTS_DIR, f"{sample.sample_id}.{version}.txt")
    header = (
        f"Sample: {sample.sample_id}\n"
        f"CVE: {sample.cve_id}\n"
        f"Version: {version}\n"
        f"Function: {sample.file}:{sample.function_name}\n"
    )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header + transcript.render())


def _run_version(sample, version, config, backend, cache, templates, serial_lock):
    """('record', dict) or ('abort', dict) for one side of a sample."""
    ref, body = (sample.r_intro, sample.f_vul) if version == "vul" else (sample.r_fix, sample.f_ben)
    try:
        graph = cache.get(ref)
        target = find_target(graph, sample.file, sample.function_name, body.verbatim)
        with serial_lock or nullcontext():
            verdict, transcript = detect(
                config, backend.for_key(f"{sample.sample_id}:{version}"), graph, target, body.verbatim, templates
            )
    except (HistoryError, GraphError, AgentError, HarnessError) as e:
        logger.warning("Aborted %s (%s): %s: %s", sample.sample_id, version, type(e).__name__, e)
        return "abort", {"sample_id": sample.sample_id, "version": version, "reason": type(e).__name__, "detail": str(e)}

    _write_transcript(config.output_dir, sample, version, transcript)
    if verdict is None:
        return "abort", {
            "sample_id": sample.sample_id,
            "version": version,
            "reason": "BackendError",
            "detail": transcript.steps[-1].text if transcript.aborted else "no verdict",
        }
    record = PredictionRecord(
        sample_id=sample.sample_id,
        version=version,
        truth=version,
        predicted=verdict.label,
        truth_cwe=sample.cwe_id,
        predicted_cwe=verdict.cwe,
        tool_invocations=transcript.tool_invocations,
        fallback_flag=verdict.fallback,
    )
    return "record", record.to_dict()


def run_benchmark(samples, config, backend=None, progress=False):
    """Analyze both versions of every sample; only config errors stop the run."""
    config.validate()
    if not config.output_dir:
        raise ConfigError("output_dir is required")
    backend = backend or config.open_backend()
    templates = load_templates(config.templates_dir) if config.templates_dir else load_templates()

    out = config.output_dir
    os.makedirs(os.path.join(out, TRANSCRIPTS_DIR), exist_ok=True)
    for name in (RECORDS_FILE, ABORTS_FILE):
        open(os.path.join(out, name), "w").close()

    samples = list(samples)
    cache = GraphCache()
    serial_lock = threading.Lock() if config.parallelism > 1 and not backend.concurrent_safe else None
    artifact = RunArtifact(out, config.config_hash())

    def work(sample):
        return [_run_version(sample, v, config, backend, cache, templates, serial_lock) for v in ("vul", "ben")]

    pool = ThreadPoolExecutor(max_workers=config.parallelism) if config.parallelism > 1 else None
    results = pool.map(work, samples) if pool else map(work, samples)
    try:
        for outcomes in tqdm(results, total=len(samples), desc="Running samples", unit="sample", disable=not progress):
            for kind, payload in outcomes:
                if kind == "record":
                    append_jsonl(os.path.join(out, RECORDS_FILE), payload)
                    artifact.records.append(PredictionRecord.from_dict(payload))
                else:
                    append_jsonl(os.path.join(out, ABORTS_FILE), payload)
                    artifact.aborts.append(payload)
    finally:
        if pool:
            pool.shutdown()

    manifest = {
        "config": config.identity(),
        "config_hash": artifact.config_hash,
        "label": config.label,
        "version": __version__,
        "samples": len(samples),
        "records": len(artifact.records),
        "aborts": len(artifact.aborts),
        "graphs_built": cache.builds,
    }
    with open(os.path.join(out, RUN_FILE), "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    unused = getattr(backend, "remaining", 0)
    if unused:
        logger.warning("Replay script has %d unused completions", unused)
    logger.info(
        "Run %s: %d records, %d aborts over %d samples",
        artifact.config_hash[:12],
        len(artifact.records),
        len(artifact.aborts),
        len(samples),
    )
    return artifact


def evaluate_run(artifact, cwe_parents=None):
    """MetricsReport of a finished run (a RunArtifact or its output directory)."""
    out = artifact.output_dir if isinstance(artifact, RunArtifact) else artifact
    records = [PredictionRecord.from_dict(r) for r in read_jsonl(os.path.join(out, RECORDS_FILE))]
    label = ""
    run_path = os.path.join(out, RUN_FILE)
    if os.path.isfile(run_path):
        with open(run_path, "r", encoding="utf-8") as f:
            label = json.load(f).get("label", "")
    return summarize(records, label=label, cwe_parents=cwe_parents)


# ----------------------
# Repository scan
# ----------------------
def _known_keys(known):
    keys = set()
    for item in known:
        if isinstance(item, dict):
            keys.add((item.get("file"), item["function"]))
        else:
            keys.add(tuple(item))
    return keys


def _is_known(fn, keys):
    return (fn.file, fn.name) in keys or (None, fn.name) in keys


def scan_snapshot(graph, config, known, backend=None, progress=False):
    """Run the detector over every function of `graph` and count the marked ones.

    `known` lists the benchmark vulnerabilities as (file, name) pairs or
    {"file", "function"} dicts; a missing file matches the name anywhere.
    """
    config.validate()
    backend = backend or config.open_backend()
    templates = load_templates(config.templates_dir) if config.templates_dir else load_templates()
    keys = _known_keys(known)
    if config.output_dir:
        os.makedirs(config.output_dir, exist_ok=True)
        open(os.path.join(config.output_dir, SCAN_FILE), "w").close()

    detected = set()
    marked = 0
    analyzed = 0
    for fn in tqdm(graph.functions, desc="Scanning functions", unit="fn", disable=not progress):
        try:
            verdict, transcript = detect(config, backend.for_key(f"{fn.file}::{fn.name}"), graph, fn, fn.body, templates)
        except (GraphError, AgentError) as e:
            logger.warning("Skipped %s:%s: %s", fn.file, fn.name, e)
            continue
        if verdict is None:
            logger.warning("Skipped %s:%s: backend failed", fn.file, fn.name)
            continue
        analyzed += 1
        is_known = _is_known(fn, keys)
        if verdict.label == "vul":
            marked += 1
            if is_known:
                detected.add((fn.file, fn.name))
        if config.output_dir:
            append_jsonl(
                os.path.join(config.output_dir, SCAN_FILE),
                {
                    "file": fn.file,
                    "function": fn.name,
                    "start_line": fn.start_line,
                    "known": is_known,
                    "predicted": verdict.label,
                    "predicted_cwe": verdict.cwe,
                    "tool_invocations": transcript.tool_invocations,
                    "fallback_flag": verdict.fallback,
                },
            )

    detected_known = len({key for key in keys if any(_matches(key, d) for d in detected)})
    return ScanResult(detected_known=detected_known, total_known=len(keys), marked=marked, total_functions=analyzed)


def _matches(key, found):
    file, name = key
    return name == found[1] and (file is None or file == found[0])

"""Tests for benchmark runs, run evaluation and whole-snapshot scans."""

import json
import os

import pytest

from app import __version__
from app.backends import ScriptedBackend
from app.evaluation import compute_detection_metrics
from app.harness import GraphCache, RunConfig, TargetNotInGraph, evaluate_run, find_target, run_benchmark, scan_snapshot
from app.history import CommitRef, FunctionBody, PairwiseSample
from app.utils.config import ConfigError
from app.utils.jsonl import read_jsonl
from tests.conftest import c, graph_of, write_script, write_tree

PARSE_VUL = c(
    """
    int parse(char *buf, int len)
    {
        char tmp[8];
        memcpy(tmp, buf, len);
        return tmp[0];
    }
    """
).rstrip("\n")
PARSE_BEN = c(
    """
    int parse(char *buf, int len)
    {
        char tmp[8];
        if (len > 8)
            return -1;
        memcpy(tmp, buf, len);
        return tmp[0];
    }
    """
).rstrip("\n")
ENTRY = "int entry(char *buf)\n{\n    return parse(buf, 16);\n}\n"
VUL_C = PARSE_VUL + "\n" + ENTRY
BEN_C = PARSE_BEN + "\n" + ENTRY


def make_sample(root, sample_id, function_name="parse", r_intro=None):
    intro = write_tree(os.path.join(str(root), "snapshots", sample_id, "intro"), {"src.c": VUL_C})
    fix = write_tree(os.path.join(str(root), "snapshots", sample_id, "fix"), {"src.c": BEN_C})
    return PairwiseSample(
        sample_id=sample_id,
        cve_id=f"CVE-2024-{sample_id}",
        cwe_id="CWE-787",
        file="src.c",
        function_name=function_name,
        f_vul=FunctionBody.of(PARSE_VUL),
        f_ben=FunctionBody.of(PARSE_BEN),
        vul_intro=CommitRef("intro", None, intro),
        vul_fix=CommitRef("fix", None, fix),
        r_intro=r_intro or intro,
        r_fix=fix,
    )


def keyed_script(path, completions):
    """`completions` maps "<sample_id>:<version>" to a list of completions."""
    entries = [{"key": key, "text": text} for key, texts in completions.items() for text in texts]
    return write_script(path, entries)


def plain_config(tmp_path, script, name="run", **overrides):
    return RunConfig(detector="plain", strategy="vanilla", script=script, output_dir=str(tmp_path / name), **overrides)


def read_file(path):
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


# ----------------------
# Benchmark runs
# ----------------------
def test_three_sample_run_writes_every_artifact(tmp_path):
    samples = [make_sample(tmp_path, sid) for sid in ("s1", "s2", "s3")]
    script = write_script(
        tmp_path / "replay.jsonl",
        ["vulnerable, CWE-787", "benign", "vulnerable, CWE-787", "vulnerable", "benign", "benign"],
    )
    config = plain_config(tmp_path, script)
    artifact = run_benchmark(samples, config)

    out = config.output_dir
    records = read_jsonl(os.path.join(out, "records.jsonl"))
    assert [(r["sample_id"], r["version"], r["predicted"]) for r in records] == [
        ("s1", "vul", "vul"),
        ("s1", "ben", "ben"),
        ("s2", "vul", "vul"),
        ("s2", "ben", "vul"),
        ("s3", "vul", "ben"),
        ("s3", "ben", "ben"),
    ]
    assert records[0]["truth_cwe"] == "CWE-787" and records[0]["predicted_cwe"] == "CWE-787"
    assert read_jsonl(os.path.join(out, "aborts.jsonl")) == []
    assert len(artifact.records) == 6 and artifact.aborts == []

    transcripts = sorted(os.listdir(os.path.join(out, "transcripts")))
    assert transcripts == [f"{sid}.{v}.txt" for sid in ("s1", "s2", "s3") for v in ("ben", "vul")]
    first = read_file(os.path.join(out, "transcripts", "s1.vul.txt"))
    assert first.startswith("Sample: s1\nCVE: CVE-2024-s1\nVersion: vul\nFunction: src.c:parse\nDetector: plain\n")
    assert PARSE_VUL in first

    with open(os.path.join(out, "run.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["config_hash"] == config.config_hash()
    assert manifest["label"] == "Plain LLM"
    assert manifest["version"] == __version__
    assert (manifest["samples"], manifest["records"], manifest["aborts"]) == (3, 6, 0)
    assert manifest["graphs_built"] == 2

    report = evaluate_run(artifact)
    assert report.label == "Plain LLM"
    assert report.pacc == pytest.approx(1 / 3)
    assert report.f1 == pytest.approx(2 / 3)
    assert evaluate_run(out).to_dict() == report.to_dict()


def test_rerun_replaces_previous_output(tmp_path):
    samples = [make_sample(tmp_path, "s1")]
    script = write_script(tmp_path / "replay.jsonl", ["vulnerable", "benign"])
    config = plain_config(tmp_path, script)
    run_benchmark(samples, config)
    run_benchmark(samples, config)
    assert len(read_jsonl(os.path.join(config.output_dir, "records.jsonl"))) == 2


def test_unused_script_completions_are_reported(tmp_path, caplog):
    samples = [make_sample(tmp_path, "s1")]
    script = write_script(tmp_path / "replay.jsonl", ["vulnerable", "benign", "benign"])
    with caplog.at_level("WARNING", logger="app.harness"):
        artifact = run_benchmark(samples, plain_config(tmp_path, script))
    assert len(artifact.records) == 2
    assert "Replay script has 1 unused completions" in caplog.text


def test_runs_are_deterministic_across_parallelism(tmp_path):
    sample_ids = [f"s{i}" for i in range(1, 6)]
    samples = [make_sample(tmp_path, sid) for sid in sample_ids]
    completions = {}
    for i, sid in enumerate(sample_ids):
        completions[f"{sid}:vul"] = ["vulnerable, CWE-787" if i % 2 == 0 else "benign"]
        completions[f"{sid}:ben"] = ["benign" if i % 3 else "vulnerable, CWE-20"]
    script = keyed_script(tmp_path / "keyed.jsonl", completions)

    serial = plain_config(tmp_path, script, "serial")
    parallel = plain_config(tmp_path, script, "parallel", parallelism=4)
    run_benchmark(samples, serial)
    run_benchmark(samples, parallel)

    assert serial.config_hash() == parallel.config_hash()
    for name in ("records.jsonl", "aborts.jsonl"):
        assert read_file(os.path.join(serial.output_dir, name)) == read_file(os.path.join(parallel.output_dir, name))
    for name in os.listdir(os.path.join(serial.output_dir, "transcripts")):
        assert read_file(os.path.join(serial.output_dir, "transcripts", name)) == read_file(
            os.path.join(parallel.output_dir, "transcripts", name)
        )


def test_unreadable_snapshot_aborts_one_version(tmp_path):
    samples = [
        make_sample(tmp_path, "s1"),
        make_sample(tmp_path, "s2", r_intro=str(tmp_path / "nowhere")),
        make_sample(tmp_path, "s3"),
    ]
    script = keyed_script(
        tmp_path / "keyed.jsonl",
        {
            "s1:vul": ["vulnerable"],
            "s1:ben": ["benign"],
            "s2:vul": ["vulnerable"],
            "s2:ben": ["benign"],
            "s3:vul": ["benign"],
            "s3:ben": ["benign"],
        },
    )
    artifact = run_benchmark(samples, plain_config(tmp_path, script))

    assert len(artifact.records) + len(artifact.aborts) == 2 * len(samples)
    assert [(a["sample_id"], a["version"], a["reason"]) for a in artifact.aborts] == [
        ("s2", "vul", "SnapshotUnavailable")
    ]
    assert not os.path.exists(os.path.join(artifact.output_dir, "transcripts", "s2.vul.txt"))

    report = evaluate_run(artifact.output_dir)
    assert report.unpaired == ["s2"]
    assert report.pairs == 2
    assert report.pacc == pytest.approx(0.5)


def test_backend_failure_and_missing_target_abort(tmp_path):
    samples = [make_sample(tmp_path, "s1"), make_sample(tmp_path, "s2", function_name="absent")]
    script = keyed_script(tmp_path / "keyed.jsonl", {"s1:vul": ["vulnerable"], "s2:vul": ["benign"]})
    artifact = run_benchmark(samples, plain_config(tmp_path, script))

    assert [(r.sample_id, r.version) for r in artifact.records] == [("s1", "vul")]
    reasons = [(a["sample_id"], a["version"], a["reason"]) for a in artifact.aborts]
    assert reasons == [
        ("s1", "ben", "BackendError"),
        ("s2", "vul", "TargetNotInGraph"),
        ("s2", "ben", "TargetNotInGraph"),
    ]
    assert "exhausted" in artifact.aborts[0]["detail"]
    assert "Abort: script exhausted" in read_file(os.path.join(artifact.output_dir, "transcripts", "s1.ben.txt"))


def test_react_run_records_tool_use(tmp_path):
    script = keyed_script(
        tmp_path / "keyed.jsonl",
        {
            "s1:vul": [
                "Thought: who passes len?\nAction: get_callers\nAction Input: parse",
                "Thought: entry passes 16 into an 8 byte buffer.\nFinal Answer: vulnerable, CWE-787",
            ],
            "s1:ben": ["Final Answer: benign"],
        },
    )
    config = RunConfig(detector="react", strategy="cot", script=script, output_dir=str(tmp_path / "react"))
    artifact = run_benchmark([make_sample(tmp_path, "s1")], config)

    vul, ben = artifact.records
    assert (vul.predicted, vul.predicted_cwe, vul.tool_invocations) == ("vul", "CWE-787", 1)
    assert (ben.predicted, ben.tool_invocations) == ("ben", 0)
    trace = read_file(os.path.join(config.output_dir, "transcripts", "s1.vul.txt"))
    assert "Action: get_callers\nAction Input: parse\nObservation: Callers of parse: entry (line 9)" in trace
    assert evaluate_run(artifact).label == "ReAct Agent w/ CoT"


def test_graph_cache_shares_identical_snapshots(tmp_path):
    first = write_tree(tmp_path / "a", {"src.c": VUL_C})
    second = write_tree(tmp_path / "b", {"src.c": VUL_C})
    cache = GraphCache()
    assert cache.get(first) is cache.get(second)
    assert cache.get(first) is cache.get(first)
    assert cache.builds == 1


def test_find_target(tmp_path):
    graph = graph_of({"src.c": VUL_C})
    assert find_target(graph, "src.c", "entry").start_line == 7
    with pytest.raises(TargetNotInGraph):
        find_target(graph, "other.c", "entry")


# ----------------------
# Configuration
# ----------------------
def test_config_layers():
    config = RunConfig.from_settings({"detector": "react", "k": 3, "unused": 1}, k=None, strategy="cot")
    assert (config.detector, config.strategy, config.k) == ("react", "cot", 3)


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"detector": "grep"}, "unknown detector"),
        ({"strategy": "zero_shot"}, "unknown strategy"),
        ({"k": -1}, "k must be"),
        ({"max_iterations": 0}, "max_iterations"),
        ({"parallelism": 0}, "parallelism"),
        ({"gateway": True}, "exactly one"),
    ],
)
def test_config_validation(tmp_path, overrides, message):
    script = write_script(tmp_path / "replay.jsonl", ["benign"])
    with pytest.raises(ConfigError, match=message):
        RunConfig(script=script, **overrides).validate()


def test_config_requires_a_backend(tmp_path):
    with pytest.raises(ConfigError, match="exactly one"):
        RunConfig().validate()
    with pytest.raises(ConfigError, match="not found"):
        RunConfig(script=str(tmp_path / "missing.jsonl")).validate()


def test_config_hash_ignores_output_location(tmp_path):
    script = write_script(tmp_path / "replay.jsonl", ["benign"])
    base = RunConfig(script=script, output_dir="a")
    assert base.config_hash() == RunConfig(script=script, output_dir="b", parallelism=8).config_hash()
    assert base.config_hash() != RunConfig(script=script, strategy="cot").config_hash()
    other = write_script(tmp_path / "other.jsonl", ["vulnerable"])
    assert base.config_hash() != RunConfig(script=other).config_hash()


def test_unkeyed_script_cannot_run_in_parallel(tmp_path):
    script = write_script(tmp_path / "replay.jsonl", ["benign", "benign"])
    config = plain_config(tmp_path, script, parallelism=2)
    with pytest.raises(ConfigError, match="unkeyed"):
        run_benchmark([make_sample(tmp_path, "s1")], config)
    with pytest.raises(ConfigError, match="output_dir"):
        run_benchmark([], RunConfig(script=script))


# ----------------------
# Snapshot scan
# ----------------------
SCAN_FILES = {"scan.c": "".join(f"int f{n}(int a)\n{{\n    return a + {n};\n}}\n" for n in range(10))}


def scan_with(tmp_path, completions, known, name="scan"):
    script = write_script(tmp_path / f"{name}.jsonl", completions)
    config = plain_config(tmp_path, script, name)
    return scan_snapshot(graph_of(SCAN_FILES), config, known), config


def test_scan_counts_marked_and_detected(tmp_path):
    completions = ["vulnerable" if n in (3, 7) else "benign" for n in range(10)]
    scan, config = scan_with(tmp_path, completions, [{"file": "scan.c", "function": "f3"}])
    assert (scan.detected_known, scan.total_known, scan.marked, scan.total_functions) == (1, 1, 2, 10)
    metrics = compute_detection_metrics(scan)
    assert (metrics.vdr, metrics.mfr) == (1.0, 0.2)

    rows = read_jsonl(os.path.join(config.output_dir, "scan.jsonl"))
    assert [row["function"] for row in rows] == [f"f{n}" for n in range(10)]
    assert [row["function"] for row in rows if row["known"]] == ["f3"]


def test_scan_nothing_and_everything_marked(tmp_path):
    known = [(None, "f7")]
    nothing, _ = scan_with(tmp_path, ["benign"] * 10, known, "nothing")
    assert compute_detection_metrics(nothing)[:2] == (0.0, 0.0)
    everything, _ = scan_with(tmp_path, ["vulnerable"] * 10, known, "everything")
    assert compute_detection_metrics(everything)[:2] == (1.0, 1.0)


def test_scan_skips_functions_the_backend_failed_on(tmp_path):
    scan, _ = scan_with(tmp_path, ["benign"] * 9, [{"function": "f0"}])
    assert scan.total_functions == 9
    assert scan.marked == 0


def test_scan_with_explicit_backend(tmp_path):
    script = write_script(tmp_path / "unused.jsonl", ["benign"])
    backend = ScriptedBackend(["vulnerable"] + ["benign"] * 9)
    config = RunConfig(script=script)
    scan = scan_snapshot(graph_of(SCAN_FILES), config, [("scan.c", "f0")], backend=backend)
    assert (scan.detected_known, scan.marked) == (1, 1)
    assert len(backend.prompts) == 10

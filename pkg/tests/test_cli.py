"""Smoke tests for the jitscan command line."""

import json
import os
import shutil

from app.cli import main
from app.utils.jsonl import write_jsonl
from tests.conftest import c, write_history, write_script, write_tree

PARSE = c(
    """
    int parse(char *buf, int len)
    {
        char tmp[8];
        memcpy(tmp, buf, len);
        return tmp[0];
    }
    int entry(char *buf)
    {
        return parse(buf, 16);
    }
    """
)
SAFE = PARSE.replace("    memcpy", "    if (len > 4)\n        return 0;\n    memcpy", 1)
FIXED = PARSE.replace("    memcpy", "    if (len > 8)\n        return -1;\n    memcpy", 1)


def test_graph_query(tmp_path, capsys):
    snapshot = write_tree(tmp_path / "snap", {"src.c": PARSE})
    assert main(["graph", "query", "callers", "parse", "--snapshot", snapshot]) == 0
    assert capsys.readouterr().out == "Callers of parse: entry (line 9)\n"

    assert main(["graph", "query", "deps", "parse", "--snapshot", snapshot]) == 0
    assert "caller  entry  src.c:7-10" in capsys.readouterr().out


def test_graph_build_then_query_saved_graph(tmp_path, capsys):
    snapshot = write_tree(tmp_path / "snap", {"src.c": PARSE})
    saved = str(tmp_path / "graph.json")
    assert main(["graph", "build", snapshot, "-o", saved]) == 0
    with open(saved, "r", encoding="utf-8") as f:
        assert json.load(f)["functions"]

    assert main(["graph", "query", "def", "entry", "--snapshot", snapshot, "--graph", saved]) == 0
    assert capsys.readouterr().out.startswith("Definition of entry in src.c (lines 7-10):\n")

    assert main(["graph", "query", "callers", "parse", "--graph", saved]) == 0
    assert capsys.readouterr().out == "Callers of parse: entry (line 9)\n"

    shutil.rmtree(snapshot)
    assert main(["graph", "query", "callees", "entry", "--graph", saved]) == 0
    assert capsys.readouterr().out == "Callees of entry: parse (line 9)\n"
    assert main(["graph", "query", "callers", "parse"]) == 2
    assert "--snapshot or --graph" in capsys.readouterr().err


def test_pair_run_eval_pipeline(tmp_path, capsys):
    root = str(tmp_path / "histories")
    write_history(
        root,
        "demo",
        [
            ("c1", {"src.c": SAFE}, "initial import"),
            ("c2", {"src.c": PARSE}, "drop length check"),
            ("c3", {"src.c": FIXED}, "bound the copy"),
        ],
    )
    manifest = str(tmp_path / "manifest.jsonl")
    write_jsonl(manifest, [{"cve_id": "CVE-2024-0042", "cwe_id": "CWE-787", "repo": "demo", "vul_fix_commit": "c3"}])
    samples_dir = str(tmp_path / "samples")

    assert main(["pair", "build", "--manifest", manifest, "--history-root", root, "-o", samples_dir]) == 0
    assert "1 samples, 0 rejected" in capsys.readouterr().out

    script = write_script(tmp_path / "replay.jsonl", ["vulnerable, CWE-787", "benign"])
    run_dir = str(tmp_path / "run")
    assert main(["run", "--samples", samples_dir, "-o", run_dir, "--script", script]) == 0
    assert "2 records, 0 aborts" in capsys.readouterr().out
    assert os.path.isfile(os.path.join(run_dir, "transcripts", "CVE-2024-0042.vul.txt"))

    csv_path = str(tmp_path / "histogram.csv")
    assert main(["eval", run_dir, "--format", "json", "--histogram-csv", csv_path]) == 0
    report = json.loads(capsys.readouterr().out)
    assert (report["pacc"], report["f1"], report["cla"]) == (1.0, 1.0, 1.0)
    assert os.path.isfile(csv_path)

    assert main(["eval", run_dir, run_dir]) == 0
    assert capsys.readouterr().out.count("100.00") == 4


def test_scan_command(tmp_path, capsys):
    snapshot = write_tree(tmp_path / "snap", {"src.c": PARSE})
    known = str(tmp_path / "known.jsonl")
    write_jsonl(known, [{"file": "src.c", "function": "parse"}])
    script = write_script(tmp_path / "replay.jsonl", ["vulnerable, CWE-787", "benign"])
    assert main(["scan", snapshot, "--known", known, "--script", script]) == 0
    out = capsys.readouterr().out
    assert "detected 1/1, marked 1/2" in out
    assert "VDR 1.0000  MFR 0.5000" in out


def test_failures_exit_with_status_two(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "missing")]) == 2
    assert "jitscan: error:" in capsys.readouterr().err

    samples_dir = str(tmp_path / "samples")
    os.makedirs(samples_dir)
    script = write_script(tmp_path / "replay.jsonl", ["benign"])
    args = ["run", "--samples", samples_dir, "-o", str(tmp_path / "run"), "--script", script, "--max-iterations", "0"]
    assert main(args) == 2
    assert "max_iterations" in capsys.readouterr().err

    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text('{"cve_id": "CVE-1"}\n{broken\n', encoding="utf-8")
    args = ["pair", "build", "--manifest", str(manifest), "--history-root", str(tmp_path), "-o", str(tmp_path / "out")]
    assert main(args) == 2
    assert "invalid JSON" in capsys.readouterr().err

"""Shared fixtures: synthetic C snapshots and commit histories on disk."""

import json
import os
import textwrap

import pytest

from app.agent import Templates, load_templates
from app.code_graph import SourceFile, build_graph


def write_tree(root, files):
    """Write {relative path: text} under `root`."""
    for rel, text in files.items():
        path = os.path.join(root, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    return str(root)


def write_history(root, repo, commits):
    """Write a directory history; `commits` is oldest first: (id, {path: text}[, message])."""
    repo_dir = os.path.join(root, repo)
    chain = []
    for seq, commit in enumerate(commits):
        commit_id, files = commit[0], commit[1]
        message = commit[2] if len(commit) > 2 else ""
        write_tree(os.path.join(repo_dir, "history", f"{seq:04d}_{commit_id}"), files)
        os.makedirs(os.path.join(repo_dir, "history", f"{seq:04d}_{commit_id}"), exist_ok=True)
        chain.append({"id": commit_id, "message": message})
    with open(os.path.join(repo_dir, "chain.json"), "w", encoding="utf-8") as f:
        json.dump(list(reversed(chain)), f)
    return repo_dir


def c(text):
    return textwrap.dedent(text).lstrip("\n")


def graph_of(files, snapshot_id="fixture"):
    return build_graph([SourceFile(path, text) for path, text in files.items()], snapshot_id)


def write_script(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps(entry) + "\n")
    return str(path)


# Small call graph used across the agent and retrieval tests
HELPER_FILES = {
    "main.c": c(
        """
        int main_fn(int n) {
            return helper(n);
        }
        int helper(int n)
        {
            char buf[8];
            memcpy(buf, &n, sizeof(n));
            return leaf(buf[0]);
        }
        int leaf(int v)
        {
            return v + 1;
        }
        """
    ),
}


@pytest.fixture
def helper_graph():
    return graph_of(HELPER_FILES)


@pytest.fixture
def tiny_templates():
    """Minimal templates so prompt goldens stay short."""
    shipped = load_templates()
    return Templates(
        prompts={
            "plain": "Check:\n{examples}```c\n{target_function}\n```\n\n{cot}Answer.",
            "dep_aug": "Check:\n{examples}```c\n{target_function}\n```\n\nDeps:\n{dependencies}\n\n{cot}Answer.",
            "react": "Tools: get_callers, get_callees, get_definition.\n{examples}```c\n{target_function}\n```\n\n{cot}Begin!",
        },
        examples=shipped.examples[:2],
    )

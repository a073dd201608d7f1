# app/utils/jsonl.py

import json
import os


def dumps(record):
    """Canonical one-line JSON used for every persisted record."""
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def read_jsonl(path):
    """Load every non-blank line of a JSONL file."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {e}") from e
    return records


def write_jsonl(path, records):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(dumps(record) + "\n")


def append_jsonl(path, record):
    """Append one record, creating the file (and its directory) if needed."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        f.write(dumps(record) + "\n")

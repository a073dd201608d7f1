"""
code_graph.py

Lexical function and call-site extraction for C-like repository snapshots.

A snapshot is parsed file by file: comments, string/char literals and
preprocessor lines are masked with spaces (newlines kept, so line numbers
survive), top-level `name(...) { ... }` blocks become FunctionDefs, and every
`identifier(` inside a body that is not a control keyword becomes a CallSite.
The resulting CallGraph answers the three interprocedural queries used by the
detectors: callers, callees and definition.

Bodies are sliced as whole lines from the signature line to the closing-brace
line. When one function opens on the line where another closes
(`} int b(void) {`), both bodies share that line, so each carries a fragment
of its neighbour and its braces no longer balance on their own. A change to
only one of them then shows up in both when snapshots are compared.
"""

import bisect
import hashlib
import json
import logging
import os
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, NamedTuple, Optional

from app.utils.constants import C_LIKE_EXTENSIONS, CALL_KEYWORDS

logger = logging.getLogger(__name__)

_IDENT_BEFORE_PAREN = re.compile(r"([A-Za-z_]\w*)\s*$")
_CALL_RE = re.compile(r"\b([A-Za-z_]\w*)[ \t]*\(")


# ----------------------
# Errors
# ----------------------
class GraphError(Exception):
    """Base class for call-graph failures."""


class UnbalancedBraces(GraphError):
    def __init__(self, file, line):
        super().__init__(f"{file}:{line}: brace block never closes")
        self.file = file
        self.line = line


class FunctionNotFound(GraphError):
    def __init__(self, name):
        super().__init__(f"function '{name}' not found.")
        self.name = name


class AmbiguousFunction(GraphError):
    def __init__(self, name, candidates):
        locations = ", ".join(f"{fn.file}:{fn.start_line}" for fn in candidates)
        super().__init__(f"function '{name}' is defined {len(candidates)} times ({locations})")
        self.name = name
        self.candidates = tuple(candidates)


# ----------------------
# Domain types
# ----------------------
@dataclass(frozen=True)
class SourceFile:
    path: str
    text: str
    language_hint: str = "c_like"


@dataclass(frozen=True)
class FunctionDef:
    name: str
    file: str
    start_line: int
    end_line: int
    body: str = field(repr=False)

    def contains(self, line):
        return self.start_line <= line <= self.end_line


@dataclass(frozen=True)
class CallSite:
    caller_file: str
    caller_name: str
    callee_name: str
    line: int
    resolved: bool = False


class Diagnostic(NamedTuple):
    file: str
    line: int
    message: str


class CallRef(NamedTuple):
    """One row of a callers/callees answer."""

    name: str
    line: int
    file: str
    resolved: bool = True


@dataclass(frozen=True)
class CallGraph:
    snapshot_id: str
    functions: tuple
    edges: tuple
    diagnostics: tuple = ()
    name_index: Mapping = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = defaultdict(list)
        for fn in self.functions:
            index[fn.name].append(fn)
        frozen = {name: tuple(defs) for name, defs in sorted(index.items())}
        object.__setattr__(self, "name_index", MappingProxyType(frozen))

    def caller_definition(self, edge):
        """The unique FunctionDef an edge was extracted from."""
        for fn in self.name_index.get(edge.caller_name, ()):
            if fn.file == edge.caller_file and fn.contains(edge.line):
                return fn
        raise FunctionNotFound(edge.caller_name)


# ----------------------
# Lexing
# ----------------------
def _blank(chars, start, end):
    for k in range(start, end):
        if chars[k] != "\n":
            chars[k] = " "


def _literal_end(text, start):
    """Offset just past the string/char literal opening at `start` (stops at end of line)."""
    quote = text[start]
    i = start + 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\":
            i += 2
            continue
        if ch == quote:
            return i + 1
        if ch == "\n":
            return i
        i += 1
    return n


def mask_source(text, strings=True, directives=True):
    """Replace comments (and optionally literals and preprocessor lines) with spaces.

    The result has the same length and the same newline positions as `text`.
    """
    chars = list(text)
    n = len(text)
    i = 0
    line_start = True
    while i < n:
        ch = text[i]
        nxt = text[i + 1] if i + 1 < n else ""
        if ch == "/" and nxt == "/":
            end = text.find("\n", i)
            end = n if end == -1 else end
            _blank(chars, i, end)
            i = end
            continue
        if ch == "/" and nxt == "*":
            end = text.find("*/", i + 2)
            end = n if end == -1 else end + 2
            _blank(chars, i, end)
            i = end
            continue
        if ch == '"' or ch == "'":
            end = _literal_end(text, i)
            if strings:
                _blank(chars, i, end)
            i = end
            line_start = False
            continue
        if ch == "#" and line_start and directives:
            end = i
            while True:
                nl = text.find("\n", end)
                if nl == -1:
                    end = n
                    break
                if text[nl - 1] == "\\" or (text[nl - 1] == "\r" and text[nl - 2] == "\\"):
                    end = nl + 1
                    continue
                end = nl
                break
            _blank(chars, i, end)
            i = end
            continue
        if ch == "\n":
            line_start = True
        elif not ch.isspace():
            line_start = False
        i += 1
    return "".join(chars)


class _LineIndex:
    def __init__(self, text):
        self.starts = [0]
        for match in re.finditer("\n", text):
            self.starts.append(match.end())

    def line_of(self, offset):
        return bisect.bisect_right(self.starts, offset)


def _function_header(masked, start, brace):
    """Return (name, signature_offset) if masked[start:brace] ends like `name(...)`."""
    j = brace - 1
    while j >= start and masked[j].isspace():
        j -= 1
    if j < start or masked[j] != ")":
        return None

    depth = 0
    while j >= start:
        c = masked[j]
        if c == ")":
            depth += 1
        elif c == "(":
            depth -= 1
            if depth == 0:
                break
        j -= 1
    if j < start:
        return None

    match = _IDENT_BEFORE_PAREN.search(masked, start, j)
    if not match or match.group(1) in CALL_KEYWORDS:
        return None

    sig = start
    while sig < brace and masked[sig].isspace():
        sig += 1
    return match.group(1), sig


def _scan_file(source):
    """Extract (functions, calls) from one file; raises UnbalancedBraces."""
    text = source.text
    masked = mask_source(text)
    lines = text.split("\n")
    index = _LineIndex(text)

    functions = []
    calls = []
    depth = 0
    boundary = 0
    header = None
    open_at = 0
    for i, ch in enumerate(masked):
        if ch == "{":
            if depth == 0:
                open_at = i
                header = _function_header(masked, boundary, i)
            depth += 1
        elif ch == "}":
            if depth == 0:
                raise UnbalancedBraces(source.path, index.line_of(i))
            depth -= 1
            if depth == 0:
                if header:
                    name, sig = header
                    start_line = index.line_of(sig)
                    end_line = index.line_of(i)
                    body = "\n".join(lines[start_line - 1:end_line])
                    functions.append(FunctionDef(name, source.path, start_line, end_line, body))
                    for match in _CALL_RE.finditer(masked, open_at + 1, i):
                        callee = match.group(1)
                        if callee in CALL_KEYWORDS:
                            continue
                        calls.append(CallSite(source.path, name, callee, index.line_of(match.start(1))))
                header = None
                boundary = i + 1
        elif ch == ";" and depth == 0:
            boundary = i + 1
    if depth > 0:
        raise UnbalancedBraces(source.path, index.line_of(open_at))

    functions.sort(key=lambda fn: (fn.start_line, fn.name))
    return functions, calls


def extract_functions(source):
    """Every top-level function definition in `source`, ordered by start_line."""
    if source.language_hint != "c_like":
        raise ValueError(f"Unsupported language hint: {source.language_hint}")
    functions, _ = _scan_file(source)
    return functions


# ----------------------
# Snapshots
# ----------------------
def language_of(path):
    return C_LIKE_EXTENSIONS.get(os.path.splitext(path)[1].lower())


def read_snapshot(root):
    """Load every C-like file under `root` as SourceFiles sorted by path."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"Missing snapshot directory: {root}")

    files = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for filename in sorted(filenames):
            hint = language_of(filename)
            if hint is None:
                continue
            full = os.path.join(dirpath, filename)
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            with open(full, "rb") as f:
                text = f.read().decode("utf-8", errors="replace")
            files.append(SourceFile(rel, text, hint))
    files.sort(key=lambda sf: sf.path)
    return tuple(files)


def snapshot_digest(snapshot):
    """Content hash of a snapshot, independent of where it was read from."""
    digest = hashlib.sha256()
    for source in sorted(snapshot, key=lambda sf: sf.path):
        digest.update(source.path.encode("utf-8"))
        digest.update(b"\0")
        digest.update(source.text.encode("utf-8"))
        digest.update(b"\0")
    return digest.hexdigest()


# ----------------------
# Graph construction
# ----------------------
def _safe_scan(source):
    try:
        return _scan_file(source), None
    except UnbalancedBraces as e:
        return ([], []), Diagnostic(e.file, e.line, "unbalanced braces; file skipped")


def build_graph(snapshot, snapshot_id, workers=1):
    """Build the immutable CallGraph of one snapshot."""
    if not snapshot_id:
        raise ValueError("snapshot_id must be nonempty")

    files = sorted(snapshot, key=lambda sf: sf.path)
    seen = set()
    for source in files:
        if source.path in seen:
            raise GraphError(f"duplicate path in snapshot: {source.path}")
        seen.add(source.path)

    if workers > 1 and len(files) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_scan, files))
    else:
        results = [_safe_scan(source) for source in files]

    functions = []
    calls = []
    diagnostics = []
    for (file_functions, file_calls), diagnostic in results:
        if diagnostic:
            logger.warning("%s:%s: %s", diagnostic.file, diagnostic.line, diagnostic.message)
            diagnostics.append(diagnostic)
            continue
        functions.extend(file_functions)
        calls.extend(file_calls)

    defined = {fn.name for fn in functions}
    edges = [replace(call, resolved=call.callee_name in defined) for call in calls]
    functions.sort(key=lambda fn: (fn.file, fn.start_line, fn.name))
    edges.sort(key=lambda e: (e.caller_file, e.line, e.caller_name, e.callee_name))
    logger.debug("graph %s: %d functions, %d edges", snapshot_id, len(functions), len(edges))
    return CallGraph(snapshot_id, tuple(functions), tuple(edges), tuple(diagnostics))


# ----------------------
# Queries
# ----------------------
def get_definition(graph, function_name, line=None):
    """Resolve a name (optionally pinned by a line inside it) to one FunctionDef.

    A line that no candidate contains is ignored, so call-site lines reported by
    get_callees can be passed back without harm.
    """
    candidates = graph.name_index.get(function_name, ())
    if not candidates:
        raise FunctionNotFound(function_name)
    if line is not None:
        containing = [fn for fn in candidates if fn.contains(line)]
        if len(containing) == 1:
            return containing[0]
        if len(containing) > 1:
            raise AmbiguousFunction(function_name, containing)
    if len(candidates) == 1:
        return candidates[0]
    raise AmbiguousFunction(function_name, candidates)


def get_callers(graph, function_name):
    refs = [
        CallRef(edge.caller_name, edge.line, edge.caller_file)
        for edge in graph.edges
        if edge.callee_name == function_name
    ]
    return sorted(refs, key=lambda r: (r.file, r.line, r.name))


def callees_of(graph, fn):
    refs = [
        CallRef(edge.callee_name, edge.line, edge.caller_file, edge.resolved)
        for edge in graph.edges
        if edge.caller_file == fn.file and edge.caller_name == fn.name and fn.contains(edge.line)
    ]
    return sorted(refs, key=lambda r: (r.line, r.name))


def get_callees(graph, function_name, line=None):
    """Calls made by `function_name`; unknown names give []."""
    try:
        fn = get_definition(graph, function_name, line)
    except FunctionNotFound:
        return []
    return callees_of(graph, fn)


# ----------------------
# Serialization
# ----------------------
def graph_to_dict(graph):
    return {
        "snapshot_id": graph.snapshot_id,
        "functions": [
            {"name": fn.name, "file": fn.file, "start_line": fn.start_line, "end_line": fn.end_line}
            for fn in graph.functions
        ],
        "edges": [
            {
                "caller_file": e.caller_file,
                "caller_name": e.caller_name,
                "callee": e.callee_name,
                "line": e.line,
                "resolved": e.resolved,
            }
            for e in graph.edges
        ],
        "diagnostics": [d._asdict() for d in graph.diagnostics],
    }


def dump_graph(graph):
    return json.dumps(graph_to_dict(graph), sort_keys=True, indent=2) + "\n"


def load_graph(data, snapshot=()):
    """Rebuild a CallGraph from its JSON form, re-slicing bodies from `snapshot`."""
    if isinstance(data, str):
        data = json.loads(data)
    texts = {source.path: source.text.split("\n") for source in snapshot}

    functions = []
    for item in data["functions"]:
        lines = texts.get(item["file"])
        body = "\n".join(lines[item["start_line"] - 1:item["end_line"]]) if lines else ""
        functions.append(FunctionDef(item["name"], item["file"], item["start_line"], item["end_line"], body))
    edges = [
        CallSite(e["caller_file"], e["caller_name"], e["callee"], e["line"], e["resolved"])
        for e in data["edges"]
    ]
    diagnostics = [Diagnostic(d["file"], d["line"], d["message"]) for d in data.get("diagnostics", [])]
    return CallGraph(data["snapshot_id"], tuple(functions), tuple(edges), tuple(diagnostics))

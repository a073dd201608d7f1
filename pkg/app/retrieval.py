"""
retrieval.py

Deterministic lexical retrieval of the callers and callees most similar to a
target function (Jaccard similarity over identifier sets).
"""

import re
from dataclasses import dataclass

from app.code_graph import (
    AmbiguousFunction,
    FunctionDef,
    FunctionNotFound,
    callees_of,
    get_callers,
    get_definition,
    mask_source,
)

_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+")


@dataclass(frozen=True)
class RankedDependency:
    function: FunctionDef
    relation: str
    score: float

    def __post_init__(self):
        if self.relation not in ("caller", "callee"):
            raise ValueError(f"relation must be caller or callee, got {self.relation!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of range: {self.score}")


def tokenize(body):
    """Distinct identifier tokens of `body`, ignoring comments and literals."""
    return frozenset(_TOKEN_RE.findall(mask_source(body, directives=False)))


def jaccard(a, b):
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _identity(fn):
    return fn.file, fn.name, fn.start_line


def _candidates(graph, target):
    """Resolved callers then callees of `target`, deduplicated, target excluded."""
    seen = {_identity(target)}
    found = []

    for ref in get_callers(graph, target.name):
        edge_caller = next(
            fn for fn in graph.name_index[ref.name] if fn.file == ref.file and fn.contains(ref.line)
        )
        if _identity(edge_caller) not in seen:
            seen.add(_identity(edge_caller))
            found.append((edge_caller, "caller"))

    for ref in callees_of(graph, target):
        if not ref.resolved:
            continue
        try:
            callee = get_definition(graph, ref.name)
        except FunctionNotFound:
            continue
        except AmbiguousFunction as e:
            # several definitions share the name: smallest (file, start_line) wins
            callee = e.candidates[0]
        if _identity(callee) not in seen:
            seen.add(_identity(callee))
            found.append((callee, "callee"))
    return found


def _rank(scored):
    return sorted(scored, key=lambda d: (-d.score, d.function.name, d.function.file, d.function.start_line))


def top_k_dependencies(graph, target, k=5, per_relation=False):
    """Up to k callers/callees of `target` ranked by Jaccard similarity.

    Pooled by default; with per_relation=True the k best callers are followed
    by the k best callees.
    """
    if k <= 0:
        return []
    target_tokens = tokenize(target.body)
    scored = [
        RankedDependency(fn, relation, jaccard(target_tokens, tokenize(fn.body)))
        for fn, relation in _candidates(graph, target)
    ]
    if not per_relation:
        return _rank(scored)[:k]
    callers = _rank([d for d in scored if d.relation == "caller"])[:k]
    callees = _rank([d for d in scored if d.relation == "callee"])[:k]
    return callers + callees

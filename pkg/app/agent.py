"""
agent.py

The three detector families over a ModelBackend:
  - Plain LLM: the target function alone.
  - Dep-Aug LLM: the target plus its Top-k most similar callers/callees.
  - ReAct Agent: Thought / Action / Action Input / Observation loop with the
    get_callers, get_callees and get_definition tools.

Prompts come from the plain-text templates in app/templates with the
{target_function}, {dependencies}, {examples} and {cot} placeholders.
"""

import functools
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Optional

from app.backends import BackendError
from app.code_graph import (
    AmbiguousFunction,
    GraphError,
    callees_of,
    get_callers,
    get_definition,
)
from app.retrieval import top_k_dependencies
from app.utils.config import TEMPLATES_DIR
from app.utils.constants import COT_INSTRUCTION, STRATEGIES, TOOL_NAMES

logger = logging.getLogger(__name__)

PROMPT_KINDS = ("plain", "dep_aug", "react")
PLACEHOLDERS = ("target_function", "dependencies", "examples", "cot")
REQUIRED_PLACEHOLDERS = {
    "plain": ("target_function", "examples", "cot"),
    "dep_aug": ("target_function", "dependencies", "examples", "cot"),
    "react": ("target_function", "examples", "cot"),
}
NO_DEPENDENCIES = "No dependencies retrieved."
FORMAT_REMINDER = (
    'Invalid format: {reason}. Reply with an "Action:" line followed by an '
    '"Action Input:" line, or with a "Final Answer:" line.'
)

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")
_FEW_SHOT_SECTIONS = {
    "### Vulnerable Code": "vulnerable_code",
    "### Vulnerable Explanation": "vulnerable_explanation",
    "### Benign Code": "benign_code",
    "### Benign Explanation": "benign_explanation",
}
_ACTION_RE = re.compile(r"^\s*Action\s*:\s*(.*?)\s*$")
_ACTION_INPUT_RE = re.compile(r"^\s*Action\s+Input\s*:\s*(.*?)\s*$")
_FINAL_RE = re.compile(r"^\s*Final\s+Answer\s*:\s*(.*)$")
_ARGUMENT_RE = re.compile(r"""^[`'"]?([A-Za-z_]\w*)(?:\(\))?[`'"]?\s*(?:,\s*line\s*(\d+))?$""", re.IGNORECASE)
_LABEL_RE = re.compile(r"\b(vulnerable|benign)\b", re.IGNORECASE)
_CWE_RE = re.compile(r"\bCWE[-_ ]?(\d+)\b", re.IGNORECASE)
_CWE_ID_RE = re.compile(r"^CWE-\d+$")


# ----------------------
# Errors
# ----------------------
class AgentError(Exception):
    """Base class for detector failures."""


class MissingTemplate(AgentError):
    pass


class PlaceholderUnresolved(AgentError):
    pass


class NoLabelFound(AgentError):
    pass


# ----------------------
# Strategies and templates
# ----------------------
@dataclass(frozen=True)
class Strategy:
    cot: bool = False
    few_shot: bool = False

    @classmethod
    def from_name(cls, name):
        if isinstance(name, Strategy):
            return name
        if name not in STRATEGIES:
            raise ValueError(f"Unknown strategy: {name}")
        return cls(cot=name in ("cot", "cot_fs"), few_shot=name in ("fs", "cot_fs"))

    @property
    def name(self):
        if self.cot and self.few_shot:
            return "cot_fs"
        if self.cot:
            return "cot"
        if self.few_shot:
            return "fs"
        return "vanilla"


@dataclass(frozen=True)
class FewShotExample:
    cwe_id: str
    vulnerable_code: str
    vulnerable_explanation: str
    benign_code: str
    benign_explanation: str

    def __post_init__(self):
        if not self.vulnerable_code.strip() or not self.benign_code.strip():
            raise MissingTemplate(f"few-shot example {self.cwe_id} has an empty code section")


@dataclass(frozen=True)
class Templates:
    prompts: dict
    examples: tuple


def parse_few_shot(text, source="<few-shot>"):
    """Parse one few-shot file: a `CWE: ...` line, then the four ### sections."""
    cwe_id = None
    sections = {}
    current = None
    for line in text.splitlines():
        stripped = line.strip()
        if current is None and stripped.upper().startswith("CWE:"):
            cwe_id = stripped.split(":", 1)[1].strip().upper()
            continue
        if stripped in _FEW_SHOT_SECTIONS:
            current = _FEW_SHOT_SECTIONS[stripped]
            sections[current] = []
            continue
        if current is not None:
            sections[current].append(line)

    missing = [name for name in _FEW_SHOT_SECTIONS.values() if name not in sections]
    if not cwe_id or missing:
        raise MissingTemplate(f"{source}: needs a CWE line and sections {', '.join(_FEW_SHOT_SECTIONS)}")
    values = {name: "\n".join(lines).strip("\n") for name, lines in sections.items()}
    return FewShotExample(cwe_id=cwe_id, **values)


@functools.lru_cache(maxsize=8)
def load_templates(templates_dir=TEMPLATES_DIR):
    prompts = {}
    for kind in PROMPT_KINDS:
        path = os.path.join(templates_dir, f"{kind}.txt")
        if not os.path.isfile(path):
            raise MissingTemplate(f"Missing template file: {path}")
        with open(path, "r", encoding="utf-8") as f:
            prompts[kind] = f.read().rstrip("\n")

    few_shot_dir = os.path.join(templates_dir, "few_shot")
    if not os.path.isdir(few_shot_dir):
        raise MissingTemplate(f"Missing few-shot directory: {few_shot_dir}")
    examples = []
    for name in sorted(os.listdir(few_shot_dir)):
        if not name.endswith(".txt"):
            continue
        path = os.path.join(few_shot_dir, name)
        with open(path, "r", encoding="utf-8") as f:
            examples.append(parse_few_shot(f.read(), path))
    if not examples:
        raise MissingTemplate(f"No few-shot examples in {few_shot_dir}")
    return Templates(prompts, tuple(examples))


# ----------------------
# Prompt assembly
# ----------------------
def render_examples(examples):
    blocks = []
    for number, example in enumerate(examples, start=1):
        blocks.append(
            f"Example {number} ({example.cwe_id})\n"
            f"Vulnerable code:\n```c\n{example.vulnerable_code}\n```\n"
            f"Why it is vulnerable: {example.vulnerable_explanation}\n"
            f"Benign code:\n```c\n{example.benign_code}\n```\n"
            f"Why it is benign: {example.benign_explanation}"
        )
    return "Here are examples of vulnerable functions and their fixed versions:\n\n" + "\n\n".join(blocks) + "\n\n"


def render_dependencies(deps):
    if not deps:
        return NO_DEPENDENCIES
    blocks = []
    for dep in deps:
        fn = dep.function
        blocks.append(
            f"[{dep.relation}] {fn.name} ({fn.file}, lines {fn.start_line}-{fn.end_line}, "
            f"similarity {dep.score:.2f})\n```c\n{fn.body}\n```"
        )
    return "\n\n".join(blocks)


def build_prompt(kind, strategy, target_body, deps=None, templates=None):
    """Fill the `kind` template for `strategy` around `target_body`."""
    if kind not in PROMPT_KINDS:
        raise ValueError(f"Unknown prompt kind: {kind}")
    if (deps is not None) != (kind == "dep_aug"):
        raise ValueError("deps must be given for dep_aug prompts and only for them")
    strategy = Strategy.from_name(strategy)
    templates = templates or load_templates()
    template = templates.prompts.get(kind)
    if template is None:
        raise MissingTemplate(f"No template for {kind}")

    present = set(_PLACEHOLDER_RE.findall(template))
    unknown = sorted(present - set(PLACEHOLDERS))
    missing = [name for name in REQUIRED_PLACEHOLDERS[kind] if name not in present]
    if unknown or missing:
        raise PlaceholderUnresolved(
            f"{kind} template: unknown {unknown or 'none'}, missing {missing or 'none'}"
        )

    values = {
        "target_function": target_body,
        "dependencies": render_dependencies(deps) if kind == "dep_aug" else "",
        "examples": render_examples(templates.examples) if strategy.few_shot else "",
        "cot": COT_INSTRUCTION + "\n\n" if strategy.cot else "",
    }
    # one pass, so placeholder-like text inside code bodies is left alone
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template)


# ----------------------
# Completion parsing
# ----------------------
@dataclass(frozen=True)
class ToolCall:
    tool: str
    argument: str
    line: Optional[int] = None

    def __post_init__(self):
        if self.tool not in TOOL_NAMES:
            raise ValueError(f"Unknown tool: {self.tool}")
        if not self.argument:
            raise ValueError("Tool argument must be nonempty")

    def render(self):
        suffix = f", line {self.line}" if self.line is not None else ""
        return f"Action: {self.tool}\nAction Input: {self.argument}{suffix}"


@dataclass(frozen=True)
class FinalAnswer:
    text: str


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    text: str = ""


def parse_action(completion_text):
    """First `Action:` or `Final Answer:` line wins; anything else is a ParseFailure."""
    lines = completion_text.splitlines()
    for pos, line in enumerate(lines):
        final = _FINAL_RE.match(line)
        if final:
            rest = "\n".join([final.group(1)] + lines[pos + 1:]).strip()
            return FinalAnswer(rest)

        action = _ACTION_RE.match(line)
        if not action:
            continue
        tool = action.group(1).strip("`'\" ")
        if tool not in TOOL_NAMES:
            return ParseFailure(f"unknown tool {tool!r}", completion_text)
        for follow in lines[pos + 1:]:
            action_input = _ACTION_INPUT_RE.match(follow)
            if action_input:
                argument = _ARGUMENT_RE.match(action_input.group(1))
                if not argument:
                    return ParseFailure(f"cannot read Action Input {action_input.group(1)!r}", completion_text)
                line_no = int(argument.group(2)) if argument.group(2) else None
                return ToolCall(tool, argument.group(1), line_no)
            if _ACTION_RE.match(follow) or _FINAL_RE.match(follow):
                break
        return ParseFailure("Action without Action Input", completion_text)
    return ParseFailure("no Action or Final Answer found", completion_text)


def extract_thought(completion_text):
    """Text before the first Action/Final Answer line, without its `Thought:` prefix."""
    kept = []
    for line in completion_text.splitlines():
        if _ACTION_RE.match(line) or _FINAL_RE.match(line) or _ACTION_INPUT_RE.match(line):
            break
        kept.append(line)
    thought = "\n".join(kept).strip()
    if thought.lower().startswith("thought:"):
        thought = thought[len("thought:"):].strip()
    return thought


@dataclass(frozen=True)
class Verdict:
    label: str
    cwe: Optional[str] = None
    raw_answer: str = ""
    fallback: bool = False

    def __post_init__(self):
        if self.label not in ("vul", "ben"):
            raise ValueError(f"label must be vul or ben, got {self.label!r}")
        if self.cwe is not None and not _CWE_ID_RE.match(self.cwe):
            raise ValueError(f"malformed CWE identifier: {self.cwe!r}")


def parse_verdict(final_text):
    label = _LABEL_RE.search(final_text)
    if not label:
        raise NoLabelFound(f"no vulnerable/benign label in {final_text[:80]!r}")
    cwe = _CWE_RE.search(final_text)
    return Verdict(
        label="vul" if label.group(1).lower() == "vulnerable" else "ben",
        cwe=f"CWE-{cwe.group(1)}" if cwe else None,
        raw_answer=final_text,
    )


# ----------------------
# Transcripts
# ----------------------
@dataclass
class Step:
    kind: str  # thought | action | observation | format_error | final | abort
    text: str = ""
    call: Optional[ToolCall] = None
    verdict: Optional[Verdict] = None


@dataclass
class Transcript:
    detector: str
    prompt: str = ""
    steps: list = field(default_factory=list)
    prompt_chars: int = 0
    completion_chars: int = 0
    backend_calls: int = 0

    @property
    def tool_invocations(self):
        return sum(1 for step in self.steps if step.kind == "action")

    @property
    def aborted(self):
        return bool(self.steps) and self.steps[-1].kind == "abort"

    @property
    def verdict(self):
        if self.steps and self.steps[-1].kind == "final":
            return self.steps[-1].verdict
        return None

    @property
    def fallback(self):
        verdict = self.verdict
        return bool(verdict and verdict.fallback)

    def add(self, kind, text="", call=None, verdict=None):
        self.steps.append(Step(kind, text, call, verdict))

    def ask(self, backend, prompt, temperature):
        """One backend call with char accounting; BackendError propagates."""
        self.backend_calls += 1
        self.prompt_chars += len(prompt)
        completion = backend.complete(prompt, temperature=temperature)
        self.completion_chars += len(completion)
        return completion

    def scratchpad(self):
        """Steps as fed back to the model on the next ReAct iteration."""
        parts = []
        for step in self.steps:
            if step.kind == "thought":
                parts.append(f"Thought: {step.text}")
            elif step.kind == "action":
                parts.append(step.call.render())
            elif step.kind in ("observation", "format_error"):
                parts.append(f"Observation: {step.text}")
        return "\n".join(parts)

    def render(self):
        lines = [
            f"Detector: {self.detector}",
            f"Backend calls: {self.backend_calls}",
            f"Prompt chars: {self.prompt_chars}",
            f"Completion chars: {self.completion_chars}",
            f"Tool invocations: {self.tool_invocations}",
            "",
            "=== Prompt ===",
            self.prompt,
            "",
            "=== Trace ===",
        ]
        for step in self.steps:
            if step.kind == "thought":
                lines.append(f"Thought: {step.text}")
            elif step.kind == "action":
                lines.append(step.call.render())
            elif step.kind == "observation":
                lines.append(f"Observation: {step.text}")
            elif step.kind == "format_error":
                lines.append(f"Format Error: {step.text}")
            elif step.kind == "final":
                answer = step.verdict.raw_answer or step.verdict.label
                lines.append(f"Final Answer: {answer}")
                if step.verdict.fallback:
                    lines.append(f"Fallback: {step.text}")
            elif step.kind == "abort":
                lines.append(f"Abort: {step.text}")
        return "\n".join(lines) + "\n"


# ----------------------
# Tool dispatch
# ----------------------
def _where(graph, file, line):
    multi_file = len({fn.file for fn in graph.functions}) > 1
    return f"{file}, line {line}" if multi_file else f"line {line}"


def _pick(graph, name, line):
    """(definition, note) with the smallest (file, start_line) winning ties."""
    try:
        return get_definition(graph, name, line), ""
    except AmbiguousFunction as e:
        fn = min(e.candidates, key=lambda c: (c.file, c.start_line))
        note = (
            f"\nNote: {name} is defined {len(e.candidates)} times; showing {fn.file}:{fn.start_line}. "
            f'Use "{name}, line <n>" to pick another definition.'
        )
        return fn, note


def dispatch_tool(graph, call):
    """Run one tool call against `graph`; failures come back as observation text."""
    try:
        if call.tool == "get_callers":
            refs = get_callers(graph, call.argument)
            if not refs:
                return "No callers found."
            listed = ", ".join(f"{r.name} ({_where(graph, r.file, r.line)})" for r in refs)
            return f"Callers of {call.argument}: {listed}"

        fn, note = _pick(graph, call.argument, call.line)
        if call.tool == "get_callees":
            refs = callees_of(graph, fn)
            if not refs:
                return "No callees found." + note
            listed = ", ".join(
                f"{r.name} ({_where(graph, r.file, r.line)}{'' if r.resolved else ', external'})" for r in refs
            )
            return f"Callees of {call.argument}: {listed}{note}"

        return f"Definition of {fn.name} in {fn.file} (lines {fn.start_line}-{fn.end_line}):\n{fn.body}{note}"
    except GraphError as e:
        return f"Error: {e}"


# ----------------------
# Detectors
# ----------------------
def _finish(transcript, answer_text, fallback_reason):
    """Append the final step for `answer_text`; unlabeled answers fall back to ben."""
    try:
        verdict = parse_verdict(answer_text)
        transcript.add("final", verdict=verdict)
    except NoLabelFound:
        logger.warning("%s: %s; defaulting to benign", transcript.detector, fallback_reason)
        verdict = Verdict("ben", raw_answer=answer_text, fallback=True)
        transcript.add("final", fallback_reason, verdict=verdict)
    return verdict


def _fallback(transcript, reason):
    logger.warning("%s: %s; defaulting to benign", transcript.detector, reason)
    verdict = Verdict("ben", fallback=True)
    transcript.add("final", reason, verdict=verdict)
    return verdict


def _abort(transcript, error):
    logger.warning("%s: backend failed: %s", transcript.detector, error)
    transcript.add("abort", str(error))
    return None, transcript


def _single_shot(detector, backend, prompt, temperature):
    transcript = Transcript(detector, prompt)
    try:
        completion = transcript.ask(backend, prompt, temperature)
    except BackendError as e:
        return _abort(transcript, e)

    answer = completion
    final = re.search(r"^\s*Final\s+Answer\s*:", completion, re.MULTILINE)
    if final:
        thought = completion[:final.start()].strip()
        if thought:
            transcript.add("thought", thought)
        answer = completion[final.end():].strip()
    return _finish(transcript, answer, "no label in answer"), transcript


def run_plain(backend, strategy, target_body, templates=None, temperature=0.0):
    prompt = build_prompt("plain", strategy, target_body, templates=templates)
    return _single_shot("plain", backend, prompt, temperature)


def run_dep_aug(
    backend, strategy, graph, target, k=5, per_relation=False, target_body=None, templates=None, temperature=0.0
):
    deps = top_k_dependencies(graph, target, k=k, per_relation=per_relation)
    logger.debug("dep_aug %s: %d dependencies", target.name, len(deps))
    body = target.body if target_body is None else target_body
    prompt = build_prompt("dep_aug", strategy, body, deps=deps, templates=templates)
    return _single_shot("dep_aug", backend, prompt, temperature)


def run_react(
    backend,
    strategy,
    graph,
    target,
    max_iterations=10,
    max_parse_retries=2,
    target_body=None,
    templates=None,
    temperature=0.0,
):
    """ReAct loop; returns (Verdict, Transcript), or (None, Transcript) on backend failure."""
    if max_iterations < 1:
        raise ValueError("max_iterations must be at least 1")
    body = target.body if target_body is None else target_body
    base = build_prompt("react", strategy, body, templates=templates)
    transcript = Transcript("react", base)

    for _ in range(max_iterations):
        retries = 0
        while True:
            pad = transcript.scratchpad()
            prompt = f"{base}\n\n{pad}" if pad else base
            try:
                completion = transcript.ask(backend, prompt, temperature)
            except BackendError as e:
                return _abort(transcript, e)
            parsed = parse_action(completion)
            if not isinstance(parsed, ParseFailure):
                break
            transcript.add("format_error", FORMAT_REMINDER.format(reason=parsed.reason))
            retries += 1
            if retries > max_parse_retries:
                return _fallback(transcript, f"format retries exhausted ({parsed.reason})"), transcript

        thought = extract_thought(completion)
        if thought:
            transcript.add("thought", thought)
        if isinstance(parsed, FinalAnswer):
            return _finish(transcript, parsed.text, "no label in final answer"), transcript

        observation = dispatch_tool(graph, parsed)
        logger.debug("react %s(%s) -> %d chars", parsed.tool, parsed.argument, len(observation))
        transcript.add("action", call=parsed)
        transcript.add("observation", observation)

    return _fallback(transcript, f"no final answer within {max_iterations} iterations"), transcript

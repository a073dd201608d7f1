# app/utils/constants.py

# Identifiers followed by "(" that never start a call site
CALL_KEYWORDS = frozenset({"if", "for", "while", "switch", "return", "sizeof", "do", "else"})

# File extensions treated as C-like source
C_LIKE_EXTENSIONS = {
    ".c": "c_like",
    ".h": "c_like",
    ".cc": "c_like",
    ".cpp": "c_like",
    ".cxx": "c_like",
    ".hh": "c_like",
    ".hpp": "c_like",
}

# Tools the ReAct detector may call
TOOL_NAMES = ("get_callers", "get_callees", "get_definition")

# Inserted at the {cot} anchor of every template
COT_INSTRUCTION = "Solve this problem step by step."

DETECTORS = ("plain", "dep_aug", "react")
STRATEGIES = ("vanilla", "cot", "fs", "cot_fs")

# Display names used by the report table
DETECTOR_LABELS = {
    "plain": "Plain LLM",
    "dep_aug": "Dep-Aug LLM",
    "react": "ReAct Agent",
}
STRATEGY_LABELS = {
    "vanilla": "vanilla",
    "cot": "w/ CoT",
    "fs": "w/ FS",
    "cot_fs": "w/ CoT+FS",
}

# Default run settings, overridable from jitscan_config.json and CLI flags
DEFAULT_RUN_SETTINGS = {
    "detector": "plain",
    "strategy": "vanilla",
    "max_iterations": 10,
    "max_parse_retries": 2,
    "k": 5,
    "per_relation": False,
    "parallelism": 1,
    "temperature": 0.0,
}

# Gateway backend defaults
DEFAULT_MODEL_TIMEOUT = 60.0

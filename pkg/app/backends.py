"""
backends.py

Model backends the detectors talk to. Every backend exposes
`complete(prompt, temperature=0.0) -> str`.

  - ScriptedBackend replays a list of completions in order (tests, replays).
  - KeyedScript holds one completion list per sample key and hands out a
    fresh ScriptedBackend per key, so samples can run concurrently.
  - GatewayBackend posts {"prompt", "temperature"} to one HTTP endpoint and
    reads {"text"} back.
"""

import json
import logging
import threading
from abc import ABC, abstractmethod

import requests

from app.utils.config import ConfigError, model_endpoint

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """The model could not produce a completion (timeout, transport, exhausted script)."""


# ----------------------
# Interface
# ----------------------
class ModelBackend(ABC):
    # False means one detector run at a time; the harness serializes around it
    concurrent_safe = True

    @abstractmethod
    def complete(self, prompt, temperature=0.0):
        """Return the completion text for `prompt`."""

    def for_key(self, key):
        """Backend to use for one sample version (same backend unless keyed)."""
        return self


# ----------------------
# Scripted replay
# ----------------------
def _entry_text(entry):
    if isinstance(entry, str):
        return {"text": entry}
    if isinstance(entry, dict) and ("text" in entry or "error" in entry):
        return {k: entry[k] for k in ("text", "error") if k in entry}
    raise ValueError(f"Script entry must be a string or hold 'text'/'error': {entry!r}")


class ScriptedBackend(ModelBackend):
    """Replays completions in order; an {"error": ...} entry raises BackendError."""

    concurrent_safe = False

    def __init__(self, completions):
        self.completions = [_entry_text(entry) for entry in completions]
        self.prompts = []
        self._pos = 0
        self._lock = threading.Lock()

    def complete(self, prompt, temperature=0.0):
        with self._lock:
            self.prompts.append(prompt)
            if self._pos >= len(self.completions):
                raise BackendError(f"script exhausted after {len(self.completions)} completions")
            entry = self.completions[self._pos]
            self._pos += 1
        if "error" in entry:
            raise BackendError(entry["error"])
        return entry["text"]

    @property
    def remaining(self):
        return len(self.completions) - self._pos


class KeyedScript(ModelBackend):
    """Per-key scripts: `for_key` returns an independent ScriptedBackend."""

    def __init__(self, scripts):
        self.scripts = {key: list(entries) for key, entries in scripts.items()}

    def complete(self, prompt, temperature=0.0):
        raise BackendError("keyed script used without a key")

    def for_key(self, key):
        if key not in self.scripts:
            logger.debug("No scripted completions for %s", key)
        return ScriptedBackend(self.scripts.get(key, []))


def load_script(path):
    """Read a replay JSONL file into a ScriptedBackend or a KeyedScript.

    Each line is a JSON string (the completion) or an object with "text" or
    "error" and an optional "key". Either every line carries a key or none does.
    """
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{line_no}: invalid JSON: {e}") from e

    keyed = [isinstance(entry, dict) and "key" in entry for entry in entries]
    if any(keyed) and not all(keyed):
        raise ConfigError(f"{path}: mixes keyed and unkeyed completions")
    try:
        if entries and all(keyed):
            scripts = {}
            for entry in entries:
                scripts.setdefault(entry["key"], []).append(_entry_text(entry))
            return KeyedScript(scripts)
        return ScriptedBackend(entries)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


# ----------------------
# HTTP gateway
# ----------------------
class GatewayBackend(ModelBackend):
    def __init__(self, url, key=None, timeout=60.0):
        self.url = url
        self.key = key
        self.timeout = timeout

    @classmethod
    def from_env(cls):
        url, key, timeout = model_endpoint()
        if not url:
            raise ConfigError("JITSCAN_MODEL_URL is not set")
        return cls(url, key, timeout)

    def complete(self, prompt, temperature=0.0):
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        try:
            response = requests.post(
                self.url,
                json={"prompt": prompt, "temperature": temperature},
                headers=headers,
                timeout=self.timeout,
            )
            response.raise_for_status()
            text = response.json()["text"]
        except requests.Timeout as e:
            raise BackendError(f"model gateway timed out after {self.timeout}s") from e
        except (requests.RequestException, ValueError, KeyError, TypeError) as e:
            raise BackendError(f"model gateway error: {e}") from e
        if not isinstance(text, str):
            raise BackendError("model gateway returned a non-text completion")
        return text

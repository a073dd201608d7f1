"""
history.py

Builds pairwise (vulnerable, benign) samples from a repository's commit history.

For each manifest entry the fix commit is compared with its parent to find the
single function it modified (f_ben after, f_vul before), then the history is
walked backward from the parent until the commit that last turned the function
into its f_vul form. That commit is the vul-intro commit.

History access goes through a SnapshotProvider:
  - DirectoryHistoryProvider: <root>/<repo>/chain.json + <root>/<repo>/history/<seq>_<id>/...
  - GitHistoryProvider: a real git checkout at <root>/<repo>, first-parent order
"""

import json
import logging
import os
import re
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import git
from tqdm import tqdm

from app.code_graph import (
    SourceFile,
    UnbalancedBraces,
    extract_functions,
    language_of,
    mask_source,
    read_snapshot,
)
from app.utils.jsonl import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

GIT_REF_PREFIX = "git:"
MANIFEST_FIELDS = ("cve_id", "cwe_id", "repo", "vul_fix_commit", "file_hint", "sample_id")
_WHITESPACE = re.compile(r"\s+")


# ----------------------
# Errors
# ----------------------
class HistoryError(Exception):
    """Base class for history failures."""


class SnapshotUnavailable(HistoryError):
    pass


class SampleRejected(HistoryError):
    """A manifest entry that cannot become a pairwise sample."""


class InvalidManifestEntry(SampleRejected):
    pass


class NoFunctionChanged(SampleRejected):
    pass


class MultipleFunctionsChanged(SampleRejected):
    def __init__(self, changed):
        names = ", ".join(f"{file}:{name}" for file, name in changed)
        super().__init__(f"{len(changed)} functions changed: {names}")
        self.changed = tuple(changed)


class FunctionNotUnique(SampleRejected):
    pass


class TargetMissingAtHead(SampleRejected):
    pass


# ----------------------
# Domain types
# ----------------------
@dataclass(frozen=True)
class CommitRef:
    id: str
    parent: Optional[str]
    snapshot_ref: str
    message: str = ""


@dataclass(frozen=True)
class HistoryView:
    """A commit and its first-parent ancestors, child before parent."""

    chain: tuple

    def __post_init__(self):
        if not self.chain:
            raise HistoryError("empty history")
        for child, parent in zip(self.chain, self.chain[1:]):
            if child.parent != parent.id:
                raise HistoryError(f"broken chain: {child.id} does not descend from {parent.id}")

    @property
    def head(self):
        return self.chain[0]

    def from_parent(self):
        if len(self.chain) < 2:
            raise NoFunctionChanged(f"commit {self.head.id} has no parent")
        return HistoryView(self.chain[1:])


@dataclass(frozen=True)
class FunctionBody:
    verbatim: str
    normalized: str

    @classmethod
    def of(cls, text):
        return cls(text, normalize_body(text))


@dataclass(frozen=True)
class VulIntro:
    commit: CommitRef
    root_introduced: bool = False


@dataclass(frozen=True)
class ManifestEntry:
    cve_id: str
    cwe_id: str
    repo: str
    vul_fix_commit: str
    file_hint: Optional[str] = None
    sample_id: Optional[str] = None

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise InvalidManifestEntry(f"expected an object, got {type(data).__name__}")
        missing = [key for key in ("cve_id", "cwe_id", "repo", "vul_fix_commit") if not data.get(key)]
        if missing:
            raise InvalidManifestEntry(f"missing fields: {', '.join(missing)}")
        wrong = [key for key in MANIFEST_FIELDS if data.get(key) is not None and not isinstance(data[key], str)]
        if wrong:
            raise InvalidManifestEntry(f"fields must be strings: {', '.join(wrong)}")
        return cls(
            cve_id=data["cve_id"],
            cwe_id=data["cwe_id"],
            repo=data["repo"],
            vul_fix_commit=data["vul_fix_commit"],
            file_hint=data.get("file_hint") or None,
            sample_id=data.get("sample_id") or None,
        )


@dataclass(frozen=True)
class PairwiseSample:
    sample_id: str
    cve_id: str
    cwe_id: str
    file: str
    function_name: str
    f_vul: FunctionBody
    f_ben: FunctionBody
    vul_intro: CommitRef
    vul_fix: CommitRef
    r_intro: str
    r_fix: str
    intro_at_root: bool = False

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "cve_id": self.cve_id,
            "cwe_id": self.cwe_id,
            "file": self.file,
            "function_name": self.function_name,
            "vul_intro_commit": self.vul_intro.id,
            "vul_fix_commit": self.vul_fix.id,
            "r_intro": self.r_intro,
            "r_fix": self.r_fix,
            "intro_at_root": self.intro_at_root,
        }


# ----------------------
# Body normalization
# ----------------------
def normalize_body(text):
    """Drop comments, collapse whitespace runs to one space, trim."""
    without_comments = mask_source(text, strings=False, directives=False)
    return _WHITESPACE.sub(" ", without_comments).strip()


# ----------------------
# Snapshot providers
# ----------------------
class SnapshotProvider(ABC):
    @abstractmethod
    def history(self, repo, commit_id):
        """HistoryView whose head is `commit_id`."""

    @abstractmethod
    def read_file(self, commit, path):
        """Text of `path` at `commit`, or None when the file does not exist."""

    def snapshot(self, commit):
        return read_snapshot_ref(commit.snapshot_ref)


class DirectoryHistoryProvider(SnapshotProvider):
    """Histories stored as one directory per commit plus a chain.json."""

    def __init__(self, root):
        self.root = root
        self._chains = {}
        self._lock = threading.Lock()

    def _load_chain(self, repo):
        with self._lock:
            if repo in self._chains:
                return self._chains[repo]

        repo_dir = os.path.join(self.root, repo)
        chain_path = os.path.join(repo_dir, "chain.json")
        history_dir = os.path.join(repo_dir, "history")
        if not os.path.isfile(chain_path) or not os.path.isdir(history_dir):
            raise SnapshotUnavailable(f"no history for repo {repo!r} under {self.root}")

        dirs = {}
        for name in sorted(os.listdir(history_dir)):
            seq, sep, commit_id = name.partition("_")
            if sep and commit_id:
                dirs[commit_id] = os.path.join(history_dir, name)

        ids = []
        messages = {}
        try:
            with open(chain_path, "r", encoding="utf-8") as f:
                entries = json.load(f)
            for entry in entries:
                if isinstance(entry, str):
                    ids.append(entry)
                else:
                    ids.append(entry["id"])
                    messages[entry["id"]] = entry.get("message", "")
        except (ValueError, KeyError, TypeError, AttributeError) as e:
            raise SnapshotUnavailable(f"malformed {chain_path}: {e}") from e

        commits = []
        for pos, commit_id in enumerate(ids):
            if commit_id not in dirs:
                raise SnapshotUnavailable(f"commit {commit_id} listed in {chain_path} has no directory")
            parent = ids[pos + 1] if pos + 1 < len(ids) else None
            commits.append(CommitRef(commit_id, parent, dirs[commit_id], messages.get(commit_id, "")))

        chain = tuple(commits)
        with self._lock:
            self._chains[repo] = chain
        return chain

    def history(self, repo, commit_id):
        chain = self._load_chain(repo)
        for pos, commit in enumerate(chain):
            if commit.id == commit_id:
                return HistoryView(chain[pos:])
        raise SnapshotUnavailable(f"unknown commit {commit_id} in repo {repo!r}")

    def read_file(self, commit, path):
        full = os.path.join(commit.snapshot_ref, path)
        if not os.path.isfile(full):
            return None
        with open(full, "rb") as f:
            return f.read().decode("utf-8", errors="replace")


class GitHistoryProvider(SnapshotProvider):
    """Histories read from git checkouts at <root>/<repo>, first-parent order."""

    def __init__(self, root):
        self.root = root

    def history(self, repo, commit_id):
        repo_path = os.path.abspath(os.path.join(self.root, repo))
        try:
            repository = _open_repo(repo_path)
            commits = list(repository.iter_commits(commit_id, first_parent=True))
        except (git.exc.GitError, ValueError) as e:
            raise SnapshotUnavailable(f"cannot read history of {repo_path} at {commit_id}: {e}") from e

        chain = []
        for pos, commit in enumerate(commits):
            parent = commits[pos + 1].hexsha if pos + 1 < len(commits) else None
            chain.append(
                CommitRef(commit.hexsha, parent, f"{GIT_REF_PREFIX}{repo_path}@{commit.hexsha}", commit.message.strip())
            )
        return HistoryView(tuple(chain))

    def read_file(self, commit, path):
        repo_path, sha = _split_git_ref(commit.snapshot_ref)
        try:
            blob = _open_repo(repo_path).commit(sha).tree / path
        except KeyError:
            return None
        except (git.exc.GitError, ValueError) as e:
            raise SnapshotUnavailable(f"cannot read {path} at {sha}: {e}") from e
        return blob.data_stream.read().decode("utf-8", errors="replace")


_repos = {}
_repos_lock = threading.Lock()


def _open_repo(repo_path):
    with _repos_lock:
        if repo_path not in _repos:
            _repos[repo_path] = git.Repo(repo_path)
        return _repos[repo_path]


def _split_git_ref(ref):
    repo_path, sep, sha = ref[len(GIT_REF_PREFIX):].rpartition("@")
    if not sep or not repo_path or not sha:
        raise SnapshotUnavailable(f"malformed git snapshot locator: {ref}")
    return repo_path, sha


def _read_git_snapshot(ref):
    repo_path, sha = _split_git_ref(ref)
    try:
        tree = _open_repo(repo_path).commit(sha).tree
    except (git.exc.GitError, ValueError) as e:
        raise SnapshotUnavailable(f"cannot open {ref}: {e}") from e

    files = []
    for item in tree.traverse():
        if item.type != "blob":
            continue
        hint = language_of(item.path)
        if hint is None:
            continue
        text = item.data_stream.read().decode("utf-8", errors="replace")
        files.append(SourceFile(item.path, text, hint))
    files.sort(key=lambda sf: sf.path)
    return tuple(files)


def read_snapshot_ref(ref):
    """Resolve a snapshot locator (directory path or git:<repo>@<sha>)."""
    if ref.startswith(GIT_REF_PREFIX):
        return _read_git_snapshot(ref)
    try:
        return read_snapshot(ref)
    except OSError as e:
        raise SnapshotUnavailable(str(e)) from e


def make_provider(kind, root):
    if kind == "dir":
        return DirectoryHistoryProvider(root)
    if kind == "git":
        return GitHistoryProvider(root)
    raise ValueError(f"Unknown history provider: {kind}")


# ----------------------
# Function-level change detection
# ----------------------
def _bodies_by_function(files):
    """(file, name) -> tuple of normalized bodies, for parseable files."""
    bodies = {}
    for source in files:
        try:
            functions = extract_functions(source)
        except UnbalancedBraces as e:
            logger.warning("Skipping %s: %s", source.path, e)
            continue
        for fn in functions:
            key = (source.path, fn.name)
            bodies[key] = bodies.get(key, ()) + (normalize_body(fn.body),)
    return bodies


def locate_modified_function(before, after, file_hint=None, message=None, allow_message_mention=False):
    """Return (file, name) of the one function whose normalized body changed."""
    before_text = {sf.path: sf for sf in before}
    after_text = {sf.path: sf for sf in after}
    paths = sorted(before_text.keys() & after_text.keys())
    if file_hint:
        paths = [path for path in paths if path == file_hint]
    touched = [path for path in paths if before_text[path].text != after_text[path].text]

    old = _bodies_by_function(before_text[path] for path in touched)
    new = _bodies_by_function(after_text[path] for path in touched)
    changed = sorted(key for key in old.keys() & new.keys() if old[key] != new[key])

    if not changed:
        raise NoFunctionChanged("no function present on both sides changed")
    if len(changed) == 1:
        return changed[0]
    if allow_message_mention and message:
        mentioned = [key for key in changed if re.search(rf"\b{re.escape(key[1])}\b", message)]
        if len(mentioned) == 1:
            logger.info("Commit message names %s among %d changed functions", mentioned[0][1], len(changed))
            return mentioned[0]
    raise MultipleFunctionsChanged(changed)


def _target_body(provider, commit, target):
    """Normalized body of target=(file, name) at `commit`, or None when absent."""
    file, name = target
    text = provider.read_file(commit, file)
    if text is None:
        return None
    try:
        functions = extract_functions(SourceFile(file, text))
    except UnbalancedBraces:
        logger.debug("%s unparseable at %s; target treated as absent", file, commit.id)
        return None
    for fn in functions:
        if fn.name == name:
            return normalize_body(fn.body)
    return None


def trace_vul_intro(history, target, f_vul_normalized, provider):
    """Walk child -> parent from history.head to the commit that introduced f_vul.

    Returns the most recent commit whose target body equals f_vul while its
    parent's body differs or is absent. Reaching the root without such a change
    returns the root with root_introduced=True.
    """
    head_body = _target_body(provider, history.head, target)
    if head_body is None:
        raise TargetMissingAtHead(f"{target[0]}:{target[1]} absent at {history.head.id}")
    if head_body != f_vul_normalized:
        raise TargetMissingAtHead(f"{target[0]}:{target[1]} at {history.head.id} is not the f_vul version")

    chain = history.chain
    for pos, commit in enumerate(chain):
        if pos + 1 == len(chain):
            logger.info("%s:%s already in f_vul form at root commit %s", target[0], target[1], commit.id)
            return VulIntro(commit, root_introduced=True)
        if _target_body(provider, chain[pos + 1], target) != f_vul_normalized:
            return VulIntro(commit)


# ----------------------
# Sample assembly
# ----------------------
def _unique_definition(files, file, name):
    for source in files:
        if source.path != file:
            continue
        matches = [fn for fn in extract_functions(source) if fn.name == name]
        if len(matches) == 1:
            return matches[0]
        raise FunctionNotUnique(f"{file}:{name} defined {len(matches)} times")
    raise FunctionNotUnique(f"{file} missing")


def safe_sample_id(text):
    return re.sub(r"[^\w.-]", "_", text)


def build_pairwise_sample(manifest_entry, history_provider, allow_message_mention=False):
    entry = manifest_entry if isinstance(manifest_entry, ManifestEntry) else ManifestEntry.from_dict(manifest_entry)

    history = history_provider.history(entry.repo, entry.vul_fix_commit)
    fix = history.head
    parent_view = history.from_parent()
    parent = parent_view.head

    before = history_provider.snapshot(parent)
    after = history_provider.snapshot(fix)
    file, name = locate_modified_function(
        before, after, entry.file_hint, fix.message, allow_message_mention=allow_message_mention
    )
    f_vul = FunctionBody.of(_unique_definition(before, file, name).body)
    f_ben = FunctionBody.of(_unique_definition(after, file, name).body)

    intro = trace_vul_intro(parent_view, (file, name), f_vul.normalized, history_provider)
    return PairwiseSample(
        sample_id=safe_sample_id(entry.sample_id or entry.cve_id),
        cve_id=entry.cve_id,
        cwe_id=entry.cwe_id,
        file=file,
        function_name=name,
        f_vul=f_vul,
        f_ben=f_ben,
        vul_intro=intro.commit,
        vul_fix=fix,
        r_intro=intro.commit.snapshot_ref,
        r_fix=fix.snapshot_ref,
        intro_at_root=intro.root_introduced,
    )


def _try_build(entry, provider, allow_message_mention):
    try:
        return build_pairwise_sample(entry, provider, allow_message_mention), None
    except HistoryError as e:
        return None, (type(e).__name__, str(e))
    except (OSError, git.exc.GitError) as e:
        return None, ("SnapshotUnavailable", str(e))


def _entry_cve_id(entry):
    if isinstance(entry, ManifestEntry):
        return entry.cve_id
    return entry.get("cve_id") if isinstance(entry, dict) else None


def build_samples(entries, provider, workers=1, allow_message_mention=False, progress=False):
    """Build every manifest entry; returns (samples, rejections), each entry in exactly one."""
    entries = list(entries)

    def work(entry):
        return _try_build(entry, provider, allow_message_mention)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, entries))
    else:
        results = [work(entry) for entry in tqdm(entries, desc="Building pairs", unit="cve", disable=not progress)]

    samples = []
    rejections = []
    seen = {}
    for index, (entry, (sample, failure)) in enumerate(zip(entries, results)):
        if sample is not None and sample.sample_id in seen:
            failure = (
                "InvalidManifestEntry",
                f"duplicate sample_id {sample.sample_id} (first used by entry {seen[sample.sample_id]})",
            )
            sample = None
        if sample is not None:
            seen[sample.sample_id] = index
            samples.append(sample)
            continue
        reason, detail = failure
        cve_id = _entry_cve_id(entry)
        logger.warning("Rejected %s: %s (%s)", cve_id, reason, detail)
        rejections.append({"index": index, "cve_id": cve_id, "reason": reason, "detail": detail})
    return samples, rejections


def write_samples(samples, rejections, out_dir):
    """samples.jsonl + rejected.jsonl + bodies/<sample_id>.{vul,ben}.c"""
    bodies_dir = os.path.join(out_dir, "bodies")
    os.makedirs(bodies_dir, exist_ok=True)
    for sample in samples:
        for version, body in (("vul", sample.f_vul), ("ben", sample.f_ben)):
            with open(os.path.join(bodies_dir, f"{sample.sample_id}.{version}.c"), "w", encoding="utf-8", newline="\n") as f:
                f.write(body.verbatim)
    write_jsonl(os.path.join(out_dir, "samples.jsonl"), [sample.to_dict() for sample in samples])
    write_jsonl(os.path.join(out_dir, "rejected.jsonl"), rejections)


def load_samples(samples_dir):
    samples = []
    for record in read_jsonl(os.path.join(samples_dir, "samples.jsonl")):
        bodies = {}
        for version in ("vul", "ben"):
            path = os.path.join(samples_dir, "bodies", f"{record['sample_id']}.{version}.c")
            with open(path, "r", encoding="utf-8", newline="") as f:
                bodies[version] = FunctionBody.of(f.read())
        samples.append(
            PairwiseSample(
                sample_id=record["sample_id"],
                cve_id=record["cve_id"],
                cwe_id=record["cwe_id"],
                file=record["file"],
                function_name=record["function_name"],
                f_vul=bodies["vul"],
                f_ben=bodies["ben"],
                vul_intro=CommitRef(record["vul_intro_commit"], None, record["r_intro"]),
                vul_fix=CommitRef(record["vul_fix_commit"], None, record["r_fix"]),
                r_intro=record["r_intro"],
                r_fix=record["r_fix"],
                intro_at_root=record.get("intro_at_root", False),
            )
        )
    return samples


def load_manifest(path):
    return read_jsonl(path)

"""Data model and corpus handling.

Defines issue/commit/link records, loads and writes line-delimited JSON
project files (dataset field names: issue_id/summary/description/...,
commitid/message/Diff/...), produces issue-cohesive train/valid/test
splits, and generates seeded synthetic corpora for desk-scale testing.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, NamedTuple

logger = logging.getLogger(__name__)

DAY_SECONDS = 86400.0

PROVENANCES = ("tagged_true", "generated_false_similarity", "generated_false_time")


class CorpusError(RuntimeError):
    """Fatal corpus problem: unreadable file, empty file, or wrong schema."""


@dataclass
class ChangedFile:
    file_path: str
    file_name: str  # basename with extension stripped
    diff_tokens: list[str] = field(default_factory=list)
    source_tokens: list[str] = field(default_factory=list)

    @staticmethod
    def name_from_path(path: str) -> str:
        base = path.replace("\\", "/").rsplit("/", 1)[-1]
        return base.rsplit(".", 1)[0] if "." in base else base


@dataclass
class IssueRecord:
    issue_id: str
    title_tokens: list[str] = field(default_factory=list)
    description_tokens: list[str] = field(default_factory=list)
    create_date: float | None = None  # UTC epoch seconds
    update_date: float | None = None
    last_resolved_date: float | None = None
    raw_title: str = ""
    raw_description: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def text_tokens(self) -> list[str]:
        """Issue text: title tokens followed by description tokens."""
        return self.title_tokens + self.description_tokens


@dataclass
class CommitRecord:
    commit_id: str
    message_tokens: list[str] = field(default_factory=list)
    changed_files: list[ChangedFile] = field(default_factory=list)
    commit_time: float | None = None
    tagged_issue_id: str | None = None
    raw_message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def code_tokens(self) -> list[str]:
        """Concatenated diff tokens of all changed files in commit order."""
        out: list[str] = []
        for cf in self.changed_files:
            out.extend(cf.diff_tokens)
        return out


@dataclass
class LinkRecord:
    issue: IssueRecord
    commit: CommitRecord
    label: int
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance: {self.provenance!r}")
        if (self.label == 1) != (self.provenance == "tagged_true"):
            raise ValueError("label must be 1 exactly for tagged_true links")

    @property
    def key(self) -> tuple[str, str]:
        return (self.issue.issue_id, self.commit.commit_id)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    valid_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.valid_frac, self.test_frac)
        if any(f < 0 for f in fracs):
            raise ValueError("split fractions must be non-negative")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


@dataclass(frozen=True)
class ProjectSchema:
    """File field names for project records (dataset-convention defaults)."""

    issue_id: str = "issue_id"
    title: str = "summary"
    description: str = "description"
    create_date: str = "create_date"
    update_date: str = "update_date"
    last_resolved_date: str = "last_resolved_date"
    commit_id: str = "commitid"
    message: str = "message"
    commit_time: str = "commit_time_date"
    commit_issue_id: str = "commit_issue_id"
    changed_files: str = "changed_files"
    diff: str = "Diff"
    codelist: str = "codelist"


DEFAULT_SCHEMA = ProjectSchema()


@dataclass
class LoadStats:
    total_lines: int = 0
    issues_loaded: int = 0
    commits_loaded: int = 0
    skipped_malformed: int = 0
    rejected_empty_issues: int = 0


class LoadResult(NamedTuple):
    issues: list[IssueRecord]
    commits: list[CommitRecord]
    stats: LoadStats


# --- timestamps ------------------------------------------------------------

def parse_timestamp(value) -> float | None:
    """ISO-8601 string or epoch seconds -> UTC epoch seconds."""
    if value is None or value == "":
        return None
    if isinstance(value, (int, float)):
        return float(value)
    dt = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(seconds: float | None) -> str | None:
    if seconds is None:
        return None
    return datetime.fromtimestamp(seconds, tz=timezone.utc).isoformat()


# --- record <-> line conversion --------------------------------------------

_ISSUE_KNOWN = ("issue_id", "summary", "description", "create_date",
                "update_date", "last_resolved_date", "title_tokens",
                "description_tokens")
_COMMIT_KNOWN = ("commitid", "message", "commit_time_date", "commit_issue_id",
                 "changed_files", "Diff", "codelist", "message_tokens",
                 "diff_tokens", "source_tokens")


def _issue_from_obj(obj: dict, schema: ProjectSchema) -> IssueRecord:
    issue_id = obj.get(schema.issue_id)
    if not issue_id or not isinstance(issue_id, str):
        raise ValueError("missing or empty issue_id")
    create = parse_timestamp(obj.get(schema.create_date))
    update = parse_timestamp(obj.get(schema.update_date))
    resolved = parse_timestamp(obj.get(schema.last_resolved_date))
    if create is not None and update is not None and create > update:
        raise ValueError("create_date after update_date")
    return IssueRecord(
        issue_id=issue_id,
        title_tokens=list(obj.get("title_tokens") or []),
        description_tokens=list(obj.get("description_tokens") or []),
        create_date=create,
        update_date=update,
        last_resolved_date=resolved,
        raw_title=obj.get(schema.title) or "",
        raw_description=obj.get(schema.description) or "",
        extra={k: v for k, v in obj.items() if k not in _ISSUE_KNOWN},
    )


def _issue_to_obj(rec: IssueRecord, schema: ProjectSchema) -> dict:
    obj = {
        schema.issue_id: rec.issue_id,
        schema.title: rec.raw_title,
        schema.description: rec.raw_description,
        schema.create_date: format_timestamp(rec.create_date),
        schema.update_date: format_timestamp(rec.update_date),
        schema.last_resolved_date: format_timestamp(rec.last_resolved_date),
        "title_tokens": rec.title_tokens,
        "description_tokens": rec.description_tokens,
    }
    obj.update(rec.extra)
    return obj


def _commit_from_obj(obj: dict, schema: ProjectSchema) -> CommitRecord:
    commit_id = obj.get(schema.commit_id)
    if not commit_id or not isinstance(commit_id, str):
        raise ValueError("missing or empty commitid")

    paths = obj.get(schema.changed_files) or []
    if isinstance(paths, str):
        paths = [paths]
    diffs = obj.get(schema.diff) or []
    if isinstance(diffs, str):
        diffs = [diffs]
    sources = obj.get(schema.codelist) or []
    if isinstance(sources, str):
        sources = [sources]
    diff_tokens = obj.get("diff_tokens") or [[] for _ in paths]
    source_tokens = obj.get("source_tokens") or [[] for _ in paths]
    if not (len(diff_tokens) == len(source_tokens) == len(paths)):
        raise ValueError("changed_files / token list length mismatch")

    changed = [
        ChangedFile(
            file_path=p,
            file_name=ChangedFile.name_from_path(p),
            diff_tokens=list(dt),
            source_tokens=list(st),
        )
        for p, dt, st in zip(paths, diff_tokens, source_tokens)
    ]
    extra = {k: v for k, v in obj.items() if k not in _COMMIT_KNOWN}
    if diffs:
        extra.setdefault("Diff", diffs)
    if sources:
        extra.setdefault("codelist", sources)
    return CommitRecord(
        commit_id=commit_id,
        message_tokens=list(obj.get("message_tokens") or []),
        changed_files=changed,
        commit_time=parse_timestamp(obj.get(schema.commit_time)),
        tagged_issue_id=obj.get(schema.commit_issue_id) or None,
        raw_message=obj.get(schema.message) or "",
        extra=extra,
    )


def _commit_to_obj(rec: CommitRecord, schema: ProjectSchema) -> dict:
    obj = {
        schema.commit_id: rec.commit_id,
        schema.message: rec.raw_message,
        schema.commit_time: format_timestamp(rec.commit_time),
        schema.commit_issue_id: rec.tagged_issue_id,
        schema.changed_files: [cf.file_path for cf in rec.changed_files],
        "message_tokens": rec.message_tokens,
        "diff_tokens": [cf.diff_tokens for cf in rec.changed_files],
        "source_tokens": [cf.source_tokens for cf in rec.changed_files],
    }
    obj.update(rec.extra)
    return obj


# --- loading / writing ------------------------------------------------------

def load_project(path, schema: ProjectSchema = DEFAULT_SCHEMA, *,
                 require_tokens: bool = True) -> LoadResult:
    """Load issue and commit records from line-delimited JSON.

    `path` is either a single file with mixed record lines (commit lines are
    recognized by the commitid field) or a directory containing issues.jsonl
    and commits.jsonl. Malformed lines are skipped and counted; issues whose
    title+description tokens are empty are rejected when require_tokens.

    Raises CorpusError on unreadable/empty input or when more than half the
    lines are malformed (wrong schema).
    """
    path = Path(path)
    if path.is_dir():
        files = [path / "issues.jsonl", path / "commits.jsonl"]
        files = [f for f in files if f.exists()]
        if not files:
            raise CorpusError(f"no issues.jsonl/commits.jsonl under {path}")
    elif path.exists():
        files = [path]
    else:
        raise CorpusError(f"cannot read project file: {path}")

    stats = LoadStats()
    issues: list[IssueRecord] = []
    commits: list[CommitRecord] = []
    seen_issue_ids: set[str] = set()
    seen_commit_ids: set[str] = set()

    for f in files:
        try:
            lines = f.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise CorpusError(f"cannot read project file: {f}: {e}") from e
        for line in lines:
            if not line.strip():
                continue
            stats.total_lines += 1
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record line is not an object")
                if schema.commit_id in obj:
                    rec = _commit_from_obj(obj, schema)
                    if rec.commit_id in seen_commit_ids:
                        raise ValueError(f"duplicate commitid {rec.commit_id}")
                    seen_commit_ids.add(rec.commit_id)
                    commits.append(rec)
                    stats.commits_loaded += 1
                elif schema.issue_id in obj:
                    rec = _issue_from_obj(obj, schema)
                    if rec.issue_id in seen_issue_ids:
                        raise ValueError(f"duplicate issue_id {rec.issue_id}")
                    if require_tokens and not (rec.title_tokens or rec.description_tokens):
                        stats.rejected_empty_issues += 1
                        continue
                    seen_issue_ids.add(rec.issue_id)
                    issues.append(rec)
                    stats.issues_loaded += 1
                else:
                    raise ValueError("line has neither issue_id nor commitid")
            except (ValueError, TypeError) as e:
                stats.skipped_malformed += 1
                logger.debug("skipping malformed line: %s", e)

    if stats.total_lines == 0:
        raise CorpusError(f"empty project file(s): {path}")
    if stats.skipped_malformed > stats.total_lines / 2:
        raise CorpusError(
            f"{stats.skipped_malformed}/{stats.total_lines} lines malformed; "
            "input does not match the expected schema"
        )
    logger.info(
        "loaded %d issues, %d commits (%d malformed skipped, %d empty issues rejected)",
        stats.issues_loaded, stats.commits_loaded,
        stats.skipped_malformed, stats.rejected_empty_issues,
    )
    return LoadResult(issues, commits, stats)


def write_project(out_dir, issues: Iterable[IssueRecord],
                  commits: Iterable[CommitRecord],
                  schema: ProjectSchema = DEFAULT_SCHEMA) -> None:
    """Write issues.jsonl and commits.jsonl under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "issues.jsonl", "w", encoding="utf-8") as f:
        for rec in issues:
            f.write(json.dumps(_issue_to_obj(rec, schema), sort_keys=True) + "\n")
    with open(out_dir / "commits.jsonl", "w", encoding="utf-8") as f:
        for rec in commits:
            f.write(json.dumps(_commit_to_obj(rec, schema), sort_keys=True) + "\n")


def write_links(path, links: Iterable[LinkRecord]) -> None:
    """Write link rows: issue_id, commitid, label, provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for link in links:
            f.write(json.dumps({
                "issue_id": link.issue.issue_id,
                "commitid": link.commit.commit_id,
                "label": link.label,
                "provenance": link.provenance,
            }, sort_keys=True) + "\n")


def load_links(path, issues: list[IssueRecord],
               commits: list[CommitRecord]) -> list[LinkRecord]:
    """Load link rows, resolving records by id; unknown ids are an error."""
    issue_index = {r.issue_id: r for r in issues}
    commit_index = {r.commit_id: r for r in commits}
    links: list[LinkRecord] = []
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"cannot read link file: {path}")
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        try:
            issue = issue_index[obj["issue_id"]]
            commit = commit_index[obj["commitid"]]
        except KeyError as e:
            raise CorpusError(f"link references unknown record: {e}") from e
        links.append(LinkRecord(issue, commit, int(obj["label"]), obj["provenance"]))
    return links


# --- splitting ---------------------------------------------------------------

def split_links(links: list[LinkRecord], spec: SplitSpec
                ) -> tuple[list[LinkRecord], list[LinkRecord], list[LinkRecord]]:
    """Partition true links into train/valid/test, cohesive by issue.

    All links sharing an issue land in the same split (one-to-many groups are
    never divided). Target sizes are floor(n * frac) for test and valid, with
    the remainder going to train; groups are assigned in seeded shuffled
    order, so the partition is deterministic given (links, spec).
    """
    if len(links) < 3:
        raise ValueError(f"need at least 3 links to split, got {len(links)}")
    if any(l.label != 1 for l in links):
        raise ValueError("split_links expects true links only")

    groups: dict[str, list[LinkRecord]] = {}
    for link in links:
        groups.setdefault(link.issue.issue_id, []).append(link)
    keys = sorted(groups)
    random.Random(spec.seed).shuffle(keys)

    n = len(links)
    n_test = int(n * spec.test_frac)
    n_valid = int(n * spec.valid_frac)
    train: list[LinkRecord] = []
    valid: list[LinkRecord] = []
    test: list[LinkRecord] = []
    for key in keys:
        group = groups[key]
        if len(test) < n_test:
            test.extend(group)
        elif len(valid) < n_valid:
            valid.extend(group)
        else:
            train.extend(group)
    return train, valid, test


# --- synthetic corpus --------------------------------------------------------

_BACKGROUND = [
    "server", "client", "query", "plan", "build", "cache", "thread", "merge",
    "config", "parser", "index", "stream", "batch", "schema", "driver",
    "filter", "socket", "buffer", "column", "window", "branch", "logger",
    "metric", "worker", "router", "signal", "bucket", "vector", "cursor",
    "packet",
]

# Rare-but-meaningless boilerplate (CI tags, component labels, version
# strings): each document repeats one, so raw document-frequency weighting
# rates them informative even though they never indicate a link.
_BOILERPLATE = [f"boiler{j}" for j in range(40)]


def generate_synthetic_corpus(n_issues: int, seed: int = 0, overlap: float = 0.9
                              ) -> tuple[list[IssueRecord], list[CommitRecord],
                                         list[LinkRecord]]:
    """Generate a deterministic toy project with planted token overlap.

    Each issue carries unique planted topic tokens and gets 1-3 tagged
    commits (a mix of one-to-one and one-to-many links). With probability
    `overlap` a commit's message and diff share the issue's planted tokens;
    otherwise the commit uses issue-specific decoy tokens disjoint from every
    planted set. Plus a handful of untagged noise commits. Every document
    also repeats a boilerplate tag drawn independently of the link structure,
    so lexical rarity alone is a misleading relevance signal.
    """
    if n_issues < 10:
        raise ValueError("n_issues must be at least 10")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must be in [0, 1]")

    rng = random.Random(seed)
    base = parse_timestamp("2020-01-01T00:00:00+00:00")
    issues: list[IssueRecord] = []
    commits: list[CommitRecord] = []
    links: list[LinkRecord] = []

    for i in range(n_issues):
        planted = [f"topic{i}a", f"topic{i}b", f"topic{i}c"]
        decoys = [f"decoy{i}x", f"decoy{i}y"]
        bg = rng.sample(_BACKGROUND, 4)
        tag = rng.choice(_BOILERPLATE)
        title = [bg[0], planted[0], planted[1]]
        desc = [bg[1], bg[2], planted[2], planted[0], bg[3], tag, tag, tag]
        create = base + i * DAY_SECONDS
        issue = IssueRecord(
            issue_id=f"PROJ-{i + 1}",
            title_tokens=title,
            description_tokens=desc,
            create_date=create,
            update_date=create + 2 * DAY_SECONDS,
            last_resolved_date=create + 5 * DAY_SECONDS,
            raw_title=" ".join(title),
            raw_description=" ".join(desc),
            extra={"planted": planted},
        )
        issues.append(issue)

        for j in range(rng.randint(1, 3)):
            shares = rng.random() < overlap
            cbg = rng.sample(_BACKGROUND, 3)
            ctag = rng.choice(_BOILERPLATE)
            if shares:
                message = [cbg[0], planted[0], planted[1], ctag, ctag, ctag]
                diff = [planted[2], planted[0], cbg[1], cbg[2], ctag, ctag]
                file_path = f"src/core/Topic{i}a.java"
            else:
                message = [cbg[0], decoys[0], decoys[1], ctag, ctag, ctag]
                diff = [decoys[0], decoys[1], cbg[1], cbg[2], ctag, ctag]
                file_path = f"src/util/Decoy{i}x{j}.java"
            commit = CommitRecord(
                commit_id=f"c{i:04d}{j}{rng.randrange(16 ** 6):06x}",
                message_tokens=message,
                changed_files=[ChangedFile(
                    file_path=file_path,
                    file_name=ChangedFile.name_from_path(file_path),
                    diff_tokens=diff,
                )],
                commit_time=float(round(create + rng.uniform(0.5, 4.0) * DAY_SECONDS)),
                tagged_issue_id=issue.issue_id,
                raw_message=" ".join(message),
            )
            commits.append(commit)
            links.append(LinkRecord(issue, commit, 1, "tagged_true"))

    for k in range(max(2, n_issues // 5)):
        cbg = rng.sample(_BACKGROUND, 4)
        ntag = rng.choice(_BOILERPLATE)
        commits.append(CommitRecord(
            commit_id=f"noise{k:04d}{rng.randrange(16 ** 6):06x}",
            message_tokens=cbg[:2] + [ntag, ntag],
            changed_files=[ChangedFile(
                file_path=f"src/misc/Noise{k}.java",
                file_name=f"Noise{k}",
                diff_tokens=cbg[2:],
            )],
            commit_time=float(round(base + rng.uniform(0, n_issues) * DAY_SECONDS)),
            raw_message=" ".join(cbg[:2]),
        ))

    return issues, commits, links

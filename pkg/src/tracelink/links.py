"""Link-set construction.

True links come from commit issue tags. False links are generated either
from in-batch embedding similarity (least-similar distinct issue, with
collision checks against known true pairs) or by sampling commits whose
timestamps fall near an issue's lifecycle dates. Issue-code links pair an
issue with a changed source file, labeled by file-name mention.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .corpus import DAY_SECONDS, ChangedFile, CommitRecord, IssueRecord, LinkRecord
from .preprocess import porter_stem, split_identifier

logger = logging.getLogger(__name__)

SOURCE_EXTENSIONS = frozenset({
    ".java", ".py", ".c", ".h", ".cc", ".cpp", ".hpp", ".cs", ".go", ".js",
    ".ts", ".rb", ".scala", ".kt", ".rs", ".php", ".swift", ".m",
})


class TrueLinkResult(NamedTuple):
    links: list[LinkRecord]
    unmatched_tags: int


class TimeFalseResult(NamedTuple):
    links: list[LinkRecord]
    skipped_issues: int


@dataclass
class IssueCodeLink:
    issue: IssueRecord
    commit: CommitRecord
    file: ChangedFile
    label: int


@dataclass(frozen=True)
class FalseLinkPolicy:
    mode: str = "similarity"  # or "time"
    window_days: float = 7.0
    per_true: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("similarity", "time"):
            raise ValueError(f"unknown false-link mode: {self.mode!r}")
        if self.window_days <= 0:
            raise ValueError("window_days must be positive")
        if self.per_true < 1:
            raise ValueError("per_true must be at least 1")


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero whenever either vector has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def extract_true_links(issues: Sequence[IssueRecord],
                       commits: Sequence[CommitRecord]) -> TrueLinkResult:
    """Pair each tagged commit with its issue; count tags that match nothing."""
    index = {r.issue_id: r for r in issues}
    links: list[LinkRecord] = []
    unmatched = 0
    for commit in commits:
        if not commit.tagged_issue_id:
            continue
        issue = index.get(commit.tagged_issue_id)
        if issue is None:
            unmatched += 1
            continue
        links.append(LinkRecord(issue, commit, 1, "tagged_true"))
    if unmatched:
        logger.info("%d commit tags matched no loaded issue", unmatched)
    return TrueLinkResult(links, unmatched)


# --- issue-code links ---------------------------------------------------------

def _is_source_file(path: str) -> bool:
    dot = path.rfind(".")
    return dot != -1 and path[dot:].lower() in SOURCE_EXTENSIONS


def _contains_subsequence(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    for i in range(len(haystack) - len(needle) + 1):
        if list(haystack[i:i + len(needle)]) == list(needle):
            return True
    return False


def file_mentioned_in_issue(file_name: str, issue: IssueRecord,
                            normalize: Callable[[str], str] = porter_stem) -> bool:
    """True when the file name's split tokens appear contiguously in the
    issue title or description, or the whole lowercase name is a token.

    Tokens are normalized with the same stemmer as issue text so that e.g.
    a file called Buffers matches an issue mentioning "buffer".
    """
    parts = [normalize(p) for p in split_identifier(file_name)]
    joined = normalize(file_name.lower())
    for field_tokens in (issue.title_tokens, issue.description_tokens):
        if joined and joined in field_tokens:
            return True
        if _contains_subsequence(field_tokens, parts):
            return True
    return False


def generate_issue_code_links(true_links: Sequence[LinkRecord],
                              normalize: Callable[[str], str] = porter_stem
                              ) -> list[IssueCodeLink]:
    """Label every changed source file of every true link's commit."""
    out: list[IssueCodeLink] = []
    for link in true_links:
        for cf in link.commit.changed_files:
            if not _is_source_file(cf.file_path):
                continue
            label = int(file_mentioned_in_issue(cf.file_name, link.issue, normalize))
            out.append(IssueCodeLink(link.issue, link.commit, cf, label))
    return out


# --- similarity-based false links ----------------------------------------------

def generate_false_links_similarity(
    batch_true: Sequence[LinkRecord],
    issue_embeddings: Mapping[str, np.ndarray],
    true_pairs: Iterable[tuple[str, str]] = (),
) -> list[LinkRecord]:
    """In-batch false links: pair a commit with its least-similar issue.

    For each true link whose commit is the first one scanned for its issue
    (one-to-many groups yield a single false link per batch), candidate
    issues are the other distinct issues in the batch ordered by ascending
    cosine similarity of their embeddings, ties broken by first batch
    position. The least-similar candidate is taken, walking to the next one
    whenever the (issue, commit) pair is a known true pair.
    """
    first_pos: dict[str, int] = {}
    for pos, link in enumerate(batch_true):
        first_pos.setdefault(link.issue.issue_id, pos)
    if len(first_pos) < 2:
        raise ValueError("batch must contain at least two distinct issues")
    missing = [iid for iid in first_pos if iid not in issue_embeddings]
    if missing:
        raise ValueError(f"no embedding for issues: {missing}")

    true_set = set(true_pairs)
    issue_by_id = {l.issue.issue_id: l.issue for l in batch_true}
    out: list[LinkRecord] = []
    seen: set[str] = set()
    for link in batch_true:
        anchor_id = link.issue.issue_id
        if anchor_id in seen:
            continue
        seen.add(anchor_id)
        anchor_emb = issue_embeddings[anchor_id]
        ranked = sorted(
            (iid for iid in first_pos if iid != anchor_id),
            key=lambda iid: (cosine(anchor_emb, issue_embeddings[iid]),
                             first_pos[iid]),
        )
        chosen = None
        for iid in ranked:
            if (iid, link.commit.commit_id) not in true_set:
                chosen = iid
                break
        if chosen is None:
            logger.warning("every candidate issue collides for commit %s; "
                           "no false link emitted", link.commit.commit_id)
            continue
        out.append(LinkRecord(issue_by_id[chosen], link.commit, 0,
                              "generated_false_similarity"))
    return out


# --- time-based false links ------------------------------------------------------

def _issue_dates(issue: IssueRecord) -> list[float]:
    return [d for d in (issue.create_date, issue.update_date,
                        issue.last_resolved_date) if d is not None]


def eligible_commits_for(issue: IssueRecord, commits: Sequence[CommitRecord],
                         window_days: float) -> list[CommitRecord]:
    """Commits not tagged to this issue whose time falls within the window
    of any of the issue's lifecycle dates."""
    dates = _issue_dates(issue)
    window = window_days * DAY_SECONDS
    out = []
    for commit in commits:
        if commit.tagged_issue_id == issue.issue_id or commit.commit_time is None:
            continue
        if any(abs(commit.commit_time - d) <= window for d in dates):
            out.append(commit)
    return out


def generate_false_links_time(true_links: Sequence[LinkRecord],
                              commits: Sequence[CommitRecord],
                              policy: FalseLinkPolicy) -> TimeFalseResult:
    """Sample per_true time-plausible wrong commits for each true link.

    Issues with no eligible commit in the window are skipped and counted.
    Sampling is seeded and the output never exceeds per_true * len(true_links).
    """
    if policy.mode != "time":
        raise ValueError("policy.mode must be 'time'")
    rng = random.Random(policy.seed)
    out: list[LinkRecord] = []
    skipped = 0
    for link in true_links:
        eligible = eligible_commits_for(link.issue, commits, policy.window_days)
        if not eligible:
            skipped += 1
            continue
        take = min(policy.per_true, len(eligible))
        for commit in rng.sample(eligible, take):
            out.append(LinkRecord(link.issue, commit, 0, "generated_false_time"))
    if skipped:
        logger.info("%d true links had no time-eligible false candidate", skipped)
    return TimeFalseResult(out, skipped)


# --- issue-code link files --------------------------------------------------------

def write_issue_code_links(path, links: Sequence[IssueCodeLink]) -> None:
    """Write auxiliary rows: issue_id, commitid, file_path, label."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for link in links:
            f.write(json.dumps({
                "issue_id": link.issue.issue_id,
                "commitid": link.commit.commit_id,
                "file_path": link.file.file_path,
                "label": link.label,
            }, sort_keys=True) + "\n")


def load_issue_code_links(path, issues: Sequence[IssueRecord],
                          commits: Sequence[CommitRecord]
                          ) -> list[IssueCodeLink]:
    """Load auxiliary rows, resolving records by id and file path."""
    issue_index = {r.issue_id: r for r in issues}
    commit_index = {r.commit_id: r for r in commits}
    out: list[IssueCodeLink] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        try:
            issue = issue_index[obj["issue_id"]]
            commit = commit_index[obj["commitid"]]
        except KeyError as e:
            raise ValueError(f"issue-code link references unknown record: {e}") from e
        matches = [cf for cf in commit.changed_files
                   if cf.file_path == obj["file_path"]]
        if not matches:
            raise ValueError(
                f"commit {commit.commit_id} has no file {obj['file_path']!r}")
        out.append(IssueCodeLink(issue, commit, matches[0], int(obj["label"])))
    return out

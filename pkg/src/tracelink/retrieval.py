"""Ranking evaluation: thresholded prediction, the 1-true-vs-99-distractor
protocol, Precision/Hit/MRR/NDCG, and a TF-IDF bag-of-words baseline.

Each true link in the sampled evaluation set becomes one query: its commit
plus 99 commits drawn from other issues' true links, scored against the
query issue. Rankings sort by descending score with ties broken by
candidate position.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .corpus import CommitRecord, IssueRecord, LinkRecord
from .encoder import K_NL, K_PL, Encoder, Vocab, represent_commits, represent_issues

logger = logging.getLogger(__name__)

N_CANDIDATES = 100


@dataclass
class RankingQuery:
    query_id: str
    issue: IssueRecord
    candidates: list[CommitRecord]
    labels: list[int]
    scores: list[float] | None = None

    def __post_init__(self):
        if len(self.candidates) != len(self.labels):
            raise ValueError("candidates/labels length mismatch")
        if sum(self.labels) < 1:
            raise ValueError("query must contain at least one relevant candidate")


@dataclass(frozen=True)
class MetricReport:
    p_at_1: float
    p_at_10: float
    hit_at_1: float
    hit_at_10: float
    mrr: float
    ndcg_at_1: float
    ndcg_at_10: float
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "P@1": self.p_at_1, "P@10": self.p_at_10,
            "Hit@1": self.hit_at_1, "Hit@10": self.hit_at_10,
            "MRR": self.mrr,
            "NDCG@1": self.ndcg_at_1, "NDCG@10": self.ndcg_at_10,
            "queries": self.n_queries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def format_table(self) -> str:
        lines = ["metric      value", "-----------------"]
        for key, val in self.to_dict().items():
            if key == "queries":
                lines.append(f"{key:<10} {val:>6d}")
            else:
                lines.append(f"{key:<10} {val:.4f}")
        return "\n".join(lines) + "\n"


# --- per-query ranking and metrics ------------------------------------------------

def _ranked_indices(query: RankingQuery) -> list[int]:
    if query.scores is None:
        raise ValueError(f"query {query.query_id} has no scores")
    return sorted(range(len(query.candidates)),
                  key=lambda i: (-query.scores[i], i))


def _check_k(query: RankingQuery, k: int) -> None:
    if k < 1 or k > len(query.candidates):
        raise ValueError(f"k={k} outside 1..{len(query.candidates)}")


def precision_at_k(query: RankingQuery, k: int) -> float:
    _check_k(query, k)
    order = _ranked_indices(query)
    return sum(query.labels[i] for i in order[:k]) / k


def hit_at_k(query: RankingQuery, k: int) -> float:
    _check_k(query, k)
    order = _ranked_indices(query)
    return 1.0 if any(query.labels[i] for i in order[:k]) else 0.0


def first_relevant_rank(query: RankingQuery) -> int:
    order = _ranked_indices(query)
    for rank, i in enumerate(order, start=1):
        if query.labels[i]:
            return rank
    raise ValueError("query has no relevant candidate")  # barred by __post_init__


def mrr(queries: Sequence[RankingQuery]) -> float:
    if not queries:
        raise ValueError("no queries to aggregate")
    return sum(1.0 / first_relevant_rank(q) for q in queries) / len(queries)


def ndcg_at_k(query: RankingQuery, k: int) -> float:
    _check_k(query, k)
    order = _ranked_indices(query)
    dcg = sum(query.labels[i] / math.log2(rank + 1)
              for rank, i in enumerate(order[:k], start=1))
    ideal = sorted(query.labels, reverse=True)
    z = sum(r / math.log2(rank + 1)
            for rank, r in enumerate(ideal[:k], start=1))
    return dcg / z if z > 0 else 0.0


def evaluate_queries(queries: Sequence[RankingQuery]) -> MetricReport:
    """Mean per-query metrics over scored queries."""
    if not queries:
        raise ValueError("no queries to aggregate")
    n = len(queries)
    return MetricReport(
        p_at_1=sum(precision_at_k(q, 1) for q in queries) / n,
        p_at_10=sum(precision_at_k(q, 10) for q in queries) / n,
        hit_at_1=sum(hit_at_k(q, 1) for q in queries) / n,
        hit_at_10=sum(hit_at_k(q, 10) for q in queries) / n,
        mrr=mrr(queries),
        ndcg_at_1=sum(ndcg_at_k(q, 1) for q in queries) / n,
        ndcg_at_10=sum(ndcg_at_k(q, 10) for q in queries) / n,
        n_queries=n,
    )


# --- query construction --------------------------------------------------------------

def build_queries(test_links: Sequence[LinkRecord], max_issues: int = 1000,
                  seed: int = 0, multi_relevant: bool = False,
                  n_candidates: int = N_CANDIDATES) -> list[RankingQuery]:
    """Sample evaluation queries from a test split of true links.

    Up to max_issues unique issues are drawn; every true link on a drawn
    issue forms one query whose distractors are commits of other-issue
    links in the drawn set, sampled without replacement, never including a
    commit truly linked to the query issue. Candidate order is shuffled
    (seeded). In multi-relevant mode the issue's sibling commits join the
    candidate list with label 1 instead of being excluded outright.
    """
    if len(test_links) < n_candidates:
        raise ValueError(
            f"protocol needs at least {n_candidates} true links, "
            f"got {len(test_links)}")
    rng = random.Random(seed)
    unique_issues = list({l.issue.issue_id: None for l in test_links})
    if len(unique_issues) > max_issues:
        picked = set(rng.sample(unique_issues, max_issues))
    else:
        picked = set(unique_issues)
    pool = [l for l in test_links if l.issue.issue_id in picked]
    if len(pool) < n_candidates:
        raise ValueError(
            f"picked issue set carries {len(pool)} links; "
            f"protocol needs {n_candidates}")

    linked: dict[str, set[str]] = {}
    for l in pool:
        linked.setdefault(l.issue.issue_id, set()).add(l.commit.commit_id)

    queries: list[RankingQuery] = []
    skipped = 0
    for link in pool:
        own_commits = linked[link.issue.issue_id]
        eligible = [o for o in pool
                    if o.issue.issue_id != link.issue.issue_id
                    and o.commit.commit_id not in own_commits]
        candidates = [link.commit]
        labels = [1]
        if multi_relevant:
            for sibling in sorted(own_commits - {link.commit.commit_id}):
                candidates.append(next(
                    o.commit for o in pool if o.commit.commit_id == sibling))
                labels.append(1)
        need = n_candidates - len(candidates)
        if len(eligible) < need:
            skipped += 1
            continue
        for other in rng.sample(eligible, need):
            candidates.append(other.commit)
            labels.append(0)
        order = list(range(n_candidates))
        rng.shuffle(order)
        queries.append(RankingQuery(
            query_id=f"{link.issue.issue_id}::{link.commit.commit_id}",
            issue=link.issue,
            candidates=[candidates[i] for i in order],
            labels=[labels[i] for i in order],
        ))
    if skipped:
        logger.info("%d queries skipped for lack of distractors", skipped)
    if not queries:
        raise ValueError("no queries could be built from the test split")
    return queries


# --- scoring -----------------------------------------------------------------------

def predict(issue: IssueRecord, commit: CommitRecord, encoder: Encoder,
            vocab: Vocab, threshold: float = 0.5, k_nl: int = K_NL,
            k_pl: int = K_PL) -> tuple[float, bool]:
    """Cosine of the pair's representations; a link iff strictly above
    the threshold."""
    with torch.no_grad():
        s = represent_issues([issue], encoder, vocab, k_nl)
        q = represent_commits([commit], encoder, vocab, k_nl, k_pl)
        score = float(torch.nn.functional.cosine_similarity(s, q, dim=-1)[0])
    return score, score > threshold


def score_queries(queries: Sequence[RankingQuery],
                  score_fn: Callable[[IssueRecord, CommitRecord], float]) -> None:
    """Fill every query's scores with score_fn(issue, candidate)."""
    for query in queries:
        query.scores = [float(score_fn(query.issue, c))
                        for c in query.candidates]


def score_queries_with_encoder(queries: Sequence[RankingQuery],
                               encoder: Encoder, vocab: Vocab,
                               k_nl: int = K_NL, k_pl: int = K_PL) -> None:
    """Batch variant of score_queries using pair-cosine of representations."""
    issues = list({q.issue.issue_id: q.issue for q in queries}.values())
    commits = list({c.commit_id: c for q in queries
                    for c in q.candidates}.values())
    issue_row = {r.issue_id: i for i, r in enumerate(issues)}
    commit_row = {r.commit_id: i for i, r in enumerate(commits)}
    with torch.no_grad():
        s = represent_issues(issues, encoder, vocab, k_nl)
        q = represent_commits(commits, encoder, vocab, k_nl, k_pl)
        su = s / s.norm(dim=-1, keepdim=True).clamp(min=1e-8)
        qu = q / q.norm(dim=-1, keepdim=True).clamp(min=1e-8)
        sims = (su @ qu.t()).numpy()
    for query in queries:
        row = sims[issue_row[query.issue.issue_id]]
        query.scores = [float(row[commit_row[c.commit_id]])
                        for c in query.candidates]


def evaluate(encoder: Encoder, vocab: Vocab,
             queries: Sequence[RankingQuery],
             k_nl: int = K_NL, k_pl: int = K_PL) -> MetricReport:
    """Score all queries with the encoder and aggregate the metrics."""
    score_queries_with_encoder(queries, encoder, vocab, k_nl, k_pl)
    return evaluate_queries(queries)


def dump_query_scores(queries: Sequence[RankingQuery], path) -> None:
    """CSV rows: query_id, candidate_id, score, label, rank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["query_id", "candidate_id", "score", "label", "rank"])
        for query in queries:
            order = _ranked_indices(query)
            rank_of = {i: r for r, i in enumerate(order, start=1)}
            for i, commit in enumerate(query.candidates):
                writer.writerow([query.query_id, commit.commit_id,
                                 f"{query.scores[i]:.8f}", query.labels[i],
                                 rank_of[i]])


# --- TF-IDF bag-of-words baseline ------------------------------------------------------

@dataclass
class CorpusStats:
    n_docs: int
    df: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_documents(cls, docs: Sequence[Sequence[str]]) -> "CorpusStats":
        if not docs:
            raise ValueError("no documents for corpus statistics")
        df: dict[str, int] = {}
        for doc in docs:
            for term in set(doc):
                df[term] = df.get(term, 0) + 1
        return cls(n_docs=len(docs), df=df)

    def idf(self, term: str) -> float:
        return math.log(self.n_docs / (1 + self.df.get(term, 0))) + 1.0


def commit_document(commit: CommitRecord) -> list[str]:
    return commit.message_tokens + commit.code_tokens


def issue_document(issue: IssueRecord) -> list[str]:
    return issue.text_tokens


def training_corpus_stats(train_links: Sequence[LinkRecord]) -> CorpusStats:
    """TF-IDF statistics over the training split's issue and commit docs."""
    docs: list[list[str]] = []
    for issue in {l.issue.issue_id: l.issue for l in train_links}.values():
        docs.append(issue_document(issue))
    for commit in {l.commit.commit_id: l.commit for l in train_links}.values():
        docs.append(commit_document(commit))
    return CorpusStats.from_documents(docs)


def _tfidf(doc: Sequence[str], stats: CorpusStats) -> dict[str, float]:
    tf: dict[str, int] = {}
    for term in doc:
        tf[term] = tf.get(term, 0) + 1
    return {term: count * stats.idf(term) for term, count in tf.items()}


def vsm_score(issue_doc: Sequence[str], commit_doc: Sequence[str],
              stats: CorpusStats) -> float:
    """Cosine between raw-count TF-IDF vectors; disjoint vocab gives 0."""
    a = _tfidf(issue_doc, stats)
    b = _tfidf(commit_doc, stats)
    dot = sum(w * b[t] for t, w in a.items() if t in b)
    na = math.sqrt(sum(w * w for w in a.values()))
    nb = math.sqrt(sum(w * w for w in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def score_queries_with_vsm(queries: Sequence[RankingQuery],
                           stats: CorpusStats) -> None:
    cache: dict[str, dict[str, float]] = {}

    def commit_vec(commit: CommitRecord) -> dict[str, float]:
        if commit.commit_id not in cache:
            cache[commit.commit_id] = _tfidf(commit_document(commit), stats)
        return cache[commit.commit_id]

    for query in queries:
        a = _tfidf(issue_document(query.issue), stats)
        na = math.sqrt(sum(w * w for w in a.values()))
        scores = []
        for commit in query.candidates:
            b = commit_vec(commit)
            nb = math.sqrt(sum(w * w for w in b.values()))
            if na == 0.0 or nb == 0.0:
                scores.append(0.0)
            else:
                scores.append(sum(w * b[t] for t, w in a.items() if t in b)
                              / (na * nb))
        query.scores = scores

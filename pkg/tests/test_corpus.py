"""Tests for records, project I/O, splitting, and the synthetic corpus."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracelink.corpus import (
    ChangedFile,
    CommitRecord,
    CorpusError,
    IssueRecord,
    LinkRecord,
    SplitSpec,
    format_timestamp,
    generate_synthetic_corpus,
    load_links,
    load_project,
    parse_timestamp,
    split_links,
    write_links,
    write_project,
)


def _issue(i, tokens=("alpha", "beta")):
    return IssueRecord(issue_id=f"I-{i}", title_tokens=list(tokens))


def _commit(i, issue_id=None):
    return CommitRecord(commit_id=f"c{i}", message_tokens=["fix"],
                        tagged_issue_id=issue_id)


def _true(issue, commit):
    return LinkRecord(issue, commit, 1, "tagged_true")


# --- records -------------------------------------------------------------------

def test_link_label_provenance_consistency():
    issue, commit = _issue(1), _commit(1)
    with pytest.raises(ValueError):
        LinkRecord(issue, commit, 0, "tagged_true")
    with pytest.raises(ValueError):
        LinkRecord(issue, commit, 1, "generated_false_time")
    with pytest.raises(ValueError):
        LinkRecord(issue, commit, 1, "whatever")


def test_changed_file_name_from_path():
    assert ChangedFile.name_from_path("src/core/Topic1a.java") == "Topic1a"
    assert ChangedFile.name_from_path("Makefile") == "Makefile"
    assert ChangedFile.name_from_path("a\\b\\Win.cs") == "Win"


def test_timestamp_parsing_variants():
    t = parse_timestamp("2020-01-01T00:00:00Z")
    assert t == parse_timestamp("2020-01-01T00:00:00+00:00")
    assert t == parse_timestamp(t)
    assert parse_timestamp(None) is None
    assert parse_timestamp("") is None
    assert format_timestamp(None) is None
    assert parse_timestamp(format_timestamp(t)) == t


# --- project I/O ----------------------------------------------------------------

def test_project_round_trip(tmp_path):
    issues, commits, _ = generate_synthetic_corpus(12, seed=3)
    issues[0].extra["custom_field"] = {"nested": [1, 2]}
    write_project(tmp_path, issues, commits)
    loaded = load_project(tmp_path)
    assert loaded.stats.issues_loaded == len(issues)
    assert loaded.stats.commits_loaded == len(commits)
    assert loaded.stats.skipped_malformed == 0
    assert loaded.issues == issues
    assert loaded.commits == commits
    assert loaded.issues[0].extra["custom_field"] == {"nested": [1, 2]}


def test_load_single_mixed_file(tmp_path):
    p = tmp_path / "data.jsonl"
    rows = [
        {"issue_id": "A-1", "summary": "t", "title_tokens": ["a"]},
        {"commitid": "c1", "message": "m", "message_tokens": ["m"],
         "commit_issue_id": "A-1"},
    ]
    p.write_text("\n".join(json.dumps(r) for r in rows))
    issues, commits, stats = load_project(p)
    assert [r.issue_id for r in issues] == ["A-1"]
    assert [r.commit_id for r in commits] == ["c1"]
    assert commits[0].tagged_issue_id == "A-1"


def test_malformed_lines_are_counted(tmp_path):
    p = tmp_path / "data.jsonl"
    lines = [
        json.dumps({"issue_id": "A-1", "title_tokens": ["a"]}),
        "{not json",
        json.dumps({"neither": 1}),
        json.dumps({"issue_id": "A-1", "title_tokens": ["dup"]}),
        json.dumps({"issue_id": "A-2", "title_tokens": ["b"],
                    "create_date": "2021-01-02T00:00:00Z",
                    "update_date": "2021-01-01T00:00:00Z"}),
        json.dumps({"commitid": "c1"}),
        json.dumps({"commitid": "c2"}),
        json.dumps({"commitid": "c3"}),
        json.dumps({"issue_id": "A-3"}),  # no tokens -> rejected
    ]
    p.write_text("\n".join(lines))
    issues, commits, stats = load_project(p)
    assert [r.issue_id for r in issues] == ["A-1"]
    assert len(commits) == 3
    assert stats.skipped_malformed == 4
    assert stats.rejected_empty_issues == 1


def test_raw_load_keeps_tokenless_issues(tmp_path):
    p = tmp_path / "raw.jsonl"
    p.write_text(json.dumps({"issue_id": "A-1", "summary": "Add floor"}))
    issues, _, stats = load_project(p, require_tokens=False)
    assert issues[0].raw_title == "Add floor"
    assert stats.rejected_empty_issues == 0


def test_mostly_malformed_input_is_fatal(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(["{oops"] * 3 + [json.dumps({"commitid": "c1"})]))
    with pytest.raises(CorpusError):
        load_project(p)


def test_empty_and_missing_files_are_fatal(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("\n")
    with pytest.raises(CorpusError):
        load_project(p)
    with pytest.raises(CorpusError):
        load_project(tmp_path / "nope.jsonl")


def test_links_round_trip(tmp_path):
    issues, commits, links = generate_synthetic_corpus(10, seed=1)
    path = tmp_path / "links.jsonl"
    write_links(path, links)
    loaded = load_links(path, issues, commits)
    assert [l.key for l in loaded] == [l.key for l in links]
    assert all(l.label == 1 and l.provenance == "tagged_true" for l in loaded)


def test_load_links_unknown_id_is_fatal(tmp_path):
    issues, commits, links = generate_synthetic_corpus(10, seed=1)
    path = tmp_path / "links.jsonl"
    path.write_text(json.dumps({"issue_id": "nope", "commitid": "nope",
                                "label": 1, "provenance": "tagged_true"}))
    with pytest.raises(CorpusError):
        load_links(path, issues, commits)


# --- splitting -------------------------------------------------------------------

def test_split_sizes_exact_on_singletons():
    links = [_true(_issue(i), _commit(i)) for i in range(10)]
    train, valid, test = split_links(links, SplitSpec(seed=0))
    assert (len(train), len(valid), len(test)) == (6, 2, 2)


def test_split_remainder_goes_to_train():
    links = [_true(_issue(i), _commit(i)) for i in range(11)]
    train, valid, test = split_links(links, SplitSpec(seed=0))
    assert (len(test), len(valid)) == (2, 2)
    assert len(train) == 7


def test_split_requires_three_links():
    links = [_true(_issue(i), _commit(i)) for i in range(2)]
    with pytest.raises(ValueError):
        split_links(links, SplitSpec())


def test_split_rejects_false_links():
    issue, commit = _issue(1), _commit(1)
    bad = [LinkRecord(issue, commit, 0, "generated_false_time")] * 3
    with pytest.raises(ValueError):
        split_links(bad, SplitSpec())


def test_split_is_deterministic_and_seed_sensitive():
    links = [_true(_issue(i % 20), _commit(i)) for i in range(60)]
    a = split_links(links, SplitSpec(seed=7))
    b = split_links(links, SplitSpec(seed=7))
    assert [[l.key for l in part] for part in a] == [[l.key for l in part] for part in b]
    c = split_links(links, SplitSpec(seed=8))
    assert [[l.key for l in part] for part in a] != [[l.key for l in part] for part in c]


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(min_value=1, max_value=3), min_size=3, max_size=40),
    st.integers(min_value=0, max_value=10_000),
)
def test_split_partition_and_cohesion(group_sizes, seed):
    links = []
    for gi, size in enumerate(group_sizes):
        issue = _issue(gi)
        for j in range(size):
            links.append(_true(issue, _commit(f"{gi}_{j}")))
    train, valid, test = split_links(links, SplitSpec(seed=seed))

    # partition: every link in exactly one split
    all_keys = sorted(l.key for l in links)
    got_keys = sorted(l.key for l in train + valid + test)
    assert got_keys == all_keys

    # cohesion: an issue's links never straddle splits
    owner = {}
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        for link in part:
            assert owner.setdefault(link.issue.issue_id, name) == name


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(train_frac=0.5, valid_frac=0.2, test_frac=0.2)
    with pytest.raises(ValueError):
        SplitSpec(train_frac=1.2, valid_frac=-0.1, test_frac=-0.1)


# --- synthetic corpus --------------------------------------------------------------

def _sharing_rate(links):
    shared = 0
    for link in links:
        planted = set(link.issue.extra["planted"])
        commit_tokens = set(link.commit.message_tokens) | set(link.commit.code_tokens)
        shared += bool(planted & commit_tokens)
    return shared / len(links)


def test_synth_is_deterministic():
    a = generate_synthetic_corpus(15, seed=42, overlap=0.5)
    b = generate_synthetic_corpus(15, seed=42, overlap=0.5)
    assert a == b
    c = generate_synthetic_corpus(15, seed=43, overlap=0.5)
    assert a != c


def test_synth_overlap_extremes():
    _, _, links0 = generate_synthetic_corpus(30, seed=5, overlap=0.0)
    assert _sharing_rate(links0) == 0.0
    _, _, links1 = generate_synthetic_corpus(30, seed=5, overlap=1.0)
    assert _sharing_rate(links1) == 1.0


def test_synth_overlap_mid_rate_tracks_probability():
    _, _, links = generate_synthetic_corpus(200, seed=9, overlap=0.7)
    assert abs(_sharing_rate(links) - 0.7) < 0.1


def test_synth_structure():
    issues, commits, links = generate_synthetic_corpus(20, seed=0)
    assert len(issues) == 20
    ids = [c.commit_id for c in commits]
    assert len(ids) == len(set(ids))
    per_issue = {}
    for link in links:
        per_issue[link.issue.issue_id] = per_issue.get(link.issue.issue_id, 0) + 1
    assert set(per_issue) == {i.issue_id for i in issues}
    assert all(1 <= n <= 3 for n in per_issue.values())
    # untagged noise commits exist for time-window sampling
    assert any(c.tagged_issue_id is None for c in commits)
    for issue in issues:
        assert issue.create_date < issue.update_date < issue.last_resolved_date
    for link in links:
        assert link.commit.commit_time is not None
        assert 0 < link.commit.commit_time - link.issue.create_date < 5 * 86400


def test_synth_rejects_tiny_or_bad_args():
    with pytest.raises(ValueError):
        generate_synthetic_corpus(9)
    with pytest.raises(ValueError):
        generate_synthetic_corpus(10, overlap=1.5)

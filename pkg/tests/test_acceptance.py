"""Acceptance gate for the whole pipeline.

Ten checks: metric-oracle equivalence, pinned ranking values, random-model
sanity, gradient correctness against finite differences, distillation fixed
point and progress, pinned loss values, end-to-end learning signal versus
the lexical baseline, contrastive-ablation direction, false-link conflict
freedom, and bit-level protocol determinism. One PASS/FAIL line prints per
criterion regardless of output capturing.
"""

import copy
import math
import os
import random
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import conftest

from tracelink.corpus import SplitSpec, generate_synthetic_corpus, split_links
from tracelink.distill import (
    ChannelMap,
    DistillSchedule,
    collate,
    distill_loss,
    prepare_sequences,
    run_distillation,
)
from tracelink.encoder import (
    Encoder,
    EncoderConfig,
    Vocab,
    init_student_from_teacher,
    represent_commits,
    represent_issues,
)
from tracelink.links import extract_true_links, generate_issue_code_links
from tracelink.retrieval import (
    RankingQuery,
    commit_document,
    evaluate_queries,
    issue_document,
    ndcg_at_k,
    training_corpus_stats,
    vsm_score,
)
from tracelink.trainer import (
    AuxClassifier,
    Batch,
    TrainConfig,
    aux_features,
    aux_forward,
    aux_loss,
    build_batch,
    contrastive_anchor_losses,
    contrastive_loss,
    main_loss,
    train,
)


def _verdict(criterion: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {criterion:>2}: {'PASS' if ok else 'FAIL'} - {detail}"
    conftest.VERDICTS.append(line)
    print(line, flush=True)
    assert ok, line


def _issue_stub(i):
    from tracelink.corpus import IssueRecord
    return IssueRecord(issue_id=f"I-{i}", title_tokens=["t"],
                       description_tokens=["d"], create_date=0.0,
                       update_date=1.0)


def _commit_stub(i, issue_id):
    from tracelink.corpus import ChangedFile, CommitRecord
    return CommitRecord(
        commit_id=f"c{i}", message_tokens=["m"],
        changed_files=[ChangedFile("src/A.java", "A.java", ["x"], [])],
        commit_time=2.0, tagged_issue_id=issue_id)


def _make_query(rng, n_relevant=1):
    issue = _issue_stub(0)
    rel = sorted(rng.sample(range(100), n_relevant))
    labels = [1 if i in rel else 0 for i in range(100)]
    candidates = [_commit_stub(i, issue.issue_id if labels[i] else "other")
                  for i in range(100)]
    q = RankingQuery(query_id="q", issue=issue, candidates=candidates,
                     labels=labels)
    q.scores = [rng.random() for _ in range(100)]
    return q


# --- criterion 1: metric oracle equivalence --------------------------------------

def _bf_rank(scores, i):
    """Rank without sorting: strictly better scores, then lower index."""
    return 1 + sum(1 for j in range(len(scores))
                   if scores[j] > scores[i]
                   or (scores[j] == scores[i] and j < i))


def _bf_query_metrics(scores, labels):
    ranks = [_bf_rank(scores, i) for i in range(len(scores)) if labels[i]]
    n_rel = len(ranks)
    out = {}
    for k in (1, 10):
        in_top = sum(1 for r in ranks if r <= k)
        out[f"p{k}"] = in_top / k
        out[f"hit{k}"] = 1.0 if in_top else 0.0
        dcg = sum(1.0 / math.log2(r + 1) for r in ranks if r <= k)
        z = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, n_rel) + 1))
        out[f"ndcg{k}"] = dcg / z
    out["rr"] = 1.0 / min(ranks)
    return out


def test_criterion_1_metric_oracle_equivalence():
    start = time.monotonic()
    rng = random.Random(101)
    queries = [_make_query(rng, n_relevant=rng.choice((1, 1, 1, 2, 3)))
               for _ in range(1000)]
    report = evaluate_queries(queries)

    agg = {k: 0.0 for k in
           ("p1", "p10", "hit1", "hit10", "ndcg1", "ndcg10", "rr")}
    for q in queries:
        for key, val in _bf_query_metrics(q.scores, q.labels).items():
            agg[key] += val
    n = len(queries)
    diffs = {
        "P@1": abs(report.p_at_1 - agg["p1"] / n),
        "P@10": abs(report.p_at_10 - agg["p10"] / n),
        "Hit@1": abs(report.hit_at_1 - agg["hit1"] / n),
        "Hit@10": abs(report.hit_at_10 - agg["hit10"] / n),
        "MRR": abs(report.mrr - agg["rr"] / n),
        "NDCG@1": abs(report.ndcg_at_1 - agg["ndcg1"] / n),
        "NDCG@10": abs(report.ndcg_at_10 - agg["ndcg10"] / n),
    }
    elapsed = time.monotonic() - start
    worst = max(diffs.values())
    _verdict(1, worst <= 1e-9 and elapsed < 10.0,
             f"1000 queries, max |package - brute force| = {worst:.2e}, "
             f"{elapsed:.1f}s")


# --- criterion 2: pinned ranking values --------------------------------------------

def test_criterion_2_ndcg_pins_and_oracle_scores():
    scores = [0.0] * 100
    scores[7] = 2.0
    scores[3] = 1.0
    q = _make_query(random.Random(0))
    q.labels = [1 if i == 3 else 0 for i in range(100)]
    q.scores = scores
    rank2 = ndcg_at_k(q, 10)

    rng = random.Random(5)
    oracle = []
    for _ in range(40):
        query = _make_query(rng)
        query.scores = [float(l) for l in query.labels]
        oracle.append(query)
    rep = evaluate_queries(oracle)
    exact_ones = (rep.p_at_1 == 1.0 and rep.hit_at_1 == 1.0
                  and rep.hit_at_10 == 1.0 and rep.mrr == 1.0
                  and rep.ndcg_at_1 == 1.0 and rep.ndcg_at_10 == 1.0)
    ok = (abs(rank2 - 0.63093) <= 1e-4 and exact_ones
          and abs(rep.p_at_10 - 0.1) <= 1e-12)
    _verdict(2, ok,
             f"NDCG@10(rank 2) = {rank2:.6f}; oracle scores -> six exact 1.0 "
             f"metrics, P@10 = {rep.p_at_10:.12f}")


# --- criterion 3: random-model sanity --------------------------------------------

def test_criterion_3_random_scores_mrr():
    rng = random.Random(303)
    issue = _issue_stub(0)
    candidates = [_commit_stub(i, "other") for i in range(100)]
    queries = []
    for _ in range(10_000):
        rel = rng.randrange(100)
        q = RankingQuery(
            query_id="q", issue=issue, candidates=candidates,
            labels=[1 if i == rel else 0 for i in range(100)])
        q.scores = [rng.random() for _ in range(100)]
        queries.append(q)
    got = evaluate_queries(queries).mrr
    _verdict(3, abs(got - 0.0519) <= 0.01,
             f"uniform scores over 10000 queries: MRR = {got:.4f} "
             f"(expected 0.0519 +/- 0.01)")


# --- criterion 4: gradients vs central finite differences ---------------------------

def _fd_agreement(params, f, n_samples, seed, eps=1e-4, tol=1e-3):
    """Fraction of sampled coordinates where autograd matches central FD."""
    loss = f()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    sizes = [p.numel() for p in params]
    rng = random.Random(seed)
    coords = [rng.randrange(sum(sizes)) for _ in range(n_samples)]
    agree = 0
    for flat in coords:
        k = 0
        while flat >= sizes[k]:
            flat -= sizes[k]
            k += 1
        p = params[k]
        with torch.no_grad():
            p.view(-1)[flat] += eps
            hi = float(f())
            p.view(-1)[flat] -= 2 * eps
            lo = float(f())
            p.view(-1)[flat] += eps
        fd = (hi - lo) / (2 * eps)
        g = 0.0 if grads[k] is None else float(grads[k].view(-1)[flat])
        if abs(g) < 1e-10 and abs(fd) < 1e-10:
            agree += 1
        elif abs(g - fd) / max(abs(g), abs(fd), 1e-8) <= tol:
            agree += 1
    return agree / n_samples


def test_criterion_4_gradient_correctness():
    start = time.monotonic()
    torch.manual_seed(44)
    issues, commits, links = generate_synthetic_corpus(12, seed=3, overlap=0.8)
    vocab = Vocab.from_corpus([i.text_tokens for i in issues]
                              + [c.message_tokens for c in commits]
                              + [c.code_tokens for c in commits])
    by_issue = {}
    for l in links:
        by_issue.setdefault(l.issue.issue_id, []).append(l)
    multi = next(g for g in by_issue.values() if len(g) >= 2)
    singles = [g[0] for g in by_issue.values() if len(g) == 1]
    four = multi[:2] + singles[:2]   # batch of 4 with a shared-issue pair
    true_pairs = {(l.issue.issue_id, l.commit.commit_id) for l in links}

    cfg = TrainConfig(batch_size=4, seed=9)
    encoder = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=2, n_heads=1, hidden_dim=8,
        max_positions=96, seed=5)).double()
    clf = AuxClassifier(8, seed=5).double()
    frozen = build_batch(four, encoder, vocab, cfg, true_pairs)
    fixed_links, labels = frozen.links, frozen.labels.detach().clone()

    def rebuild():
        uniq_i = list({l.issue.issue_id: l.issue for l in fixed_links}.values())
        uniq_c = list({l.commit.commit_id: l.commit for l in fixed_links}.values())
        ir = represent_issues(uniq_i, encoder, vocab, cfg.k_nl)
        cr = represent_commits(uniq_c, encoder, vocab, cfg.k_nl, cfg.k_pl)
        irow = {r.issue_id: i for i, r in enumerate(uniq_i)}
        crow = {r.commit_id: i for i, r in enumerate(uniq_c)}
        return Batch(
            links=fixed_links, labels=labels,
            issue_reps=ir[torch.tensor([irow[l.issue.issue_id]
                                        for l in fixed_links])],
            commit_reps=cr[torch.tensor([crow[l.commit.commit_id]
                                         for l in fixed_links])],
            n_true=frozen.n_true, groups=frozen.groups)

    aux_examples = generate_issue_code_links(four)[:4]
    enc_params = [p for p in encoder.parameters() if p.requires_grad]
    clf_params = list(clf.parameters())

    def aux_objective():
        pooled_issue, pooled_code, labels = aux_features(
            aux_examples, encoder, vocab)
        return aux_loss(aux_forward(pooled_issue, pooled_code, clf), labels)

    teacher = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=6, n_heads=1, hidden_dim=8,
        max_positions=96, seed=6)).double().freeze()
    student = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=2, n_heads=1, hidden_dim=8,
        max_positions=96, seed=7)).double()
    kd_ids, kd_mask = collate(prepare_sequences(issues, commits, vocab)[:4])
    channel_map = ChannelMap(((1, 1), (5, 2)))

    fractions = {
        "main": _fd_agreement(
            enc_params, lambda: main_loss(rebuild()), 120, seed=1),
        "cl": _fd_agreement(
            enc_params, lambda: contrastive_loss(rebuild(), cfg.temperature)[0],
            120, seed=2),
        "aux": _fd_agreement(enc_params + clf_params, aux_objective,
                             120, seed=3),
        "kd": _fd_agreement(
            [p for p in student.parameters() if p.requires_grad],
            lambda: distill_loss(teacher(kd_ids, kd_mask),
                                 student(kd_ids, kd_mask),
                                 channel_map, kd_mask),
            120, seed=4),
    }
    elapsed = time.monotonic() - start
    ok = all(v >= 0.99 for v in fractions.values()) and elapsed < 60.0
    detail = ", ".join(f"L_{k}: {v:.1%}" for k, v in fractions.items())
    _verdict(4, ok, f"FD agreement on 120 sampled params each - {detail}; "
                    f"{elapsed:.1f}s")


# --- criterion 5: distillation fixed point and progress -----------------------------

def test_criterion_5_distill_fixed_point_and_progress():
    start = time.monotonic()
    issues, commits, _ = generate_synthetic_corpus(40, seed=11, overlap=0.8)
    vocab = Vocab.from_corpus([i.text_tokens for i in issues]
                              + [c.message_tokens for c in commits]
                              + [c.code_tokens for c in commits])
    seqs = prepare_sequences(issues, commits, vocab)[:50]
    channel_map = ChannelMap(((1, 1), (5, 2)))

    teacher = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=6, n_heads=1, hidden_dim=16, seed=2))
    with torch.no_grad():   # make blocks 2-4 exact identities
        for block in teacher.blocks[1:4]:
            for layer in (block.o, block.ff2):
                layer.weight.zero_()
                layer.bias.zero_()
    copied = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=2, n_heads=1, hidden_dim=16, seed=3))
    init_student_from_teacher(teacher, copied, channel_map.channels)
    ids, mask = collate(seqs[:8])
    with torch.no_grad():
        fixed_point = float(distill_loss(
            teacher(ids, mask), copied(ids, mask), channel_map, mask))

    fresh_teacher = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=6, n_heads=1, hidden_dim=16, seed=0))
    fresh_student = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=2, n_heads=1, hidden_dim=16, seed=99))
    result = run_distillation(
        fresh_teacher, fresh_student, seqs, channel_map,
        DistillSchedule(epochs=20, batch_size=16, lr=1e-3, seed=0))
    smoothed = sum(result.epoch_losses[-3:]) / 3
    ratio = smoothed / result.epoch_losses[0]
    elapsed = time.monotonic() - start
    ok = fixed_point < 1e-8 and ratio < 0.25 and elapsed < 300.0
    _verdict(5, ok, f"copied-layer loss = {fixed_point:.2e}; smoothed 20-epoch "
                    f"loss at {ratio:.1%} of initial; {elapsed:.0f}s")


# --- criterion 6: pinned loss values ---------------------------------------------

def test_criterion_6_loss_pins():
    v = torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    equal_sim, _ = contrastive_anchor_losses(v, ["a", "b"], tau=0.07)
    d_equal = max(abs(float(x) - math.log(2.0)) for x in equal_sim)

    w = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    opposed, _ = contrastive_anchor_losses(w, ["a", "b"], tau=1.0)
    d_opposed = abs(float(opposed[0]) - 0.12693)

    clf = AuxClassifier(8, seed=0)
    with torch.no_grad():
        for layer in (clf.f1, clf.f2):
            layer.weight.zero_()
            layer.bias.zero_()
        probs = aux_forward(torch.randn(3, 8), torch.randn(3, 8), clf)
        per_example = aux_loss(probs, torch.tensor([1, 0, 1])) / 3
    d_aux = abs(float(per_example) - math.log(2.0))

    ok = d_equal <= 1e-6 and d_opposed <= 1e-5 and d_aux <= 1e-9
    _verdict(6, ok, f"equal-sim anchor vs ln 2: {d_equal:.2e}; opposed-pair "
                    f"vs 0.12693: {d_opposed:.2e}; zero-weight aux vs ln 2: "
                    f"{d_aux:.2e}")


# --- shared corpus for criteria 7-8 ------------------------------------------------

@pytest.fixture(scope="module")
def corpus200():
    issues, commits, _ = generate_synthetic_corpus(200, seed=7, overlap=0.9)
    links = extract_true_links(issues, commits).links
    tr, va, te = split_links(links, SplitSpec(seed=7))
    vocab = Vocab.from_corpus([i.text_tokens for i in issues]
                              + [c.message_tokens for c in commits]
                              + [c.code_tokens for c in commits])
    return {
        "issues": issues, "commits": commits,
        "train": tr, "valid": va, "test": te, "vocab": vocab,
        "seqs": prepare_sequences(issues, commits, vocab),
        "aux": generate_issue_code_links(tr),
    }


def _distilled_student(c, hidden, seed=7):
    teacher = Encoder(EncoderConfig(
        vocab_size=len(c["vocab"]), n_layers=6, n_heads=1,
        hidden_dim=hidden, seed=seed))
    student = Encoder(EncoderConfig(
        vocab_size=len(c["vocab"]), n_layers=2, n_heads=1,
        hidden_dim=hidden, seed=seed + 1))
    return run_distillation(
        teacher, student, c["seqs"], ChannelMap(((1, 1), (5, 2))),
        DistillSchedule(epochs=1, batch_size=32, lr=1e-3, seed=seed)).student


def _vsm_validation_mrr(train_links, valid_links):
    """The trainer's validation ranking protocol scored by TF-IDF cosine."""
    stats = training_corpus_stats(train_links)
    vi = list({l.issue.issue_id: l.issue for l in valid_links}.values())
    vc = list({l.commit.commit_id: l.commit for l in valid_links}.values())
    irow = {r.issue_id: i for i, r in enumerate(vi)}
    crow = {r.commit_id: i for i, r in enumerate(vc)}
    linked = {}
    for l in valid_links:
        linked.setdefault(l.issue.issue_id, set()).add(l.commit.commit_id)
    sims = np.zeros((len(vi), len(vc)))
    for a, issue in enumerate(vi):
        doc = issue_document(issue)
        for b, commit in enumerate(vc):
            sims[a, b] = vsm_score(doc, commit_document(commit), stats)
    total = 0.0
    for link in valid_links:
        row = sims[irow[link.issue.issue_id]]
        own = crow[link.commit.commit_id]
        rank = 1
        for j, commit in enumerate(vc):
            if j == own or commit.commit_id in linked[link.issue.issue_id]:
                continue
            if row[j] > row[own] or (row[j] == row[own] and j < own):
                rank += 1
        total += 1.0 / rank
    return total / len(valid_links)


def test_criterion_7_learning_signal_beats_vsm(corpus200):
    start = time.monotonic()
    c = corpus200
    student = _distilled_student(c, hidden=64)
    clf = AuxClassifier(64, seed=7)
    result = train(student, clf, c["train"], c["valid"], c["aux"], c["vocab"],
                   TrainConfig(epochs=30, seed=7, lr=1e-3))
    vsm_mrr = _vsm_validation_mrr(c["train"], c["valid"])
    elapsed = time.monotonic() - start
    ok = (result.best_valid_mrr >= 0.5 and result.best_valid_mrr >= vsm_mrr
          and elapsed < 900.0)
    _verdict(7, ok, f"200 issues, overlap 0.9: model MRR = "
                    f"{result.best_valid_mrr:.4f} (epoch {result.best_epoch}) "
                    f"vs VSM {vsm_mrr:.4f}; {elapsed:.0f}s")


def test_criterion_8_contrastive_ablation_direction(corpus200):
    start = time.monotonic()
    c = corpus200
    base = _distilled_student(c, hidden=32)
    wins = 0
    pairs = []
    for seed in (1, 2, 3, 4, 5):
        scores = {}
        for lam in (1.0, 0.0):
            student = copy.deepcopy(base)
            clf = AuxClassifier(32, seed=seed)
            result = train(student, clf, c["train"], c["valid"], c["aux"],
                           c["vocab"],
                           TrainConfig(epochs=10, seed=seed, lr=1e-3,
                                       lambda_cl=lam))
            scores[lam] = result.best_valid_mrr
        wins += scores[1.0] >= scores[0.0]
        pairs.append(f"{scores[1.0]:.3f}/{scores[0.0]:.3f}")
    elapsed = time.monotonic() - start
    _verdict(8, wins >= 3, f"full vs no-contrastive MRR per seed: "
                           f"{', '.join(pairs)} -> {wins}/5 wins; {elapsed:.0f}s")


# --- criterion 9: false-link conflict freedom ---------------------------------------

def test_criterion_9_no_false_link_collisions():
    start = time.monotonic()
    issues, commits, links = generate_synthetic_corpus(60, seed=13, overlap=0.9)
    tr, va, _ = split_links(links, SplitSpec(seed=13))
    vocab = Vocab.from_corpus([i.text_tokens for i in issues]
                              + [c.message_tokens for c in commits]
                              + [c.code_tokens for c in commits])
    student = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=2, n_heads=1, hidden_dim=16, seed=1))
    clf = AuxClassifier(16, seed=1)
    all_true = {(l.issue.issue_id, l.commit.commit_id) for l in links}

    counts = {"epochs": 0, "false": 0, "collisions": 0}

    def audit(epoch, false_links):
        counts["epochs"] += 1
        for fl in false_links:
            counts["false"] += 1
            if (fl.issue.issue_id, fl.commit.commit_id) in all_true:
                counts["collisions"] += 1

    result = train(student, clf, tr, va, generate_issue_code_links(tr), vocab,
                   TrainConfig(epochs=100, seed=1, lr=5e-4),
                   epoch_callback=audit)
    elapsed = time.monotonic() - start
    ok = (counts["epochs"] == 100 and counts["false"] > 0
          and counts["collisions"] == 0 and result.aborted_epoch is None)
    _verdict(9, ok, f"{counts['false']} generated false links over "
                    f"{counts['epochs']} epochs, {counts['collisions']} "
                    f"collisions; {elapsed:.0f}s")


# --- criterion 10: protocol determinism ----------------------------------------------

def _run_chain(root: Path, hashseed: str) -> tuple[bytes, bytes]:
    env = dict(os.environ)
    env["PYTHONHASHSEED"] = hashseed
    env["PYTHONPATH"] = str(Path(__file__).resolve().parents[1] / "src")

    def cli(*args):
        proc = subprocess.run(
            [sys.executable, "-m", "tracelink.cli", *args],
            env=env, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return proc

    raw, data = root / "raw", root / "data"
    linkdir, dist, trained = root / "links", root / "distill", root / "train"
    cli("synth", "--out", str(raw), "--n-issues", "260", "--seed", "3")
    cli("preprocess", "--data", str(raw), "--out", str(data))
    cli("links", "--data", str(data), "--out", str(linkdir), "--seed", "3")
    cli("distill", "--data", str(data), "--out", str(dist), "--seed", "3",
        "--epochs", "1", "--hidden-dim", "16", "--teacher-layers", "6",
        "--batch-size", "32")
    cli("train", "--data", str(data), "--links", str(linkdir),
        "--student", str(dist / "student.npz"), "--out", str(trained),
        "--seed", "3", "--epochs", "2", "--lr", "1e-3", "--batch-size", "32")
    cli("eval", "--data", str(data), "--links", str(linkdir),
        "--model", str(trained / "model.npz"),
        "--vocab", str(dist / "vocab.txt"),
        "--out", str(root / "eval"), "--seed", "3")
    cli("vsm", "--data", str(data), "--links", str(linkdir),
        "--out", str(root / "vsm"), "--seed", "3")
    return ((root / "eval" / "metrics.json").read_bytes(),
            (root / "vsm" / "metrics_vsm.json").read_bytes())


def test_criterion_10_protocol_determinism(tmp_path):
    start = time.monotonic()
    a = _run_chain(tmp_path / "run_a", hashseed="1")
    b = _run_chain(tmp_path / "run_b", hashseed="2")
    elapsed = time.monotonic() - start
    ok = a[0] == b[0] and a[1] == b[1]
    _verdict(10, ok, f"two full chains (different hash seeds): model report "
                     f"{'identical' if a[0] == b[0] else 'DIFFERS'}, baseline "
                     f"report {'identical' if a[1] == b[1] else 'DIFFERS'}; "
                     f"{elapsed:.0f}s")

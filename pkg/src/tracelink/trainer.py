"""Multi-task fine-tuning of the student encoder.

Each step combines three objectives over a batch of links:

- recovery: sum of |label - cos(issue, commit)| over true plus freshly
  generated false links;
- inter-commit contrastive: for each true-link commit, pull it toward
  another commit of the same issue (itself when the issue has no in-batch
  sibling) against all different-issue commits, normalized-exponential
  form with temperature;
- auxiliary issue-code: a two-layer classifier over pooled issue text and
  pooled file code predicting whether the file is mentioned by the issue.

False links are regenerated every batch from the current encoder's issue
embeddings. The learning rate decays by a fixed factor on a fixed epoch
interval, and the kept checkpoint is the epoch with the best validation
MRR.
"""

from __future__ import annotations

import copy
import csv
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import LinkRecord
from .encoder import (
    K_NL,
    K_PL,
    Encoder,
    Vocab,
    pool,
    represent_commits,
    represent_issues,
)
from .links import IssueCodeLink, generate_false_links_similarity

logger = logging.getLogger(__name__)

LINK_EXISTS = 0  # probability index of the "link exists" class


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 4e-5
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 6
    temperature: float = 0.07
    lambda_cl: float = 1.0
    lambda_aux: float = 1.0
    epochs: int = 30
    seed: int = 0
    k_nl: int = K_NL
    k_pl: int = K_PL

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lambda_cl < 0 or self.lambda_aux < 0:
            raise ValueError("task weights must be non-negative")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs and lr must be positive")
        if self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ValueError("bad lr decay parameters")


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Stepped decay: lr * factor^((epoch-1) // every), epochs 1-based."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return cfg.lr * cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every)


@dataclass
class Batch:
    links: list[LinkRecord]  # true links first, then false links
    labels: torch.Tensor  # (n,) float
    issue_reps: torch.Tensor  # (n, 2d)
    commit_reps: torch.Tensor  # (n, 2d)
    n_true: int
    groups: list[str]  # issue id per true link


class AuxClassifier(nn.Module):
    """tanh(f1: 3d->d) followed by f2: d->2, logits out."""

    def __init__(self, dim: int, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.f1 = nn.Linear(3 * dim, dim)
        self.f2 = nn.Linear(dim, 2)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in (self.f1, self.f2):
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=g) * 0.02)
                layer.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.f2(torch.tanh(self.f1(features)))


# --- losses -------------------------------------------------------------------

def link_cosines(batch: Batch) -> torch.Tensor:
    return F.cosine_similarity(batch.issue_reps, batch.commit_reps, dim=-1)


def main_loss(batch: Batch) -> torch.Tensor:
    """Sum over links of |label - cos(issue, commit)|."""
    return (batch.labels - link_cosines(batch)).abs().sum()


def contrastive_anchor_losses(commit_reps: torch.Tensor,
                              groups: Sequence[str],
                              tau: float) -> tuple[torch.Tensor, int]:
    """Per-anchor contrastive losses and the count of skipped anchors.

    The positive for anchor i is the lowest-index other commit sharing its
    group, or the anchor itself; negatives are all different-group commits.
    Anchors with no negative are skipped. The positive term joins the
    denominator, keeping every loss non-negative.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = len(groups)
    if commit_reps.shape[0] != n:
        raise ValueError("groups / representations length mismatch")
    norms = commit_reps.norm(dim=-1, keepdim=True).clamp(min=1e-8)
    unit = commit_reps / norms
    sim = (unit @ unit.t()) / tau

    losses = []
    skipped = 0
    for i in range(n):
        pos = next((j for j in range(n) if groups[j] == groups[i] and j != i), i)
        negs = [j for j in range(n) if groups[j] != groups[i]]
        if not negs:
            skipped += 1
            continue
        logits = torch.cat([sim[i, pos].reshape(1), sim[i, negs]])
        losses.append(torch.logsumexp(logits, dim=0) - sim[i, pos])
    stacked = torch.stack(losses) if losses else commit_reps.new_zeros(0)
    return stacked, skipped


def contrastive_loss(batch: Batch, tau: float) -> tuple[torch.Tensor, int]:
    """Sum of per-anchor losses over the batch's true-link commits."""
    if batch.n_true < 2:
        raise ValueError("contrastive loss needs at least two true links")
    anchor_losses, skipped = contrastive_anchor_losses(
        batch.commit_reps[: batch.n_true], batch.groups, tau)
    return anchor_losses.sum(), skipped


def aux_forward(issue_pooled: torch.Tensor, code_pooled: torch.Tensor,
                clf: AuxClassifier) -> torch.Tensor:
    """Probability pairs from [s' ; c' ; |c' - s'|]; index 0 = link exists."""
    if issue_pooled.shape != code_pooled.shape:
        raise ValueError("pooled issue/code dimensions differ")
    if issue_pooled.shape[-1] != clf.dim:
        raise ValueError(f"classifier expects dim {clf.dim}, "
                         f"got {issue_pooled.shape[-1]}")
    features = torch.cat(
        [issue_pooled, code_pooled, (code_pooled - issue_pooled).abs()], dim=-1)
    return torch.softmax(clf(features), dim=-1)


def aux_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Summed negative log-likelihood of the labeled class, clamped at 1e-12.

    The log runs in double precision so degenerate probabilities (exact 0.5
    from a zero classifier) produce exact reference values.
    """
    idx = torch.where(labels == 1, LINK_EXISTS, 1 - LINK_EXISTS)
    picked = probs.gather(1, idx.view(-1, 1)).to(torch.float64).clamp(min=1e-12)
    return -picked.log().sum()


def aux_features(examples: Sequence[IssueCodeLink], encoder: Encoder,
                 vocab: Vocab, k_nl: int = K_NL, k_pl: int = K_PL
                 ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pooled issue text, pooled file code, and labels for aux examples."""
    issue_rows = [vocab.tokenize(e.issue.text_tokens, k_nl) for e in examples]
    code_rows = [vocab.tokenize(e.file.diff_tokens, k_pl) for e in examples]
    i_ids = torch.stack([r[0] for r in issue_rows])
    i_mask = torch.stack([r[1] for r in issue_rows])
    c_ids = torch.stack([r[0] for r in code_rows])
    c_mask = torch.stack([r[1] for r in code_rows])
    issue_pooled = pool(encoder(i_ids, i_mask)[-1], i_mask)
    code_pooled = pool(encoder(c_ids, c_mask)[-1], c_mask)
    labels = torch.tensor([e.label for e in examples], dtype=torch.long)
    return issue_pooled, code_pooled, labels


class LossParts(NamedTuple):
    main: float
    cl: float
    aux: float
    total: float
    skipped_anchors: int


def total_loss(batch: Batch, aux_examples: Sequence[IssueCodeLink],
               encoder: Encoder, clf: AuxClassifier, vocab: Vocab,
               cfg: TrainConfig) -> tuple[torch.Tensor, LossParts]:
    """Weighted multi-task objective: main + λ_cl·cl + λ_aux·aux."""
    main = main_loss(batch)
    cl, skipped = contrastive_loss(batch, cfg.temperature)
    if aux_examples:
        s, c, labels = aux_features(aux_examples, encoder, vocab,
                                    cfg.k_nl, cfg.k_pl)
        aux = aux_loss(aux_forward(s, c, clf), labels)
    else:
        aux = main.new_zeros(())
    total = main + cfg.lambda_cl * cl + cfg.lambda_aux * aux
    parts = LossParts(main.item(), cl.item(), aux.item(), total.item(), skipped)
    return total, parts


# --- batch assembly ---------------------------------------------------------------

def build_batch(true_links: Sequence[LinkRecord], encoder: Encoder,
                vocab: Vocab, cfg: TrainConfig,
                true_pairs: set[tuple[str, str]]) -> Batch:
    """Representations for the true links plus fresh in-batch false links.

    False-link selection uses the current encoder's (detached) issue
    embeddings; the returned representations carry gradients.
    """
    issues = list({l.issue.issue_id: l.issue for l in true_links}.values())
    commits = list({l.commit.commit_id: l.commit for l in true_links}.values())
    issue_reps = represent_issues(issues, encoder, vocab, cfg.k_nl)
    commit_reps = represent_commits(commits, encoder, vocab, cfg.k_nl, cfg.k_pl)

    emb = {issue.issue_id: issue_reps[i].detach().numpy()
           for i, issue in enumerate(issues)}
    false_links = generate_false_links_similarity(true_links, emb, true_pairs)

    issue_row = {issue.issue_id: i for i, issue in enumerate(issues)}
    commit_row = {commit.commit_id: i for i, commit in enumerate(commits)}
    links = list(true_links) + false_links
    i_idx = torch.tensor([issue_row[l.issue.issue_id] for l in links])
    c_idx = torch.tensor([commit_row[l.commit.commit_id] for l in links])
    return Batch(
        links=links,
        labels=torch.tensor([float(l.label) for l in links]),
        issue_reps=issue_reps[i_idx],
        commit_reps=commit_reps[c_idx],
        n_true=len(true_links),
        groups=[l.issue.issue_id for l in true_links],
    )


# --- validation ------------------------------------------------------------------

def validation_mrr(encoder: Encoder, valid_links: Sequence[LinkRecord],
                   vocab: Vocab, cfg: TrainConfig) -> float:
    """Rank each link's commit against the other validation commits.

    Candidates for a link are every distinct validation commit except those
    truly linked to the same issue (other than the link's own commit); ties
    resolve by candidate position. Returns 0.0 when there are no links.
    """
    if not valid_links:
        return 0.0
    issues = list({l.issue.issue_id: l.issue for l in valid_links}.values())
    commits = list({l.commit.commit_id: l.commit for l in valid_links}.values())
    issue_row = {r.issue_id: i for i, r in enumerate(issues)}
    commit_row = {r.commit_id: i for i, r in enumerate(commits)}
    linked: dict[str, set[str]] = {}
    for l in valid_links:
        linked.setdefault(l.issue.issue_id, set()).add(l.commit.commit_id)

    with torch.no_grad():
        issue_reps = represent_issues(issues, encoder, vocab, cfg.k_nl)
        commit_reps = represent_commits(commits, encoder, vocab, cfg.k_nl, cfg.k_pl)
        iu = issue_reps / issue_reps.norm(dim=-1, keepdim=True).clamp(min=1e-8)
        cu = commit_reps / commit_reps.norm(dim=-1, keepdim=True).clamp(min=1e-8)
        sims = (iu @ cu.t()).numpy()

    total = 0.0
    for link in valid_links:
        row = sims[issue_row[link.issue.issue_id]]
        own = commit_row[link.commit.commit_id]
        own_score = row[own]
        rank = 1
        for j, commit in enumerate(commits):
            if j == own:
                continue
            if commit.commit_id in linked[link.issue.issue_id]:
                continue  # same-issue siblings are not distractors
            if row[j] > own_score or (row[j] == own_score and j < own):
                rank += 1
        total += 1.0 / rank
    return total / len(valid_links)


# --- training loop -----------------------------------------------------------------

class TrainResult(NamedTuple):
    history: list[dict]
    best_epoch: int
    best_valid_mrr: float
    aborted_epoch: int | None


EpochCallback = Callable[[int, list[LinkRecord]], None]


def train(student: Encoder, clf: AuxClassifier,
          train_links: Sequence[LinkRecord],
          valid_links: Sequence[LinkRecord],
          aux_links: Sequence[IssueCodeLink],
          vocab: Vocab, cfg: TrainConfig,
          epoch_callback: EpochCallback | None = None,
          history_csv: str | None = None) -> TrainResult:
    """Run the multi-task loop, keeping the best-validation-MRR weights.

    History rows carry per-epoch mean loss parts and validation MRR. On a
    non-finite loss the run aborts and the best checkpoint so far is
    restored. Deterministic for a given (data, cfg) pair.
    """
    if len(train_links) < 2:
        raise ValueError("need at least two training links")
    if len({l.issue.issue_id for l in train_links}) < 2:
        raise ValueError("training links must span at least two issues")

    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    true_pairs = {(l.issue.issue_id, l.commit.commit_id)
                  for l in list(train_links) + list(valid_links)}
    optimizer = torch.optim.Adam(
        list(student.parameters()) + list(clf.parameters()), lr=cfg.lr)

    def snapshot():
        return (copy.deepcopy(student.state_dict()),
                copy.deepcopy(clf.state_dict()))

    def restore(state):
        student.load_state_dict(state[0])
        clf.load_state_dict(state[1])

    best_state = snapshot()
    best_mrr = -1.0
    best_epoch = 0
    aborted: int | None = None
    history: list[dict] = []
    aux_pool = list(aux_links)

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_for_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = list(train_links)
        rng.shuffle(order)
        if aux_pool:
            rng.shuffle(aux_pool)
        aux_cursor = 0

        sums = {"main": 0.0, "cl": 0.0, "aux": 0.0, "total": 0.0}
        n_batches = 0
        epoch_false: list[LinkRecord] = []

        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            if len({l.issue.issue_id for l in chunk}) < 2:
                logger.debug("skipping batch with a single issue group")
                continue
            aux_chunk: list[IssueCodeLink] = []
            if aux_pool:
                for _ in range(cfg.batch_size):
                    aux_chunk.append(aux_pool[aux_cursor % len(aux_pool)])
                    aux_cursor += 1

            batch = build_batch(chunk, student, vocab, cfg, true_pairs)
            loss, parts = total_loss(batch, aux_chunk, student, clf, vocab, cfg)
            if not torch.isfinite(loss):
                logger.error("non-finite loss at epoch %d; aborting and "
                             "restoring best checkpoint", epoch)
                aborted = epoch
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            epoch_false.extend(batch.links[batch.n_true:])
            for key, val in zip(sums, (parts.main, parts.cl, parts.aux,
                                       parts.total)):
                sums[key] += val
            n_batches += 1

        if aborted is not None:
            break
        denom = max(n_batches, 1)
        valid_mrr = validation_mrr(student, valid_links, vocab, cfg)
        row = {"epoch": epoch, "lr": lr,
               **{k: v / denom for k, v in sums.items()},
               "valid_mrr": valid_mrr}
        history.append(row)
        logger.info("epoch %d: total %.4f, valid MRR %.4f",
                    epoch, row["total"], valid_mrr)
        if valid_mrr > best_mrr:
            best_mrr = valid_mrr
            best_epoch = epoch
            best_state = snapshot()
        if epoch_callback is not None:
            epoch_callback(epoch, epoch_false)

    restore(best_state)
    if history_csv:
        path = Path(history_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "main", "cl", "aux", "total", "valid_mrr"])
            for row in history:
                writer.writerow([row["epoch"]] + [
                    f"{row[k]:.8f}" for k in
                    ("main", "cl", "aux", "total", "valid_mrr")])
    return TrainResult(history, best_epoch, max(best_mrr, 0.0), aborted)

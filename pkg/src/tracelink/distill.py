"""Layer-wise knowledge distillation from a frozen deep encoder.

A channel map pairs teacher blocks with student blocks (1-based, e.g.
"1:1,5:2"). The distillation loss is, per channel, the squared difference
between the mapped hidden states summed over real (non-pad) positions and
hidden dimensions, averaged over the batch, then summed across channels.
"""

from __future__ import annotations

import copy
import csv
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import torch
from torch import nn

from .corpus import CommitRecord, IssueRecord
from .encoder import K_NL, K_PL, Encoder, EncoderConfig, Vocab, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelMap:
    channels: tuple[tuple[int, int], ...] = ((1, 1), (5, 2))

    def __post_init__(self):
        if not self.channels:
            raise ValueError("channel map must contain at least one pair")
        students = [s for _, s in self.channels]
        if len(set(students)) != len(students):
            raise ValueError("each student layer may receive one channel only")
        for t, s in self.channels:
            if t < 1 or s < 1:
                raise ValueError("channel layer indices are 1-based positives")

    @classmethod
    def parse(cls, text: str) -> "ChannelMap":
        """Parse "1:1,5:2" (a leading t/s letter per index is tolerated)."""
        pairs = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            left, sep, right = part.partition(":")
            if not sep:
                raise ValueError(f"bad channel spec {part!r}; expected t:s")
            try:
                pairs.append((int(left.strip().lstrip("ts")),
                              int(right.strip().lstrip("ts"))))
            except ValueError as e:
                raise ValueError(f"bad channel spec {part!r}: {e}") from e
        return cls(tuple(pairs))

    def format(self) -> str:
        return ",".join(f"{t}:{s}" for t, s in self.channels)

    def validate_for(self, teacher: EncoderConfig, student: EncoderConfig) -> None:
        if teacher.hidden_dim != student.hidden_dim:
            raise ValueError(
                f"teacher hidden_dim {teacher.hidden_dim} != student "
                f"hidden_dim {student.hidden_dim}; mapped states must share a width")
        for t, s in self.channels:
            if t > teacher.n_layers:
                raise ValueError(f"teacher layer {t} beyond {teacher.n_layers}")
            if s > student.n_layers:
                raise ValueError(f"student layer {s} beyond {student.n_layers}")


def distill_loss(teacher_hiddens: Sequence[torch.Tensor],
                 student_hiddens: Sequence[torch.Tensor],
                 channel_map: ChannelMap,
                 mask: torch.Tensor) -> torch.Tensor:
    """Masked squared-error between mapped hidden states, batch-averaged."""
    for t, s in channel_map.channels:
        if t > len(teacher_hiddens) or s > len(student_hiddens):
            raise ValueError(f"channel ({t},{s}) outside provided hidden states")
    if mask.dim() == 1:
        mask = mask.unsqueeze(0)
    batch = mask.shape[0]
    m = mask.to(teacher_hiddens[0].dtype).unsqueeze(-1)
    total = teacher_hiddens[0].new_zeros(())
    for t, s in channel_map.channels:
        diff = (teacher_hiddens[t - 1] - student_hiddens[s - 1]) * m
        total = total + diff.pow(2).sum() / batch
    return total


# --- corpus sequences ---------------------------------------------------------

def prepare_sequences(issues: Sequence[IssueRecord],
                      commits: Sequence[CommitRecord], vocab: Vocab,
                      k_nl: int = K_NL, k_pl: int = K_PL
                      ) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Tokenized distillation inputs: issue texts, messages, and code."""
    seqs = []
    for issue in issues:
        if issue.text_tokens:
            seqs.append(vocab.tokenize(issue.text_tokens, k_nl))
    for commit in commits:
        if commit.message_tokens:
            seqs.append(vocab.tokenize(commit.message_tokens, k_nl))
        if commit.code_tokens:
            seqs.append(vocab.tokenize(commit.code_tokens, k_pl))
    return seqs


def collate(seqs: Sequence[tuple[torch.Tensor, torch.Tensor]]
            ) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length (ids, mask) rows, padding to the batch max."""
    width = max(ids.shape[0] for ids, _ in seqs)
    ids = torch.zeros(len(seqs), width, dtype=torch.long)
    mask = torch.zeros(len(seqs), width, dtype=torch.bool)
    for i, (row_ids, row_mask) in enumerate(seqs):
        ids[i, : row_ids.shape[0]] = row_ids
        mask[i, : row_mask.shape[0]] = row_mask
    return ids, mask


# --- training loop -------------------------------------------------------------

@dataclass(frozen=True)
class DistillSchedule:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    checkpoint_dir: str | None = None
    log_csv: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class DistillResult(NamedTuple):
    student: Encoder
    epoch_losses: list[float]
    aborted_epoch: int | None


def run_distillation(teacher: Encoder, student: Encoder,
                     sequences: Sequence[tuple[torch.Tensor, torch.Tensor]],
                     channel_map: ChannelMap,
                     schedule: DistillSchedule) -> DistillResult:
    """Fit the student's mapped hidden states to the frozen teacher's.

    Per-epoch mean losses are recorded (and optionally written to CSV along
    with per-epoch checkpoints). A non-finite batch loss aborts the run and
    restores the last completed epoch's weights.
    """
    channel_map.validate_for(teacher.config, student.config)
    if not sequences:
        raise ValueError("no distillation sequences provided")
    teacher.freeze()
    torch.manual_seed(schedule.seed)
    rng = random.Random(schedule.seed)
    optimizer = torch.optim.Adam(student.parameters(), lr=schedule.lr)

    ckpt_dir = Path(schedule.checkpoint_dir) if schedule.checkpoint_dir else None
    epoch_losses: list[float] = []
    last_good = copy.deepcopy(student.state_dict())
    aborted: int | None = None

    for epoch in range(1, schedule.epochs + 1):
        order = list(range(len(sequences)))
        if schedule.shuffle:
            rng.shuffle(order)
        batch_losses: list[float] = []
        for start in range(0, len(order), schedule.batch_size):
            chunk = [sequences[i] for i in order[start:start + schedule.batch_size]]
            ids, mask = collate(chunk)
            with torch.no_grad():
                t_h = teacher(ids, mask)
            s_h = student(ids, mask)
            loss = distill_loss(t_h, s_h, channel_map, mask)
            if not torch.isfinite(loss):
                logger.error("non-finite distillation loss at epoch %d; "
                             "restoring last completed epoch", epoch)
                student.load_state_dict(last_good)
                aborted = epoch
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(loss.item())
        if aborted is not None:
            break
        mean = sum(batch_losses) / len(batch_losses)
        epoch_losses.append(mean)
        last_good = copy.deepcopy(student.state_dict())
        logger.info("distill epoch %d: mean loss %.6f", epoch, mean)
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / f"ep{epoch:03d}.npz", student,
                            meta={"epoch": epoch, "mean_kd": mean})

    if schedule.log_csv:
        path = Path(schedule.log_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "mean_kd"])
            for i, val in enumerate(epoch_losses, start=1):
                writer.writerow([i, f"{val:.8f}"])
    return DistillResult(student, epoch_losses, aborted)

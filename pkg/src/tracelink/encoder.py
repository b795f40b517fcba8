"""Token vocabulary and transformer text encoder.

The encoder is a small pre-norm transformer with learned position
embeddings and no dropout, so identical configs always build identical
models. Its forward pass exposes every block's hidden states (1-based
indexing downstream) for layer-wise distillation. Issue and commit
representations are masked mean-pools of the last hidden layer: an issue
is its pooled text repeated twice, a commit is pooled message next to
pooled code, both in R^{2d}.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import CommitRecord, IssueRecord

logger = logging.getLogger(__name__)

K_NL = 35  # token budget for natural-language fields
K_PL = 80  # token budget for code fields

PAD, UNK, CLS, SEP = "<pad>", "<unk>", "<cls>", "<sep>"
_SPECIALS = (PAD, UNK, CLS, SEP)


class Vocab:
    """Token-to-id table with fixed special tokens at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != _SPECIALS:
            tokens = list(_SPECIALS) + [t for t in tokens if t not in _SPECIALS]
        self.itos: list[str] = list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id = self.stoi[PAD]
        self.unk_id = self.stoi[UNK]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @classmethod
    def from_corpus(cls, token_streams: Iterable[Sequence[str]],
                    min_freq: int = 2) -> "Vocab":
        counts: dict[str, int] = {}
        for stream in token_streams:
            for tok in stream:
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted((t for t, c in counts.items() if c >= min_freq),
                      key=lambda t: (-counts[t], t))
        return cls(list(_SPECIALS) + kept)

    def tokenize(self, tokens: Sequence[str], budget: int
                 ) -> tuple[torch.Tensor, torch.Tensor]:
        """First `budget` tokens -> (ids, mask), padded to exactly budget.

        Unknown tokens map to <unk>; an empty input yields an all-pad row
        with an all-false mask.
        """
        if budget < 1:
            raise ValueError("budget must be positive")
        ids = [self.stoi.get(t, self.unk_id) for t in tokens[:budget]]
        mask = [True] * len(ids)
        while len(ids) < budget:
            ids.append(self.pad_id)
            mask.append(False)
        return torch.tensor(ids, dtype=torch.long), torch.tensor(mask, dtype=torch.bool)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        tokens = [l for l in lines if l]
        if tuple(tokens[:4]) != _SPECIALS:
            raise ValueError(f"vocabulary file lacks special tokens: {path}")
        return cls(tokens)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 1
    hidden_dim: int = 64
    ffn_dim: int | None = None
    max_positions: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < len(_SPECIALS):
            raise ValueError("vocab_size smaller than the special-token set")
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("n_layers and n_heads must be positive")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ValueError("ffn_dim must be positive")
        if self.max_positions < 1:
            raise ValueError("max_positions must be positive")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.hidden_dim


def default_teacher_config(vocab_size: int, hidden_dim: int = 64,
                           n_heads: int = 1, seed: int = 0) -> EncoderConfig:
    """Deep frozen-teacher shape: 12 blocks over the same hidden width."""
    return EncoderConfig(vocab_size=vocab_size, n_layers=12, n_heads=n_heads,
                         hidden_dim=hidden_dim, seed=seed)


_NEG_FILL = -1e9  # finite mask fill keeps all-pad rows NaN-free


class _Block(nn.Module):
    """Pre-norm transformer block; zeroing o/ff2 makes it an exact identity."""

    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ffn)
        self.ff2 = nn.Linear(ffn, d)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        bsz, seq, d = x.shape
        dh = d // self.heads
        a = self.ln1(x)
        q = self.q(a).view(bsz, seq, self.heads, dh).transpose(1, 2)
        k = self.k(a).view(bsz, seq, self.heads, dh).transpose(1, 2)
        v = self.v(a).view(bsz, seq, self.heads, dh).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None, None, :], _NEG_FILL)
        ctx = torch.softmax(scores, dim=-1) @ v
        ctx = ctx.transpose(1, 2).reshape(bsz, seq, d)
        x = x + self.o(ctx)
        f = self.ln2(x)
        return x + self.ff2(F.gelu(self.ff1(f)))


class Encoder(nn.Module):
    """Stack of pre-norm blocks over token + learned position embeddings."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.pos_emb = nn.Embedding(config.max_positions, config.hidden_dim)
        self.blocks = nn.ModuleList(
            _Block(config.hidden_dim, config.n_heads, config.ffn)
            for _ in range(config.n_layers)
        )
        self._init_parameters(config.seed)

    def _init_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Linear, nn.Embedding)):
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * 0.02)
                    if isinstance(m, nn.Linear):
                        m.bias.zero_()
                elif isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    def freeze(self) -> "Encoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> list[torch.Tensor]:
        """Return each block's hidden states, shallowest first.

        Accepts (T,) or (B, T) inputs; block l's output is element l-1.
        """
        if ids.dim() == 1:
            ids, mask = ids.unsqueeze(0), mask.unsqueeze(0)
        seq = ids.shape[1]
        if seq > self.config.max_positions:
            raise ValueError(f"sequence length {seq} exceeds "
                             f"max_positions {self.config.max_positions}")
        pos = torch.arange(seq, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None, :, :]
        hiddens: list[torch.Tensor] = []
        for block in self.blocks:
            x = block(x, mask)
            hiddens.append(x)
        return hiddens


def pool(hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked mean over positions; all-masked rows pool to the zero vector."""
    if hidden.dim() == 2:
        hidden, mask = hidden.unsqueeze(0), mask.unsqueeze(0)
    m = mask.to(hidden.dtype).unsqueeze(-1)
    return (hidden * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)


def init_student_from_teacher(teacher: Encoder, student: Encoder,
                              channels: Sequence[tuple[int, int]]) -> None:
    """Copy embeddings plus mapped teacher blocks into the student in place."""
    t_cfg, s_cfg = teacher.config, student.config
    if (t_cfg.hidden_dim, t_cfg.n_heads, t_cfg.vocab_size) != (
            s_cfg.hidden_dim, s_cfg.n_heads, s_cfg.vocab_size):
        raise ValueError("teacher/student must agree on hidden_dim, n_heads "
                         "and vocab_size for a block copy")
    with torch.no_grad():
        student.tok_emb.weight.copy_(teacher.tok_emb.weight)
        student.pos_emb.weight.copy_(
            teacher.pos_emb.weight[: s_cfg.max_positions])
        for t_layer, s_layer in channels:
            if not (1 <= t_layer <= t_cfg.n_layers and 1 <= s_layer <= s_cfg.n_layers):
                raise ValueError(f"channel ({t_layer},{s_layer}) out of range")
            student.blocks[s_layer - 1].load_state_dict(
                teacher.blocks[t_layer - 1].state_dict())


# --- record representations -----------------------------------------------------

def represent_issues(issues: Sequence[IssueRecord], encoder: Encoder,
                     vocab: Vocab, k_nl: int = K_NL) -> torch.Tensor:
    """(N, 2d) issue representations: pooled text repeated twice."""
    rows = [vocab.tokenize(r.text_tokens, k_nl) for r in issues]
    ids = torch.stack([r[0] for r in rows])
    mask = torch.stack([r[1] for r in rows])
    p = pool(encoder(ids, mask)[-1], mask)
    return torch.cat([p, p], dim=-1)


def represent_commits(commits: Sequence[CommitRecord], encoder: Encoder,
                      vocab: Vocab, k_nl: int = K_NL, k_pl: int = K_PL
                      ) -> torch.Tensor:
    """(N, 2d) commit representations: pooled message next to pooled code."""
    msg_rows = [vocab.tokenize(r.message_tokens, k_nl) for r in commits]
    code_rows = [vocab.tokenize(r.code_tokens, k_pl) for r in commits]
    msg_ids = torch.stack([r[0] for r in msg_rows])
    msg_mask = torch.stack([r[1] for r in msg_rows])
    code_ids = torch.stack([r[0] for r in code_rows])
    code_mask = torch.stack([r[1] for r in code_rows])
    pm = pool(encoder(msg_ids, msg_mask)[-1], msg_mask)
    pc = pool(encoder(code_ids, code_mask)[-1], code_mask)
    return torch.cat([pm, pc], dim=-1)


def represent_issue(issue: IssueRecord, encoder: Encoder, vocab: Vocab,
                    k_nl: int = K_NL) -> torch.Tensor:
    return represent_issues([issue], encoder, vocab, k_nl)[0]


def represent_commit(commit: CommitRecord, encoder: Encoder, vocab: Vocab,
                     k_nl: int = K_NL, k_pl: int = K_PL) -> torch.Tensor:
    return represent_commits([commit], encoder, vocab, k_nl, k_pl)[0]


# --- checkpoints -------------------------------------------------------------------

class Checkpoint(NamedTuple):
    encoder: Encoder
    extra_state: dict[str, dict[str, torch.Tensor]]
    meta: dict


def save_checkpoint(path, encoder: Encoder,
                    extras: dict[str, nn.Module] | None = None,
                    meta: dict | None = None) -> None:
    """Persist encoder (and named extra modules) as a flat array archive.

    The archive stores one float32 array per parameter plus a JSON config
    entry and a JSON manifest of array names/shapes/dtypes.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, p in encoder.state_dict().items():
        arrays[f"encoder.{name}"] = p.detach().cpu().numpy().astype(np.float32)
    for prefix, module in (extras or {}).items():
        for name, p in module.state_dict().items():
            arrays[f"{prefix}.{name}"] = p.detach().cpu().numpy().astype(np.float32)
    manifest = [
        {"name": k, "shape": list(v.shape), "dtype": str(v.dtype)}
        for k, v in sorted(arrays.items())
    ]
    payload = {
        "config": asdict(encoder.config),
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:  # file handle: savez must not append .npz
        np.savez(f, __config__=json.dumps(payload, sort_keys=True),
                 __manifest__=json.dumps(manifest, sort_keys=True), **arrays)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        payload = json.loads(str(npz["__config__"]))
        manifest = json.loads(str(npz["__manifest__"]))
        arrays = {k: npz[k] for k in npz.files if not k.startswith("__")}
    expected = {m["name"]: (tuple(m["shape"]), m["dtype"]) for m in manifest}
    got = {k: (v.shape, str(v.dtype)) for k, v in arrays.items()}
    if expected != got:
        raise ValueError(f"checkpoint manifest mismatch in {path}")

    config = EncoderConfig(**payload["config"])
    encoder = Encoder(config)
    enc_state = {k[len("encoder."):]: torch.from_numpy(v)
                 for k, v in arrays.items() if k.startswith("encoder.")}
    encoder.load_state_dict(enc_state)

    extra_state: dict[str, dict[str, torch.Tensor]] = {}
    for k, v in arrays.items():
        if k.startswith("encoder."):
            continue
        prefix, _, name = k.partition(".")
        extra_state.setdefault(prefix, {})[name] = torch.from_numpy(v)
    return Checkpoint(encoder, extra_state, payload["meta"])

"""Operator surface: subcommands wiring the pipeline stages end to end.

Every stage reads files produced by the previous one and writes its own
artifacts under --out, so any stage can be re-run in isolation. All
randomness is keyed off named seeds in the resolved configuration, which
each command prints before running. Missing upstream artifacts exit with
status 2 and a message naming the stage that produces them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import corpus, links, preprocess
from .corpus import CorpusError, SplitSpec
from .distill import ChannelMap, DistillSchedule, prepare_sequences, run_distillation
from .encoder import (
    Encoder,
    EncoderConfig,
    Vocab,
    load_checkpoint,
    save_checkpoint,
)
from .retrieval import (
    build_queries,
    dump_query_scores,
    evaluate,
    evaluate_queries,
    score_queries_with_vsm,
    training_corpus_stats,
)
from .trainer import AuxClassifier, TrainConfig, train

OUT_ROOT_ENV = "TRACELINK_OUT"


class MissingArtifact(Exception):
    """An input file/dir a previous stage should have produced is absent."""

    def __init__(self, stage: str, path: Path):
        super().__init__(
            f"missing {stage} artifact: {path} (run `tracelink {stage}` first)")
        self.stage = stage
        self.path = path


@dataclass
class RunConfig:
    """Every knob of the pipeline; flat so a JSON file can override any field."""

    data_dir: str | None = None
    links_dir: str | None = None
    student_path: str | None = None
    model_path: str | None = None
    vocab_path: str | None = None
    out_dir: str | None = None
    seed: int = 0
    # splitting
    train_frac: float = 0.6
    valid_frac: float = 0.2
    test_frac: float = 0.2
    # encoder shapes
    hidden_dim: int = 64
    n_heads: int = 1
    student_layers: int = 2
    teacher_layers: int = 12
    max_positions: int = 256
    min_freq: int = 2
    channels: str = "1:1,5:2"
    # distillation schedule
    distill_epochs: int = 10
    distill_batch_size: int = 16
    distill_lr: float = 1e-3
    # fine-tuning
    epochs: int = 30
    batch_size: int = 16
    lr: float = 4e-5
    tau: float = 0.07
    lambda_cl: float = 1.0
    lambda_aux: float = 1.0
    # evaluation
    max_issues: int = 1000
    threshold: float = 0.5
    multi_relevant: bool = False
    # synthetic corpus
    n_issues: int = 200
    overlap: float = 0.9
    # link generation
    false_mode: str = "none"  # "none" | "time"
    window_days: float = 7.0

    @classmethod
    def resolve(cls, args: argparse.Namespace) -> "RunConfig":
        """defaults <- config file <- explicit command-line flags."""
        cfg = cls()
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.exists():
                raise FileNotFoundError(f"config file not found: {path}")
            loaded = json.loads(path.read_text(encoding="utf-8"))
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = sorted(set(loaded) - known)
            if unknown:
                raise ValueError(f"unknown config keys: {', '.join(unknown)}")
            for key, value in loaded.items():
                setattr(cfg, key, value)
        for field in dataclasses.fields(cls):
            value = getattr(args, field.name, None)
            if value is not None:
                setattr(cfg, field.name, value)
        return cfg

    def out(self, command: str) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / command

    def print_resolved(self, command: str) -> None:
        resolved = dataclasses.asdict(self)
        resolved["command"] = command
        resolved["out_dir"] = str(self.out(command))
        print(json.dumps(resolved, sort_keys=True, indent=2))


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(stage, path)
    return path


def _load_data(cfg: RunConfig, stage: str = "preprocess"):
    if not cfg.data_dir:
        raise MissingArtifact(stage, Path("<--data not given>"))
    data = Path(cfg.data_dir)
    _require(data / "issues.jsonl", stage)
    _require(data / "commits.jsonl", stage)
    return corpus.load_project(data)


# --- commands ----------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    out = cfg.out("synth")
    issues, commits, true_links = corpus.generate_synthetic_corpus(
        cfg.n_issues, seed=cfg.seed, overlap=cfg.overlap)
    corpus.write_project(out, issues, commits)
    print(f"synth: wrote {len(issues)} issues, {len(commits)} commits "
          f"({len(true_links)} tagged links) to {out}")
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    if not cfg.data_dir:
        raise MissingArtifact("synth", Path("<--data not given>"))
    raw = Path(cfg.data_dir)
    if not (raw / "issues.jsonl").exists() or not (raw / "commits.jsonl").exists():
        raise MissingArtifact("synth", raw)
    out = cfg.out("preprocess")
    loaded = corpus.load_project(raw, require_tokens=False)

    issues = [_tokenized_issue(rec) for rec in loaded.issues]
    commits = [_tokenized_commit(rec) for rec in loaded.commits]
    corpus.write_project(out, issues, commits)
    empty = sum(1 for rec in issues if not rec.text_tokens)
    print(f"preprocess: wrote {len(issues)} issues ({empty} with no usable "
          f"text), {len(commits)} commits to {out}")
    return 0


def _tokenized_issue(rec: corpus.IssueRecord) -> corpus.IssueRecord:
    title = rec.title_tokens
    desc = rec.description_tokens
    if rec.raw_title:
        title = preprocess.preprocess_text(rec.raw_title)
    if rec.raw_description:
        desc = preprocess.preprocess_text(rec.raw_description)
    return dataclasses.replace(rec, title_tokens=title, description_tokens=desc)


def _tokenized_commit(rec: corpus.CommitRecord) -> corpus.CommitRecord:
    message = rec.message_tokens
    if rec.raw_message:
        message = preprocess.preprocess_text(rec.raw_message)
    raw_diffs = rec.extra.get("Diff") or []
    raw_sources = rec.extra.get("codelist") or []
    changed = []
    for i, cf in enumerate(rec.changed_files):
        diff_tokens = cf.diff_tokens
        source_tokens = cf.source_tokens
        if i < len(raw_diffs) and isinstance(raw_diffs[i], str) and raw_diffs[i]:
            diff_tokens = preprocess.extract_identifiers(raw_diffs[i])
        if (i < len(raw_sources) and isinstance(raw_sources[i], str)
                and raw_sources[i]):
            source_tokens = preprocess.extract_identifiers(raw_sources[i])
        changed.append(dataclasses.replace(
            cf, diff_tokens=diff_tokens, source_tokens=source_tokens))
    return dataclasses.replace(rec, message_tokens=message, changed_files=changed)


def cmd_links(cfg: RunConfig) -> int:
    loaded = _load_data(cfg)
    out = cfg.out("links")
    result = links.extract_true_links(loaded.issues, loaded.commits)
    spec = SplitSpec(cfg.train_frac, cfg.valid_frac, cfg.test_frac, seed=cfg.seed)
    train_l, valid_l, test_l = corpus.split_links(result.links, spec)
    corpus.write_links(out / "train_links.jsonl", train_l)
    corpus.write_links(out / "valid_links.jsonl", valid_l)
    corpus.write_links(out / "test_links.jsonl", test_l)
    aux = links.generate_issue_code_links(train_l)
    links.write_issue_code_links(out / "aux_links.jsonl", aux)
    msg = (f"links: {len(result.links)} true "
           f"({result.unmatched_tags} unmatched tags), split "
           f"{len(train_l)}/{len(valid_l)}/{len(test_l)}, {len(aux)} aux rows")
    if cfg.false_mode == "time":
        policy = links.FalseLinkPolicy(mode="time", window_days=cfg.window_days,
                                       seed=cfg.seed)
        false = links.generate_false_links_time(train_l, loaded.commits, policy)
        corpus.write_links(out / "false_links.jsonl", false.links)
        msg += (f", {len(false.links)} time-sampled false "
                f"({false.skipped_issues} skipped)")
    print(msg + f" -> {out}")
    return 0


def _load_split(cfg: RunConfig, loaded, name: str):
    if not cfg.links_dir:
        raise MissingArtifact("links", Path("<--links not given>"))
    path = _require(Path(cfg.links_dir) / name, "links")
    return corpus.load_links(path, loaded.issues, loaded.commits)


def cmd_distill(cfg: RunConfig) -> int:
    loaded = _load_data(cfg)
    out = cfg.out("distill")
    vocab = Vocab.from_corpus(
        ([rec.text_tokens for rec in loaded.issues]
         + [rec.message_tokens for rec in loaded.commits]
         + [rec.code_tokens for rec in loaded.commits]),
        min_freq=cfg.min_freq)
    teacher = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=cfg.teacher_layers, n_heads=cfg.n_heads,
        hidden_dim=cfg.hidden_dim, max_positions=cfg.max_positions,
        seed=cfg.seed))
    student = Encoder(EncoderConfig(
        vocab_size=len(vocab), n_layers=cfg.student_layers, n_heads=cfg.n_heads,
        hidden_dim=cfg.hidden_dim, max_positions=cfg.max_positions,
        seed=cfg.seed + 1))
    channel_map = ChannelMap.parse(cfg.channels)
    channel_map.validate_for(teacher.config, student.config)
    sequences = prepare_sequences(loaded.issues, loaded.commits, vocab)
    schedule = DistillSchedule(
        epochs=cfg.distill_epochs, batch_size=cfg.distill_batch_size,
        lr=cfg.distill_lr, seed=cfg.seed,
        log_csv=str(out / "distill_log.csv"))
    result = run_distillation(teacher, student, sequences, channel_map, schedule)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    save_checkpoint(out / "teacher.npz", teacher, meta={"stage": "distill"})
    save_checkpoint(out / "student.npz", result.student,
                    meta={"stage": "distill", "channels": cfg.channels})
    status = (f"aborted at epoch {result.aborted_epoch}"
              if result.aborted_epoch else "completed")
    print(f"distill: {status}; loss {result.epoch_losses[0]:.6f} -> "
          f"{result.epoch_losses[-1]:.6f} over {len(result.epoch_losses)} "
          f"epochs, {len(sequences)} sequences -> {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    loaded = _load_data(cfg)
    out = cfg.out("train")
    student_path = _require(
        Path(cfg.student_path or "<--student not given>"), "distill")
    vocab_path = Path(cfg.vocab_path) if cfg.vocab_path \
        else student_path.parent / "vocab.txt"
    _require(vocab_path, "distill")
    vocab = Vocab.load(vocab_path)
    student = load_checkpoint(student_path).encoder

    train_l = _load_split(cfg, loaded, "train_links.jsonl")
    valid_l = _load_split(cfg, loaded, "valid_links.jsonl")
    aux_path = _require(Path(cfg.links_dir) / "aux_links.jsonl", "links")
    aux = links.load_issue_code_links(aux_path, loaded.issues, loaded.commits)

    clf = AuxClassifier(student.config.hidden_dim, seed=cfg.seed)
    tcfg = TrainConfig(
        batch_size=cfg.batch_size, lr=cfg.lr, temperature=cfg.tau,
        lambda_cl=cfg.lambda_cl, lambda_aux=cfg.lambda_aux,
        epochs=cfg.epochs, seed=cfg.seed)
    result = train(student, clf, train_l, valid_l, aux, vocab, tcfg,
                   history_csv=str(out / "train_log.csv"))
    save_checkpoint(out / "model.npz", student, extras={"aux": clf},
                    meta={"stage": "train", "best_epoch": result.best_epoch,
                          "best_valid_mrr": result.best_valid_mrr})
    status = (f"aborted at epoch {result.aborted_epoch}"
              if result.aborted_epoch else "completed")
    print(f"train: {status}; best valid MRR {result.best_valid_mrr:.4f} at "
          f"epoch {result.best_epoch} -> {out}")
    return 0


def _build_eval_queries(cfg: RunConfig, loaded):
    test_l = _load_split(cfg, loaded, "test_links.jsonl")
    return build_queries(test_l, max_issues=cfg.max_issues, seed=cfg.seed,
                         multi_relevant=cfg.multi_relevant)


def cmd_eval(cfg: RunConfig, scores_csv: str | None = None) -> int:
    loaded = _load_data(cfg)
    out = cfg.out("eval")
    model_path = _require(
        Path(cfg.model_path or "<--model not given>"), "train")
    vocab_path = Path(cfg.vocab_path) if cfg.vocab_path \
        else model_path.parent / "vocab.txt"
    if not vocab_path.exists():
        raise MissingArtifact("distill", vocab_path)
    vocab = Vocab.load(vocab_path)
    encoder = load_checkpoint(model_path).encoder

    queries = _build_eval_queries(cfg, loaded)
    report = evaluate(encoder, vocab, queries)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.format_table(), encoding="utf-8")
    if scores_csv:
        dump_query_scores(queries, out / scores_csv)
    n_scored = sum(len(q.candidates) for q in queries)
    n_pred = sum(1 for q in queries for s in q.scores if s > cfg.threshold)
    print(report.format_table(), end="")
    print(f"eval: {report.n_queries} queries; {n_pred}/{n_scored} candidate "
          f"pairs above threshold {cfg.threshold} -> {out}")
    return 0


def cmd_vsm(cfg: RunConfig, scores_csv: str | None = None) -> int:
    loaded = _load_data(cfg)
    out = cfg.out("vsm")
    train_l = _load_split(cfg, loaded, "train_links.jsonl")
    stats = training_corpus_stats(train_l)
    queries = _build_eval_queries(cfg, loaded)
    score_queries_with_vsm(queries, stats)
    report = evaluate_queries(queries)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics_vsm.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics_vsm.txt").write_text(report.format_table(), encoding="utf-8")
    if scores_csv:
        dump_query_scores(queries, out / scores_csv)
    print(report.format_table(), end="")
    print(f"vsm: {report.n_queries} queries over {stats.n_docs} training "
          f"documents -> {out}")
    return 0


# --- argument parsing -----------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file of RunConfig overrides")
    sub.add_argument("--seed", type=int, help="master seed for this command")
    sub.add_argument("--out", dest="out_dir",
                     help=f"output directory (default ${OUT_ROOT_ENV}/<cmd>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracelink",
        description="issue-commit link recovery pipeline")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic project corpus")
    _add_common(p)
    p.add_argument("--n-issues", dest="n_issues", type=int)
    p.add_argument("--overlap", type=float)

    p = subs.add_parser("preprocess", help="tokenize raw issues and commits")
    _add_common(p)
    p.add_argument("--data", dest="data_dir", help="raw project directory")

    p = subs.add_parser("links", help="extract true links, split, build aux")
    _add_common(p)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--train-frac", dest="train_frac", type=float)
    p.add_argument("--valid-frac", dest="valid_frac", type=float)
    p.add_argument("--test-frac", dest="test_frac", type=float)
    p.add_argument("--false-mode", dest="false_mode", choices=["none", "time"])
    p.add_argument("--window-days", dest="window_days", type=float)

    p = subs.add_parser("distill", help="compress a frozen teacher encoder")
    _add_common(p)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--channels", help="teacher:student layer pairs, e.g. 1:1,5:2")
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--teacher-layers", dest="teacher_layers", type=int)
    p.add_argument("--student-layers", dest="student_layers", type=int)
    p.add_argument("--epochs", dest="distill_epochs", type=int)
    p.add_argument("--batch-size", dest="distill_batch_size", type=int)
    p.add_argument("--lr", dest="distill_lr", type=float)

    p = subs.add_parser("train", help="multi-task fine-tuning of the student")
    _add_common(p)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--links", dest="links_dir")
    p.add_argument("--student", dest="student_path")
    p.add_argument("--vocab", dest="vocab_path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda-cl", dest="lambda_cl", type=float)
    p.add_argument("--lambda-aux", dest="lambda_aux", type=float)

    p = subs.add_parser("eval", help="rank test links, 1 true vs 99 distractors")
    _add_common(p)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--links", dest="links_dir")
    p.add_argument("--model", dest="model_path")
    p.add_argument("--vocab", dest="vocab_path")
    p.add_argument("--max-issues", dest="max_issues", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--multi-relevant", dest="multi_relevant",
                   action="store_true", default=None)
    p.add_argument("--scores-csv", dest="scores_csv",
                   help="also dump per-query candidate scores to this file "
                        "(relative paths land inside the output directory)")

    p = subs.add_parser("vsm", help="TF-IDF baseline on the same queries")
    _add_common(p)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--links", dest="links_dir")
    p.add_argument("--max-issues", dest="max_issues", type=int)
    p.add_argument("--multi-relevant", dest="multi_relevant",
                   action="store_true", default=None)
    p.add_argument("--scores-csv", dest="scores_csv",
                   help="also dump per-query candidate scores to this file "
                        "(relative paths land inside the output directory)")

    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "links": cmd_links,
    "distill": cmd_distill,
    "train": cmd_train,
    "eval": cmd_eval,
    "vsm": cmd_vsm,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.resolve(args)
        cfg.print_resolved(args.command)
        if args.command in ("eval", "vsm"):
            return _COMMANDS[args.command](cfg, getattr(args, "scores_csv", None))
        return _COMMANDS[args.command](cfg)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CorpusError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Operator surface: prepare / train / eval / chat / inspect.

Exit codes: 0 success, 1 usage, 2 data or config error, 3 training
failure. Every command is driven by the declarative JSON config; flags
override the config where noted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from .config import OUTPUT_ROOT_ENV, RunConfig, load_run_config
from .discriminator import Discriminator, reward_signal
from .errors import CheckpointError, DataError, DialogailError, TrainingError
from .evaluate import bucket_of, evaluate_model
from .gail import GailTrainer, load_discriminator, load_policy
from .policy import sample_response
from .textdata import (
    SOURCE_TWEET, Trajectory, Vocab,
    build_trajectories, build_vocab, encode_state, parse_corpus,
    split_dataset, synth_corpus, tokenize, trajectory_from_record,
    trajectory_to_record, write_corpus_files,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dialogail", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--precision", type=int, choices=(32, 64), default=None)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("prepare", help="build dataset artifacts and stats")
    common(p)
    p = sub.add_parser("train", help="run (or resume) the adversarial training pipeline")
    common(p)
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint to evaluate (default: best)")
    p = sub.add_parser("chat", help="interactive REPL against a checkpoint")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p = sub.add_parser("inspect", help="summarize a checkpoint")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    return parser


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    return cfg


def _data_dir(out_dir: str) -> str:
    return os.path.join(out_dir, "data")


def _artifact_paths(out_dir: str) -> dict[str, str]:
    d = _data_dir(out_dir)
    return {
        "vocab": os.path.join(d, "vocab.json"),
        "train": os.path.join(d, "train.jsonl"),
        "test": os.path.join(d, "test.jsonl"),
        "validation": os.path.join(d, "validation.jsonl"),
        "stats": os.path.join(d, "stats.json"),
    }


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    out_dir = cfg.resolved_output_dir()
    corpus_files: list[tuple[str, str]] = [(p, "conversations") for p in cfg.corpus.conversations]
    corpus_files += [(p, "tweets") for p in cfg.corpus.tweets]
    for path, _ in corpus_files:
        if not os.path.exists(path):
            raise DataError(f"input corpus file not found: {path}")

    os.makedirs(out_dir, exist_ok=True)
    if cfg.corpus.synthetic is not None:
        corpus_dir = os.path.join(out_dir, "corpus")
        os.makedirs(corpus_dir, exist_ok=True)
        conv_path = os.path.join(corpus_dir, "conversations.jsonl")
        tweet_path = os.path.join(corpus_dir, "tweets.jsonl")
        generated = synth_corpus(cfg.corpus.synthetic)
        n_conv, n_tweet = write_corpus_files(generated, conv_path, tweet_path)
        if n_conv:
            corpus_files.append((conv_path, "conversations"))
        if n_tweet:
            corpus_files.append((tweet_path, "tweets"))

    conversations = []
    all_issues = []
    for path, fmt in corpus_files:
        convs, issues = parse_corpus(path, fmt)
        conversations.extend(convs)
        for issue in issues:
            all_issues.append(f"{path}:{issue.line}: {issue.message}")
    trajectories, stats = build_trajectories(conversations)
    split = split_dataset(trajectories, seed=cfg.master_seed)
    vocab = build_vocab(split.train, cfg.vocab_size)

    paths = _artifact_paths(out_dir)
    os.makedirs(_data_dir(out_dir), exist_ok=True)
    with open(paths["vocab"], "w", encoding="utf-8") as fh:
        fh.write(vocab.to_json() + "\n")
    for name, part in (("train", split.train), ("test", split.test), ("validation", split.validation)):
        with open(paths[name], "w", encoding="utf-8") as fh:
            for t in part:
                fh.write(json.dumps(trajectory_to_record(t), sort_keys=True) + "\n")
    stats_payload = {
        "trajectories_total": stats.total,
        "trajectories_per_source": dict(sorted(stats.per_source.items())),
        "dropped_utterances": stats.dropped_utterances,
        "conversations": stats.conversations,
        "mean_turns_per_conversation": round(stats.mean_turns(), 4),
        "split_sizes": {
            "train": len(split.train),
            "test": len(split.test),
            "validation": len(split.validation),
        },
        "vocab_size": len(vocab),
        "parse_issues": all_issues,
    }
    with open(paths["stats"], "w", encoding="utf-8") as fh:
        fh.write(json.dumps(stats_payload, indent=2, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "config.resolved.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.echo_json())

    print(f"conversations: {stats.conversations} (mean turns {stats.mean_turns():.2f})")
    print("trajectories per source:")
    for source, count in sorted(stats.per_source.items()):
        print(f"  {source:<14} {count}")
    print(f"total trajectories: {stats.total} (dropped utterances: {stats.dropped_utterances})")
    print(f"splits: train={len(split.train)} test={len(split.test)} validation={len(split.validation)}")
    print(f"vocab size: {len(vocab)}")
    if all_issues:
        print(f"schema violations ({len(all_issues)}):")
        for line in all_issues:
            print(f"  {line}")
    return EXIT_OK


def _load_artifacts(out_dir: str):
    paths = _artifact_paths(out_dir)
    for p in paths.values():
        if not os.path.exists(p):
            raise DataError(f"missing prepared artifact {p}; run `dialogail prepare` first")
    with open(paths["vocab"], encoding="utf-8") as fh:
        vocab = Vocab.from_json(fh.read())
    parts = {}
    for name in ("train", "test", "validation"):
        with open(paths[name], encoding="utf-8") as fh:
            parts[name] = [trajectory_from_record(json.loads(line)) for line in fh if line.strip()]
    from .textdata import DatasetSplit

    return vocab, DatasetSplit(parts["train"], parts["test"], parts["validation"])


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = cfg.resolved_output_dir()
    vocab, split = _load_artifacts(out_dir)
    train_dir = os.path.join(out_dir, "train")
    policy_cfg = cfg.policy.to_policy_config(len(vocab))
    disc_cfg = cfg.discriminator.to_disc_config(len(vocab), policy_cfg)
    extra = {"eval": {"seeds": cfg.eval.seeds, "temperature": cfg.eval.temperature}}
    if args.checkpoint:
        ckpt = ckpt_io.load(args.checkpoint)
        trainer = GailTrainer.from_checkpoint(ckpt, vocab, split, out_dir=train_dir)
        log.info("resumed from %s at epoch %d", args.checkpoint, trainer.state.epoch)
    else:
        trainer = GailTrainer(
            cfg.train, policy_cfg, disc_cfg, vocab, split,
            master_seed=cfg.master_seed, precision=cfg.precision,
            out_dir=train_dir, extra_config=extra,
        )
    outcome = trainer.train()
    print(f"best validation perplexity: {outcome.best_val_perplexity:.4f}")
    print(f"checkpoints: best={outcome.best_path} final={outcome.final_path}")
    print(f"metrics: {outcome.metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out_dir = cfg.resolved_output_dir()
    vocab, split = _load_artifacts(out_dir)
    ckpt_path = args.checkpoint or os.path.join(out_dir, "train", "best.ckpt")
    ckpt = ckpt_io.load(ckpt_path)
    policy, ckpt_vocab = load_policy(ckpt)
    if ckpt_vocab.id_to_token != vocab.id_to_token:
        raise DataError("checkpoint vocabulary does not match the prepared dataset")
    report = evaluate_model(policy, split.test, vocab, seeds=cfg.eval.seeds,
                            temperature=cfg.eval.temperature)
    eval_dir = os.path.join(out_dir, "eval")
    os.makedirs(eval_dir, exist_ok=True)
    with open(os.path.join(eval_dir, "report.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(report.to_jsonl())
    table = report.render_table()
    with open(os.path.join(eval_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    config_hash = hashlib.sha256(ckpt.config_json().encode("utf-8")).hexdigest()
    train_state = ckpt.state.get("train_state", {})
    counts: dict[str, int] = {}
    for name, arr in ckpt.segments.items():
        group = name.split(".", 1)[0]
        counts[group] = counts.get(group, 0) + arr.size
    print(f"checkpoint: {args.checkpoint}")
    print(f"format version: {ckpt_io.VERSION}")
    print(f"config sha256: {config_hash}")
    print(f"epoch: {train_state.get('epoch')}  step: {train_state.get('global_step')}")
    print(f"best validation perplexity: {train_state.get('best_val_perplexity')}")
    print(f"vocab size: {len(ckpt.vocab_tokens)}")
    print("parameters:")
    for group in sorted(counts):
        print(f"  {group:<10} {counts[group]}")
    print(f"segments: {len(ckpt.segments)}")
    return EXIT_OK


def cmd_chat(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    policy, vocab = load_policy(ckpt)
    disc: Discriminator | None = None
    if args.verbose:
        try:
            disc = load_discriminator(ckpt)
        except (KeyError, CheckpointError):
            print("(no discriminator in this checkpoint; scores disabled)")
    if args.temperature < 0:
        raise DataError("temperature must be >= 0")
    seed = args.seed if args.seed is not None else 0
    stream = np.random.Generator(np.random.PCG64(seed))
    history: list[str] = []
    print("dialogail chat — /reset clears history, /quit exits")
    while True:
        try:
            line = input("you> ")
        except EOFError:
            break
        line = " ".join(line.split())
        if not line:
            continue
        if line == "/quit":
            break
        if line == "/reset":
            history = []
            print("(history cleared)")
            continue
        unknown = sorted({t for t in tokenize(line) if t not in vocab.token_to_id})
        if unknown:
            print(f"(unknown words mapped to <unk>: {', '.join(unknown)})")
        h_text = " <sep> ".join(history)
        state = np.asarray(
            encode_state(h_text, line, vocab, policy.config.max_state_len), dtype=np.int64
        )
        z = int(stream.integers(2**63))
        resp = sample_response(policy, state, z=z, temperature=args.temperature)
        text = vocab.decode(resp.response_ids)
        bucket = bucket_of(Trajectory(h_text, line, text or "...", conversation_id="chat"))
        print(f"bot> {text if text else '(empty response)'}")
        if args.verbose:
            extras = [f"bucket {bucket}", f"z {z}"]
            if disc is not None:
                d = disc.score(state, resp.response_ids)
                extras.append(f"D(generated)={d:.4f} reward={reward_signal(disc, state, resp.response_ids):.4f}")
            print(f"     [{'; '.join(extras)}]")
        history.extend([line, text])
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "prepare": cmd_prepare,
        "train": cmd_train,
        "eval": cmd_eval,
        "chat": cmd_chat,
        "inspect": cmd_inspect,
    }
    try:
        return handlers[args.command](args)
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DialogailError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

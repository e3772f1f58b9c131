"""Corpus ingestion, tokenization, and expert-trajectory construction.

A conversation is an alternating two-speaker utterance list; each turn
(prompt utterance + response utterance) becomes one expert trajectory
whose history is the concatenation of all earlier turns. Tweets are
single-utterance "conversations" that become history-less trajectories
with prompt == response. A small synthetic-corpus generator provides
desk-scale stand-ins for the real datasets.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")
SEP_TEXT = "<sep>"
_SEP_JOIN = f" {SEP_TEXT} "

SOURCE_CONVERSATION = "conversation"
SOURCE_TWEET = "tweet"
SOURCE_GENERATED = "generated"

# reserved markers first so they survive as single tokens, then word units,
# then any single non-space punctuation character
_TOKEN_RE = re.compile(r"<pad>|<bos>|<eos>|<sep>|<unk>|\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercased, whitespace-split, punctuation-detached word units.

    Reserved markers like ``<sep>`` are kept as single tokens, so history
    strings round-trip through token ids.
    """
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """Canonical text form: the space-joined token stream."""
    return " ".join(tokenize(text))


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


@dataclass
class Conversation:
    id: str
    utterances: list[str]
    label: str | None = None
    source: str = SOURCE_CONVERSATION


@dataclass(frozen=True)
class Trajectory:
    """One imitation unit: history (possibly empty), prompt, response."""

    history: str
    prompt: str
    response: str
    source: str = SOURCE_CONVERSATION
    conversation_id: str = ""
    turn_index: int = 0

    def history_utterances(self) -> list[str]:
        if not self.history:
            return []
        return self.history.split(_SEP_JOIN)


@dataclass
class ParseIssue:
    line: int
    message: str


@dataclass
class DatasetSplit:
    train: list[Trajectory]
    test: list[Trajectory]
    validation: list[Trajectory]

    def all(self) -> list[Trajectory]:
        return self.train + self.test + self.validation


def parse_corpus(path: str, fmt: str) -> tuple[list[Conversation], list[ParseIssue]]:
    """Read a line-delimited record file into conversations.

    ``fmt`` is "conversations" ({id, label?, utterances: [str]}) or
    "tweets" ({id, text}); tweets become single-utterance conversations
    tagged as tweets. Malformed lines are collected with their line
    numbers; an unreadable file or a corpus with zero valid records is a
    DataError.
    """
    if fmt not in ("conversations", "tweets"):
        raise ValueError(f"unknown corpus format: {fmt!r}")
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc

    conversations: list[Conversation] = []
    issues: list[ParseIssue] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            issues.append(ParseIssue(lineno, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(record, dict):
            issues.append(ParseIssue(lineno, "record is not an object"))
            continue
        problem = _record_to_conversation(record, fmt)
        if isinstance(problem, str):
            issues.append(ParseIssue(lineno, problem))
        else:
            conversations.append(problem)
    if not conversations:
        raise DataError(f"empty corpus: no valid records in {path} ({len(issues)} malformed)")
    return conversations, issues


def _record_to_conversation(record: dict, fmt: str) -> Conversation | str:
    cid = record.get("id")
    if not isinstance(cid, str) or not cid:
        return "missing or invalid 'id'"
    if fmt == "tweets":
        text = record.get("text")
        if not isinstance(text, str):
            return "missing 'text' field"
        text = _normalize_ws(text)
        if not text:
            return "empty tweet text"
        return Conversation(id=cid, utterances=[text], source=SOURCE_TWEET)
    utterances = record.get("utterances")
    if not isinstance(utterances, list) or not utterances:
        return "missing or empty 'utterances' field"
    cleaned = []
    for u in utterances:
        if not isinstance(u, str):
            return "non-string utterance"
        u = _normalize_ws(u)
        if not u:
            return "empty utterance after whitespace normalization"
        cleaned.append(u)
    label = record.get("label")
    if label is not None and not isinstance(label, str):
        return "invalid 'label' field"
    return Conversation(id=cid, utterances=cleaned, label=label)


@dataclass
class TrajectoryStats:
    per_source: Counter = field(default_factory=Counter)
    dropped_utterances: int = 0
    conversations: int = 0
    turns_total: int = 0

    @property
    def total(self) -> int:
        return sum(self.per_source.values())

    def mean_turns(self) -> float:
        return self.turns_total / self.conversations if self.conversations else 0.0


def build_trajectories(conversations: list[Conversation]) -> tuple[list[Trajectory], TrajectoryStats]:
    """Stagger each conversation into per-turn expert trajectories.

    Turn k (1-based) of a 2T-utterance conversation yields a trajectory
    with history = utterances 1..2(k-1) joined by the separator marker,
    prompt = utterance 2k-1 and response = utterance 2k. A trailing odd
    utterance has no response to imitate; it is dropped and counted.
    Tweets yield exactly one trajectory with empty history and
    prompt == response.
    """
    out: list[Trajectory] = []
    stats = TrajectoryStats()
    for conv in conversations:
        stats.conversations += 1
        if conv.source == SOURCE_TWEET:
            text = conv.utterances[0]
            out.append(Trajectory("", text, text, SOURCE_TWEET, conv.id, 0))
            stats.per_source[SOURCE_TWEET] += 1
            stats.turns_total += 1
            continue
        n_turns = len(conv.utterances) // 2
        if len(conv.utterances) % 2 == 1:
            stats.dropped_utterances += 1
        stats.turns_total += n_turns
        for k in range(n_turns):
            history = _SEP_JOIN.join(conv.utterances[: 2 * k])
            out.append(
                Trajectory(
                    history=history,
                    prompt=conv.utterances[2 * k],
                    response=conv.utterances[2 * k + 1],
                    source=SOURCE_CONVERSATION,
                    conversation_id=conv.id,
                    turn_index=k,
                )
            )
            stats.per_source[SOURCE_CONVERSATION] += 1
    return out, stats


class Vocab:
    """Token <-> id maps with fixed reserved ids 0..4 (PAD, BOS, EOS, SEP, UNK)."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:5]) != list(RESERVED_TOKENS):
            raise ValueError("vocab must start with the reserved tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ValueError("duplicate token in vocab")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode_text(self, text: str) -> list[int]:
        return [self.encode_token(t) for t in tokenize(text)]

    def decode(self, ids: list[int] | np.ndarray) -> str:
        """Space-joined tokens, dropping PAD/BOS/EOS framing."""
        kept = [self.id_to_token[int(i)] for i in ids if int(i) not in (PAD, BOS, EOS)]
        return " ".join(kept)

    def to_json(self) -> str:
        return json.dumps(self.id_to_token, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text))


def build_vocab(trajectories: list[Trajectory], max_size: int) -> Vocab:
    """Frequency vocabulary over prompt+response text, ties broken lexicographically."""
    if max_size < 6:
        raise ValueError("max_size must be at least 6 (5 reserved ids + 1 token)")
    counts: Counter = Counter()
    for traj in trajectories:
        counts.update(tokenize(traj.prompt))
        counts.update(tokenize(traj.response))
    for reserved in RESERVED_TOKENS:
        counts.pop(reserved, None)
    if not counts:
        raise DataError("empty corpus: no tokens after normalization")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - 5]]
    return Vocab(list(RESERVED_TOKENS) + kept)


def encode_state(history: str, prompt: str, vocab: Vocab, max_state_len: int) -> list[int]:
    """State framing: BOS, history, SEP, prompt, SEP; left-truncated.

    When over the cap the oldest history tokens are dropped first; the
    prompt and all framing ids are always retained. A prompt that alone
    exceeds the cap is itself left-truncated (most recent words kept).
    """
    h_ids = vocab.encode_text(history)
    p_ids = vocab.encode_text(prompt)
    frame = 3  # BOS + 2 SEP
    budget = max_state_len - frame - len(p_ids)
    if budget < 0:
        p_ids = p_ids[-(max_state_len - frame):] if max_state_len > frame else []
        h_ids = []
    else:
        h_ids = h_ids[len(h_ids) - budget:] if len(h_ids) > budget else h_ids
    return [BOS] + h_ids + [SEP] + p_ids + [SEP]


def encode(
    trajectory: Trajectory, vocab: Vocab, max_state_len: int, max_target_len: int
) -> tuple[list[int], list[int]]:
    """Token sequences for one trajectory: (state, target = response + EOS).

    The target is truncated from the right at `max_target_len`.
    """
    state = encode_state(trajectory.history, trajectory.prompt, vocab, max_state_len)
    target = vocab.encode_text(trajectory.response) + [EOS]
    return state, target[:max_target_len]


def decode_state(state_ids: list[int] | np.ndarray, vocab: Vocab) -> tuple[str, str]:
    """Invert encode_state: recover (history text, prompt text)."""
    ids = [int(i) for i in state_ids]
    if ids and ids[0] == BOS:
        ids = ids[1:]
    segments: list[list[int]] = [[]]
    for i in ids:
        if i == SEP:
            segments.append([])
        else:
            segments[-1].append(i)
    if segments and segments[-1] == []:
        segments.pop()  # trailing SEP
    prompt_ids = segments.pop() if segments else []
    history = _SEP_JOIN.join(vocab.decode(seg) for seg in segments)
    return history, vocab.decode(prompt_ids)


def split_dataset(trajectories: list[Trajectory], seed: int) -> DatasetSplit:
    """70/20/10 split, grouped so a conversation never straddles splits."""
    by_conv: dict[str, list[Trajectory]] = {}
    for t in trajectories:
        by_conv.setdefault(t.conversation_id, []).append(t)
    conv_ids = sorted(by_conv)
    if len(conv_ids) < 10:
        raise DataError(f"need at least 10 conversations to split, got {len(conv_ids)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(conv_ids))
    shuffled = [conv_ids[i] for i in order]
    n = len(shuffled)
    n_train = round(0.7 * n)
    n_test = round(0.2 * n)
    groups = {
        "train": shuffled[:n_train],
        "test": shuffled[n_train : n_train + n_test],
        "validation": shuffled[n_train + n_test :],
    }
    pick = lambda ids: [t for cid in ids for t in by_conv[cid]]
    return DatasetSplit(pick(groups["train"]), pick(groups["test"]), pick(groups["validation"]))


# ----------------------------------------------------------------------------
# synthetic corpus
# ----------------------------------------------------------------------------

# cue word -> deterministic expert response template
CUE_RESPONSES: dict[str, str] = {
    "loss": "i am so sorry to hear that",
    "promotion": "congratulations , that is wonderful news",
    "exam": "good luck , i am sure you will do great",
    "storm": "stay safe , that sounds frightening",
    "wedding": "how exciting , i wish you both the best",
    "illness": "i hope you feel better soon",
    "move": "a fresh start can be a good thing",
    "argument": "that sounds hard , i am here for you",
}

_PROMPT_PATTERNS = [
    "i just heard about the {cue} today",
    "my week has been all about the {cue}",
    "i cannot stop thinking about the {cue}",
    "everyone keeps asking me about the {cue}",
    "the {cue} is still on my mind",
]

_TWEET_TEXTS = [
    "be kind to yourself today",
    "every small step forward still counts",
    "breathe , this moment will pass",
    "gratitude turns what we have into enough",
    "you are stronger than you think",
]


@dataclass(frozen=True)
class SynthSpec:
    """Size and seed parameters for the synthetic corpus generator."""

    n_conversations: int = 100
    n_tweets: int = 0
    seed: int = 0
    turn_choices: tuple[int, ...] = (1, 2, 3)
    turn_weights: tuple[float, ...] = (0.25, 0.5, 0.25)
    reuse_cue_prob: float = 0.5

    def __post_init__(self):
        if self.n_conversations < 0 or self.n_tweets < 0:
            raise ValueError("corpus sizes must be non-negative")
        if len(self.turn_choices) != len(self.turn_weights):
            raise ValueError("turn_choices and turn_weights must align")


def synth_corpus(spec: SynthSpec) -> list[Conversation]:
    """Deterministic cue/template conversations plus optional tweets.

    Every prompt contains exactly one cue word and the expert response is
    that cue's fixed template; later turns reuse an earlier cue with
    probability `reuse_cue_prob`, so histories carry recurring sentiment.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    cues = sorted(CUE_RESPONSES)
    weights = np.asarray(spec.turn_weights, dtype=float)
    weights = weights / weights.sum()
    out: list[Conversation] = []
    for i in range(spec.n_conversations):
        n_turns = int(rng.choice(spec.turn_choices, p=weights))
        utterances: list[str] = []
        used: list[str] = []
        for _ in range(n_turns):
            if used and rng.random() < spec.reuse_cue_prob:
                cue = used[int(rng.integers(len(used)))]
            else:
                cue = cues[int(rng.integers(len(cues)))]
            used.append(cue)
            pattern = _PROMPT_PATTERNS[int(rng.integers(len(_PROMPT_PATTERNS)))]
            utterances.append(pattern.format(cue=cue))
            utterances.append(CUE_RESPONSES[cue])
        out.append(Conversation(id=f"synth-{i:05d}", utterances=utterances, label=used[0]))
    for j in range(spec.n_tweets):
        text = _TWEET_TEXTS[int(rng.integers(len(_TWEET_TEXTS)))]
        out.append(Conversation(id=f"tweet-{j:05d}", utterances=[text], source=SOURCE_TWEET))
    return out


def write_corpus_files(conversations: list[Conversation], conv_path: str, tweet_path: str) -> tuple[int, int]:
    """Write conversations/tweets to their line-delimited record files."""
    n_conv = n_tweet = 0
    with open(conv_path, "w", encoding="utf-8") as cf, open(tweet_path, "w", encoding="utf-8") as tf:
        for conv in conversations:
            if conv.source == SOURCE_TWEET:
                tf.write(json.dumps({"id": conv.id, "text": conv.utterances[0]}, ensure_ascii=False) + "\n")
                n_tweet += 1
            else:
                record = {"id": conv.id, "label": conv.label, "utterances": conv.utterances}
                cf.write(json.dumps(record, ensure_ascii=False) + "\n")
                n_conv += 1
    return n_conv, n_tweet


def trajectory_to_record(t: Trajectory) -> dict:
    return {
        "history": t.history,
        "prompt": t.prompt,
        "response": t.response,
        "source": t.source,
        "conversation_id": t.conversation_id,
        "turn_index": t.turn_index,
    }


def trajectory_from_record(r: dict) -> Trajectory:
    return Trajectory(
        history=r["history"],
        prompt=r["prompt"],
        response=r["response"],
        source=r["source"],
        conversation_id=r["conversation_id"],
        turn_index=r["turn_index"],
    )

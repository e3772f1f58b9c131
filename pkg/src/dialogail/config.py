"""Declarative run configuration: a single strict-keyed JSON file.

Unknown keys are rejected everywhere so typos cannot silently fall back
to defaults. The fully-resolved config is echoed into the output
directory by `prepare`, and serialized into every checkpoint and
metrics file by the trainer.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .discriminator import DiscConfig
from .errors import DataError
from .gail import TrainConfig
from .policy import PolicyConfig
from .textdata import SynthSpec

OUTPUT_ROOT_ENV = "DIALOGAIL_OUTPUT_ROOT"


def _build(cls, data: dict, where: str, **extra):
    if not isinstance(data, dict):
        raise DataError(f"config section '{where}' must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise DataError(f"unknown keys in {where}: {', '.join(unknown)}")
    try:
        return cls(**{**data, **extra})
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid {where} config: {exc}") from exc


@dataclass(frozen=True)
class PolicySettings:
    """Generator architecture; vocab size is bound at train time."""

    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ff_dim: int = 128
    max_context: int = 128
    max_response: int = 24
    dropout: float = 0.0
    layer_norm_eps: float = 1e-5

    def to_policy_config(self, vocab_size: int) -> PolicyConfig:
        return PolicyConfig(vocab_size=vocab_size, **dataclasses.asdict(self))


@dataclass(frozen=True)
class DiscSettings:
    embed_dim: int = 64
    hidden_dim: int = 100

    def to_disc_config(self, vocab_size: int, policy: PolicyConfig) -> DiscConfig:
        return DiscConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            max_state_len=policy.max_state_len,
            max_response_len=policy.max_response,
        )


@dataclass
class CorpusConfig:
    conversations: list[str] = field(default_factory=list)
    tweets: list[str] = field(default_factory=list)
    synthetic: SynthSpec | None = None

    def __post_init__(self):
        if not self.conversations and not self.tweets and self.synthetic is None:
            raise ValueError("corpus config needs file paths or a synthetic block")


@dataclass
class EvalSettings:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    temperature: float = 1.0

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("eval.seeds must be non-empty")


@dataclass
class RunConfig:
    corpus: CorpusConfig
    output_dir: str | None = None
    run_name: str = "run"
    master_seed: int = 0
    precision: int = 32
    vocab_size: int = 256
    policy: PolicySettings = field(default_factory=PolicySettings)
    discriminator: DiscSettings = field(default_factory=DiscSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.vocab_size < 6:
            raise ValueError("vocab_size must be at least 6")

    def resolved_output_dir(self) -> str:
        if self.output_dir:
            return self.output_dir
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if not root:
            raise DataError(
                f"no output_dir in the config and ${OUTPUT_ROOT_ENV} is not set"
            )
        return os.path.join(root, self.run_name)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if self.corpus.synthetic is not None:
            out["corpus"]["synthetic"] = dataclasses.asdict(self.corpus.synthetic)
        return out

    def echo_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def parse_run_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise DataError("run config must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise DataError(f"unknown keys in run config: {', '.join(unknown)}")
    if "corpus" not in data:
        raise DataError("run config requires a 'corpus' section")
    corpus_data = dict(data["corpus"]) if isinstance(data["corpus"], dict) else None
    if corpus_data is None:
        raise DataError("config section 'corpus' must be an object")
    synth = None
    if corpus_data.get("synthetic") is not None:
        synth = _build(SynthSpec, corpus_data.pop("synthetic"), "corpus.synthetic")
        if isinstance(synth.turn_choices, list):
            synth = dataclasses.replace(
                synth,
                turn_choices=tuple(synth.turn_choices),
                turn_weights=tuple(synth.turn_weights),
            )
    else:
        corpus_data.pop("synthetic", None)
    corpus = _build(CorpusConfig, corpus_data, "corpus", synthetic=synth)
    kwargs: dict = {"corpus": corpus}
    for name, cls in (
        ("policy", PolicySettings),
        ("discriminator", DiscSettings),
        ("train", TrainConfig),
        ("eval", EvalSettings),
    ):
        if name in data:
            kwargs[name] = _build(cls, data[name], name)
    for name in ("output_dir", "run_name", "master_seed", "precision", "vocab_size"):
        if name in data:
            kwargs[name] = data[name]
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid run config: {exc}") from exc


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(data)

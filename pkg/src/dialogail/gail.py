"""Adversarial imitation training loop.

One training step: fill the rollout buffer (mixing expert demonstrations
at the scheduled ratio with freshly sampled responses), score every
entry with the discriminator's reward, take one discriminator ascent
step on generated-vs-expert batches, then one PPO update — in that
order. The trainer wraps the step with dataset plumbing, validation,
metrics, and resumable checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from .discriminator import DiscConfig, Discriminator, disc_update, reward_batch
from .errors import CheckpointError, TrainingError
from .evaluate import EvalReport, evaluate_model
from .optim import AdamW, WarmupLinearSchedule
from .policy import (
    PolicyConfig, TransformerPolicy,
    batch_sequence_log_probs, mle_pretrain, sample_response,
)
from .ppo import BufferEntry, PPOConfig, PPOStats, RolloutBuffer, compute_advantages, ppo_update
from .textdata import DatasetSplit, Trajectory, Vocab, encode

log = logging.getLogger(__name__)

STREAM_NAMES = ("policy_init", "disc_init", "mle", "buffer", "disc_batch", "ppo", "validation")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; the named defaults mirror the reference table."""

    # reference-table values
    sample_batch_size: int = 16
    generator_warmup_steps: int = 1000
    human_demo_ratio: float = 0.3
    human_demo_warmup_steps: int = 100
    ppo_buffer_size: int = 128
    ppo_minibatch_size: int = 8
    ppo_epsilon: float = 0.2
    disc_pretrain_steps: int = 200
    disc_lr: float = 1e-4
    weight_decay: float = 0.01
    layer_norm_eps: float = 1e-5
    activation: str = "tanh"
    epochs: int = 750
    batch_size: int = 32
    validation_frequency: int = 10
    # framework decisions
    generator_lr: float = 3e-4
    mle_pretrain_steps: int = 300
    mle_lr: float = 1e-3
    ppo_update_epochs: int = 4
    kl_coef: float = 0.0
    entropy_coef: float = 0.0
    baseline_momentum: float = 0.9
    demo_ratio_floor: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError("only tanh activation is supported")
        if not 0.0 <= self.demo_ratio_floor <= self.human_demo_ratio <= 1.0:
            raise ValueError("need 0 <= demo_ratio_floor <= human_demo_ratio <= 1")
        for name in ("sample_batch_size", "batch_size", "validation_frequency"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for name in ("generator_warmup_steps", "human_demo_warmup_steps", "disc_pretrain_steps",
                     "mle_pretrain_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.disc_lr <= 0 or self.generator_lr <= 0 or self.mle_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(
            clip_epsilon=self.ppo_epsilon,
            buffer_size=self.ppo_buffer_size,
            minibatch_size=self.ppo_minibatch_size,
            update_epochs=self.ppo_update_epochs,
            kl_coef=self.kl_coef,
            entropy_coef=self.entropy_coef,
            baseline_momentum=self.baseline_momentum,
        )


def demo_ratio_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Expert-demonstration mix: hold at the start ratio, then decay linearly.

    The ratio stays at `human_demo_ratio` for the first
    `human_demo_warmup_steps` steps, then falls linearly to
    `demo_ratio_floor`, reaching it exactly at the final step.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    start, floor = config.human_demo_ratio, config.demo_ratio_floor
    hold = config.human_demo_warmup_steps
    if step < hold:
        return start
    last = max(total_steps - 1, hold + 1)
    frac = min(1.0, (step - hold) / (last - hold))
    return start + (floor - start) * frac


@dataclass
class TrainState:
    global_step: int = 0
    epoch: int = 0
    demo_ratio: float = 0.0
    best_val_perplexity: float = float("inf")
    baseline: float = 0.0
    mle_done: bool = False
    disc_pretrain_done: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(**d)


class MetricsWriter:
    """Line-delimited metrics stream; one JSON record per event."""

    def __init__(self, path: str | None):
        self.path = path
        self.records: list[dict] = []
        if path:
            open(path, "a", encoding="utf-8").close()

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def make_streams(master_seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(master_seed).spawn(len(STREAM_NAMES))
    return {name: np.random.Generator(np.random.PCG64(seq)) for name, seq in zip(STREAM_NAMES, children)}


def streams_state(streams: dict[str, np.random.Generator]) -> dict[str, dict]:
    return {name: gen.bit_generator.state for name, gen in streams.items()}


def restore_streams(states: dict[str, dict]) -> dict[str, np.random.Generator]:
    out: dict[str, np.random.Generator] = {}
    for name, state in states.items():
        gen = np.random.Generator(np.random.PCG64(0))
        gen.bit_generator.state = state
        out[name] = gen
    return out


# ----------------------------------------------------------------------------
# one adversarial step (shared by the trainer and the tabular experiment)
# ----------------------------------------------------------------------------

@dataclass
class GailModels:
    policy: TransformerPolicy
    disc: Discriminator
    gen_opt: AdamW
    gen_schedule: WarmupLinearSchedule
    disc_opt: AdamW


def gail_step(
    models: GailModels,
    ppo_cfg: PPOConfig,
    demo_ratio: float,
    baseline: float,
    temperature: float,
    sample_batch_size: int,
    disc_batch_size: int,
    draw_expert: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
    draw_state: Callable[[np.random.Generator], np.ndarray],
    streams: dict[str, np.random.Generator],
) -> tuple[float, dict]:
    """Fill buffer -> reward -> discriminator ascent -> PPO ascent.

    Expert entries enter the buffer with probability `demo_ratio`; their
    "old" log-probs are scored under the current policy, so their initial
    importance ratio is 1. Returns the updated reward baseline and a
    metrics record.
    """
    buffer_stream = streams["buffer"]
    buffer = RolloutBuffer(capacity=ppo_cfg.buffer_size)
    pending: list[tuple[int, np.ndarray, int]] = []
    expert_slots: list[int] = []
    entries: list[BufferEntry | None] = []
    for i in range(ppo_cfg.buffer_size):
        if buffer_stream.random() < demo_ratio:
            state, response = draw_expert(buffer_stream)
            entries.append(BufferEntry(state, response, old_log_prob=0.0, is_expert=True))
            expert_slots.append(i)
        else:
            state = draw_state(buffer_stream)
            z = int(buffer_stream.integers(2**63))
            entries.append(None)
            pending.append((i, state, z))
    # sample pending responses in groups of sample_batch_size
    for lo in range(0, len(pending), sample_batch_size):
        for slot, state, z in pending[lo : lo + sample_batch_size]:
            resp = sample_response(models.policy, state, z=z, temperature=temperature)
            entries[slot] = BufferEntry(
                state_ids=resp.state_ids,
                response_ids=resp.response_ids,
                old_log_prob=resp.total_log_prob,
                is_expert=False,
            )
    if expert_slots:
        pairs = [(entries[i].state_ids, entries[i].response_ids) for i in expert_slots]
        totals = batch_sequence_log_probs(models.policy, pairs)
        for slot, lp in zip(expert_slots, totals):
            entries[slot].old_log_prob = float(lp)
    for e in entries:
        buffer.add(e)

    rewards = reward_batch(models.disc, [(e.state_ids, e.response_ids) for e in buffer.entries])
    for e, r in zip(buffer.entries, rewards):
        e.reward = float(r)

    disc_stream = streams["disc_batch"]
    generated = [e for e in buffer.entries if not e.is_expert]
    disc_objective = None
    if generated:
        if len(generated) >= disc_batch_size:
            idx = disc_stream.permutation(len(generated))[:disc_batch_size]
        else:
            idx = disc_stream.integers(len(generated), size=disc_batch_size)
        gen_batch = [(generated[i].state_ids, generated[i].response_ids) for i in idx]
        exp_batch = [draw_expert(disc_stream) for _ in range(disc_batch_size)]
        disc_objective = disc_update(models.disc, models.disc_opt, gen_batch, exp_batch)

    baseline = compute_advantages(buffer, baseline, ppo_cfg.baseline_momentum)
    stats = ppo_update(models.policy, models.gen_opt, models.gen_schedule, buffer, ppo_cfg, streams["ppo"])
    record = {
        "disc_objective": disc_objective,
        "mean_reward": float(rewards.mean()),
        "clip_fraction": stats.clip_fraction,
        "approx_kl": stats.approx_kl,
        "mean_ratio": stats.mean_ratio,
        "demo_ratio": demo_ratio,
        "expert_fraction": len(expert_slots) / ppo_cfg.buffer_size,
        "baseline": baseline,
    }
    return baseline, record


def pretrain_discriminator(
    models: GailModels,
    steps: int,
    batch_size: int,
    temperature: float,
    draw_expert: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
    draw_state: Callable[[np.random.Generator], np.ndarray],
    stream: np.random.Generator,
) -> list[float]:
    """Ascend the discriminator objective on fresh samples vs experts."""
    values = []
    for _ in range(steps):
        gen_batch = []
        for _ in range(batch_size):
            state = draw_state(stream)
            z = int(stream.integers(2**63))
            resp = sample_response(models.policy, state, z=z, temperature=temperature)
            gen_batch.append((resp.state_ids, resp.response_ids))
        exp_batch = [draw_expert(stream) for _ in range(batch_size)]
        values.append(disc_update(models.disc, models.disc_opt, gen_batch, exp_batch))
    return values


# ----------------------------------------------------------------------------
# trainer
# ----------------------------------------------------------------------------

@dataclass
class TrainOutcome:
    final_path: str
    best_path: str
    mle_path: str | None
    metrics_path: str | None
    best_val_perplexity: float
    initial_val_perplexity: float


class GailTrainer:
    """Owns models, data, RNG streams, metrics, and checkpoints for one run."""

    def __init__(
        self,
        train_cfg: TrainConfig,
        policy_cfg: PolicyConfig,
        disc_cfg: DiscConfig,
        vocab: Vocab,
        split: DatasetSplit,
        master_seed: int,
        precision: int = 32,
        out_dir: str | None = None,
        extra_config: dict | None = None,
    ):
        if precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if not split.train:
            raise ValueError("empty training split")
        self.cfg = train_cfg
        self.policy_cfg = policy_cfg
        self.disc_cfg = disc_cfg
        self.vocab = vocab
        self.split = split
        self.master_seed = master_seed
        self.precision = precision
        self.dtype = np.float32 if precision == 32 else np.float64
        self.out_dir = out_dir
        self.extra_config = extra_config or {}
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        self.metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)

        self.streams = make_streams(master_seed)
        self.state = TrainState(demo_ratio=train_cfg.human_demo_ratio)
        self.policy = TransformerPolicy(policy_cfg, self.streams["policy_init"], dtype=self.dtype)
        self.disc = Discriminator(disc_cfg, self.streams["disc_init"], dtype=self.dtype)

        self.ppo_cfg = train_cfg.ppo_config()
        self.steps_per_epoch = max(1, -(-len(split.train) // train_cfg.ppo_buffer_size))
        self.total_gail_steps = train_cfg.epochs * self.steps_per_epoch
        opt_steps_per_gail_step = train_cfg.ppo_update_epochs * (
            train_cfg.ppo_buffer_size // train_cfg.ppo_minibatch_size
        )
        total_opt_steps = max(2, self.total_gail_steps * opt_steps_per_gail_step)
        warmup = min(train_cfg.generator_warmup_steps, total_opt_steps - 1)
        if warmup < train_cfg.generator_warmup_steps:
            log.warning("generator warmup clamped from %d to %d optimizer steps",
                        train_cfg.generator_warmup_steps, warmup)
        self.gen_schedule = WarmupLinearSchedule(train_cfg.generator_lr, warmup, total_opt_steps)
        self.gen_opt = AdamW(self.policy.params, lr=train_cfg.generator_lr,
                             weight_decay=train_cfg.weight_decay)
        self.disc_opt = AdamW(self.disc.params, lr=train_cfg.disc_lr,
                              weight_decay=train_cfg.weight_decay)

        enc = lambda t: tuple(
            np.asarray(x, dtype=np.int64)
            for x in encode(t, vocab, policy_cfg.max_state_len, policy_cfg.max_response)
        )
        self.train_pairs = [enc(t) for t in split.train]
        self.val_trajs = split.validation

    # -- data draws ------------------------------------------------------------

    def _draw_expert(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        return self.train_pairs[int(rng.integers(len(self.train_pairs)))]

    def _draw_state(self, rng: np.random.Generator) -> np.ndarray:
        return self.train_pairs[int(rng.integers(len(self.train_pairs)))][0]

    def _models(self) -> GailModels:
        return GailModels(self.policy, self.disc, self.gen_opt, self.gen_schedule, self.disc_opt)

    # -- config/checkpoint plumbing ---------------------------------------------

    def config_payload(self) -> dict:
        payload = {
            "train": dataclasses.asdict(self.cfg),
            "policy": dataclasses.asdict(self.policy_cfg),
            "discriminator": dataclasses.asdict(self.disc_cfg),
            "master_seed": self.master_seed,
            "precision": self.precision,
        }
        payload.update(self.extra_config)
        return payload

    def _checkpoint(self) -> ckpt_io.Checkpoint:
        segments: dict[str, np.ndarray] = {}
        for name, arr in self.policy.param_arrays().items():
            segments[f"policy.{name}"] = arr
        for name, arr in self.disc.param_arrays().items():
            segments[f"disc.{name}"] = arr
        for name, arr in self.gen_opt.state_arrays().items():
            segments[f"opt_gen.{name}"] = arr
        for name, arr in self.disc_opt.state_arrays().items():
            segments[f"opt_disc.{name}"] = arr
        state = {
            "train_state": self.state.to_dict(),
            "rng": streams_state(self.streams),
            "gen_opt_step": self.gen_opt.state.step,
            "disc_opt_step": self.disc_opt.state.step,
        }
        return ckpt_io.Checkpoint(
            config=self.config_payload(),
            state=state,
            vocab_tokens=self.vocab.id_to_token,
            segments=segments,
        )

    def save_checkpoint(self, path: str) -> None:
        ckpt_io.save(self._checkpoint(), path)

    def restore(self, ckpt: ckpt_io.Checkpoint) -> None:
        """Adopt parameters, optimizer state, RNG streams, and counters."""
        if ckpt.vocab_tokens != self.vocab.id_to_token:
            raise CheckpointError("checkpoint vocabulary does not match the prepared dataset")
        prefix = lambda p: {k[len(p):]: v for k, v in ckpt.segments.items() if k.startswith(p)}
        self.policy.load_param_arrays(prefix("policy."))
        self.disc.load_param_arrays(prefix("disc."))
        self.gen_opt.load_state_arrays(ckpt.state["gen_opt_step"], prefix("opt_gen."))
        self.disc_opt.load_state_arrays(ckpt.state["disc_opt_step"], prefix("opt_disc."))
        self.state = TrainState.from_dict(ckpt.state["train_state"])
        self.streams = restore_streams(ckpt.state["rng"])

    def _path(self, name: str) -> str:
        if not self.out_dir:
            raise ValueError("trainer has no output directory")
        return os.path.join(self.out_dir, name)

    # -- phases ------------------------------------------------------------------

    def validate(self, tag: str) -> EvalReport:
        seed = int(self.streams["validation"].integers(2**63))
        report = evaluate_model(self.policy, self.val_trajs, self.vocab, seeds=[seed],
                                temperature=self.cfg.temperature)
        ppl = report.overall.perplexity_mean
        improved = ppl < self.state.best_val_perplexity
        if improved:
            self.state.best_val_perplexity = ppl
            if self.out_dir:
                self.save_checkpoint(self._path("best.ckpt"))
        self.metrics.write(
            {
                "kind": "validation",
                "tag": tag,
                "epoch": self.state.epoch,
                "step": self.state.global_step,
                "perplexity": ppl,
                "bleu": report.overall.bleu_mean,
                "best": improved,
            }
        )
        return report

    def run_mle_phase(self) -> None:
        if self.state.mle_done:
            return
        if self.cfg.mle_pretrain_steps > 0:
            result = mle_pretrain(
                self.policy,
                self.train_pairs,
                [tuple(np.asarray(x, dtype=np.int64)
                       for x in encode(t, self.vocab, self.policy_cfg.max_state_len,
                                       self.policy_cfg.max_response))
                 for t in self.val_trajs],
                steps=self.cfg.mle_pretrain_steps,
                batch_size=self.cfg.batch_size,
                lr=self.cfg.mle_lr,
                warmup_steps=min(100, self.cfg.mle_pretrain_steps // 10),
                rng=self.streams["mle"],
                weight_decay=self.cfg.weight_decay,
                validation_frequency=self.cfg.validation_frequency,
                metric_hook=lambda step, train_ce, val_ce: self.metrics.write(
                    {"kind": "mle", "mle_step": step, "train_ce": train_ce, "val_ce": val_ce}
                ),
            )
            log.info("MLE pretraining done: %d steps, best val CE %.4f",
                     result.steps_run, result.best_val_loss)
        self.state.mle_done = True
        if self.out_dir:
            self.save_checkpoint(self._path("mle.ckpt"))

    def run_disc_pretrain_phase(self) -> None:
        if self.state.disc_pretrain_done:
            return
        if self.cfg.disc_pretrain_steps > 0:
            values = pretrain_discriminator(
                self._models(),
                steps=self.cfg.disc_pretrain_steps,
                batch_size=self.cfg.batch_size,
                temperature=self.cfg.temperature,
                draw_expert=self._draw_expert,
                draw_state=self._draw_state,
                stream=self.streams["disc_batch"],
            )
            self.metrics.write(
                {"kind": "disc_pretrain", "steps": len(values),
                 "first_objective": values[0], "last_objective": values[-1]}
            )
        self.state.disc_pretrain_done = True

    def train_step(self) -> dict:
        demo = demo_ratio_at(self.cfg, self.state.global_step, self.total_gail_steps)
        self.state.demo_ratio = demo
        try:
            baseline, record = gail_step(
                self._models(),
                self.ppo_cfg,
                demo_ratio=demo,
                baseline=self.state.baseline,
                temperature=self.cfg.temperature,
                sample_batch_size=self.cfg.sample_batch_size,
                disc_batch_size=self.cfg.batch_size,
                draw_expert=self._draw_expert,
                draw_state=self._draw_state,
                streams=self.streams,
            )
        except TrainingError:
            if self.out_dir:
                self.save_checkpoint(self._path("aborted.ckpt"))
            raise
        self.state.baseline = baseline
        self.state.global_step += 1
        record.update({"kind": "gail_step", "step": self.state.global_step,
                       "epoch": self.state.epoch,
                       "lr": self.gen_schedule.lr_at(min(self.gen_opt.state.step,
                                                         self.gen_schedule.total_steps))})
        self.metrics.write(record)
        return record

    def train(self, stop_after_epoch: int | None = None) -> TrainOutcome:
        """Run (or resume) the full pipeline up to the configured epochs.

        `stop_after_epoch` halts early after that epoch's checkpoint, which
        models an interrupted run; schedules are unaffected by it.
        """
        fresh = self.state.global_step == 0 and self.state.epoch == 0 and not self.state.mle_done
        initial_ppl = None
        if fresh:
            self.metrics.write({"kind": "config", "config": self.config_payload()})
            initial_ppl = self.validate("initial").overall.perplexity_mean
            self.run_mle_phase()
            self.validate("post_mle")
            self.run_disc_pretrain_phase()
            if self.out_dir:
                self.save_checkpoint(self._path("latest.ckpt"))
        target_epochs = self.cfg.epochs
        while self.state.epoch < target_epochs:
            self.state.epoch += 1
            for _ in range(self.steps_per_epoch):
                self.train_step()
            if self.state.epoch % self.cfg.validation_frequency == 0 or self.state.epoch == target_epochs:
                self.validate("gail")
            if self.out_dir:
                self.save_checkpoint(self._path("latest.ckpt"))
            if stop_after_epoch is not None and self.state.epoch >= stop_after_epoch:
                break
        final_path = best_path = mle_path = ""
        if self.out_dir:
            final_path = self._path("final.ckpt")
            self.save_checkpoint(final_path)
            best_path = self._path("best.ckpt")
            if not os.path.exists(best_path):
                self.save_checkpoint(best_path)
            mle_path = self._path("mle.ckpt")
            mle_path = mle_path if os.path.exists(mle_path) else None
        return TrainOutcome(
            final_path=final_path,
            best_path=best_path,
            mle_path=mle_path,
            metrics_path=self.metrics.path,
            best_val_perplexity=self.state.best_val_perplexity,
            initial_val_perplexity=initial_ppl if initial_ppl is not None else float("nan"),
        )

    @classmethod
    def from_checkpoint(
        cls,
        ckpt: ckpt_io.Checkpoint,
        vocab: Vocab,
        split: DatasetSplit,
        out_dir: str | None = None,
    ) -> "GailTrainer":
        cfg = ckpt.config
        trainer = cls(
            TrainConfig(**cfg["train"]),
            PolicyConfig(**cfg["policy"]),
            DiscConfig(**cfg["discriminator"]),
            vocab,
            split,
            master_seed=cfg["master_seed"],
            precision=cfg["precision"],
            out_dir=out_dir,
            extra_config={k: v for k, v in cfg.items()
                          if k not in ("train", "policy", "discriminator", "master_seed", "precision")},
        )
        trainer.restore(ckpt)
        return trainer


def load_policy(ckpt: ckpt_io.Checkpoint) -> tuple[TransformerPolicy, Vocab]:
    """Rebuild just the generator (and vocab) from a checkpoint."""
    cfg = PolicyConfig(**ckpt.config["policy"])
    dtype = np.float32 if ckpt.config.get("precision", 32) == 32 else np.float64
    policy = TransformerPolicy(cfg, np.random.default_rng(0), dtype=dtype)
    policy.load_param_arrays({k[len("policy."):]: v for k, v in ckpt.segments.items()
                              if k.startswith("policy.")})
    return policy, Vocab(ckpt.vocab_tokens)


def load_discriminator(ckpt: ckpt_io.Checkpoint) -> Discriminator:
    cfg = DiscConfig(**ckpt.config["discriminator"])
    dtype = np.float32 if ckpt.config.get("precision", 32) == 32 else np.float64
    disc = Discriminator(cfg, np.random.default_rng(0), dtype=dtype)
    disc.load_param_arrays({k[len("disc."):]: v for k, v in ckpt.segments.items()
                            if k.startswith("disc.")})
    return disc

"""Proximal policy optimization over whole-response actions.

Each buffer entry is a single-step decision: the state is the encoded
(history, prompt) and the action is the complete response, so importance
ratios are sequence-level. The surrogate is the clipped objective with an
optional KL penalty (coefficient C) and an optional per-token entropy
bonus, ascended with AdamW under the warmup-linear schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import TrainingError
from .optim import AdamW, WarmupLinearSchedule
from .policy import TransformerPolicy, batch_scores


@dataclass(frozen=True)
class PPOConfig:
    clip_epsilon: float = 0.2
    buffer_size: int = 128
    minibatch_size: int = 8
    update_epochs: int = 4
    kl_coef: float = 0.0
    entropy_coef: float = 0.0
    baseline_momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if self.buffer_size % self.minibatch_size != 0:
            raise ValueError("buffer_size must be divisible by minibatch_size")
        if self.update_epochs < 1:
            raise ValueError("update_epochs must be positive")
        if self.kl_coef < 0 or self.entropy_coef < 0:
            raise ValueError("penalty coefficients must be non-negative")
        if not 0.0 <= self.baseline_momentum < 1.0:
            raise ValueError("baseline_momentum must be in [0, 1)")


@dataclass
class BufferEntry:
    state_ids: np.ndarray
    response_ids: np.ndarray
    old_log_prob: float
    is_expert: bool = False
    reward: float = float("nan")
    advantage: float = float("nan")


@dataclass
class RolloutBuffer:
    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)

    def add(self, entry: BufferEntry) -> None:
        if len(self.entries) >= self.capacity:
            raise ValueError("rollout buffer is full")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)


def compute_advantages(buffer: RolloutBuffer, baseline: float, momentum: float) -> float:
    """Fill advantages (reward - baseline, then batch-normalized); return the new baseline.

    The baseline is an exponential moving average of the batch mean
    reward, updated *after* advantages are computed. When all advantages
    are identical the normalization is skipped and they are centered to
    zero instead.
    """
    if not buffer.entries:
        raise ValueError("cannot compute advantages of an empty buffer")
    rewards = np.array([e.reward for e in buffer.entries], dtype=np.float64)
    if not np.isfinite(rewards).all():
        raise TrainingError("non-finite reward in rollout buffer")
    raw = rewards - baseline
    centered = raw - raw.mean()
    std = raw.std()
    adv = centered / std if std > 1e-8 else centered
    for e, a in zip(buffer.entries, adv):
        e.advantage = float(a)
    return momentum * baseline + (1.0 - momentum) * float(rewards.mean())


@dataclass
class PPOStats:
    objective: float
    mean_ratio: float
    clip_fraction: float
    approx_kl: float
    entropy: float


def ppo_objective(
    model: TransformerPolicy, entries: list[BufferEntry], config: PPOConfig
) -> tuple[Tensor, PPOStats]:
    """Clipped surrogate - C*KL + entropy bonus for one minibatch.

    ratio = exp(new - old) per sequence; surrogate term is
    min(ratio*adv, clip(ratio)*adv); the KL estimate is
    mean(max(old - new, 0)), zero exactly at new == old.
    """
    pairs = [(e.state_ids, e.response_ids) for e in entries]
    old = np.array([e.old_log_prob for e in entries], dtype=np.float64)
    adv = np.array([e.advantage for e in entries], dtype=np.float64)
    if not np.isfinite(adv).all():
        raise TrainingError("advantages not computed before ppo_objective")
    new_lp, mean_entropy, _ = batch_scores(model, pairs)
    dt = new_lp.data.dtype
    ratio = ad.exp(ad.add(new_lp, Tensor(-old.astype(dt))))
    if not np.isfinite(ratio.data).all():
        worst = int(np.argmax(~np.isfinite(ratio.data)))
        raise TrainingError(
            f"non-finite importance ratio (entry {worst}: old={old[worst]:.4f}, new={new_lp.data[worst]:.4f})"
        )
    advc = Tensor(adv.astype(dt))
    eps = config.clip_epsilon
    surrogate = ad.tmean(ad.minimum(ad.mul(ratio, advc), ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), advc)))
    kl_terms = ad.relu(ad.add(ad.mul(new_lp, -1.0), Tensor(old.astype(dt))))
    kl = ad.tmean(kl_terms)
    objective = surrogate
    if config.kl_coef > 0:
        objective = ad.add(objective, ad.mul(kl, -config.kl_coef))
    if config.entropy_coef > 0:
        objective = ad.add(objective, ad.mul(mean_entropy, config.entropy_coef))
    ratios = ratio.data.astype(np.float64)
    stats = PPOStats(
        objective=float(objective.item()),
        mean_ratio=float(ratios.mean()),
        clip_fraction=float(((ratios < 1.0 - eps) | (ratios > 1.0 + eps)).mean()),
        approx_kl=float(kl.item()),
        entropy=float(mean_entropy.item()),
    )
    return objective, stats


def ppo_update(
    model: TransformerPolicy,
    opt: AdamW,
    schedule: WarmupLinearSchedule | None,
    buffer: RolloutBuffer,
    config: PPOConfig,
    rng: np.random.Generator,
    lr: float | None = None,
) -> PPOStats:
    """Ascend the objective for `update_epochs` passes of shuffled minibatches.

    The learning rate comes from the schedule (indexed by completed
    optimizer steps) unless a fixed `lr` is given. Returns stats averaged
    over all minibatches of the final epoch.
    """
    if schedule is None and lr is None:
        raise ValueError("either a schedule or a fixed lr is required")
    n = len(buffer.entries)
    if n == 0 or n % config.minibatch_size != 0:
        raise ValueError(f"buffer length {n} not divisible by minibatch size {config.minibatch_size}")
    last_epoch: list[PPOStats] = []
    for epoch in range(config.update_epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, config.minibatch_size):
            batch = [buffer.entries[i] for i in perm[lo : lo + config.minibatch_size]]
            objective, stats = ppo_objective(model, batch, config)
            loss = ad.mul(objective, -1.0)
            opt.zero_grad()
            loss.backward()
            rate = lr if lr is not None else schedule.lr_at(min(opt.state.step, schedule.total_steps))
            opt.step(lr=rate)
            if epoch == config.update_epochs - 1:
                last_epoch.append(stats)
    return PPOStats(
        objective=float(np.mean([s.objective for s in last_epoch])),
        mean_ratio=float(np.mean([s.mean_ratio for s in last_epoch])),
        clip_fraction=float(np.mean([s.clip_fraction for s in last_epoch])),
        approx_kl=float(np.mean([s.approx_kl for s in last_epoch])),
        entropy=float(np.mean([s.entropy for s in last_epoch])),
    )

"""Exact occupancy-measure verification on an enumerable space.

On a space small enough to enumerate every possible response, the
adversarial loop's core claim — that the learned policy's state-action
distribution approaches the expert's — can be checked exactly. The
experiment runs the real policy/discriminator/PPO machinery against a
tabular expert and reports the total-variation distance between the two
occupancy measures before and after training, with the policy's measure
computed by exhaustive enumeration of all response sequences.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .discriminator import DiscConfig, Discriminator
from .gail import GailModels, TrainConfig, demo_ratio_at, gail_step, make_streams, pretrain_discriminator
from .optim import AdamW, WarmupLinearSchedule
from .policy import PolicyConfig, TransformerPolicy
from .ppo import PPOConfig
from .textdata import BOS, EOS, SEP

log = logging.getLogger(__name__)

ENUMERATION_GUARD = 1_000_000


@dataclass
class OccupancyTable:
    """Probability mass over (state, response) pairs; masses sum to 1."""

    mass: dict[tuple[tuple[int, ...], tuple[int, ...]], float]

    def total(self) -> float:
        return float(sum(self.mass.values()))

    def check_normalized(self, tol: float = 1e-9) -> None:
        t = self.total()
        if abs(t - 1.0) > tol:
            raise ValueError(f"occupancy masses sum to {t}, expected 1 ± {tol}")

    def tv_distance(self, other: "OccupancyTable") -> float:
        keys = set(self.mass) | set(other.mass)
        return 0.5 * sum(abs(self.mass.get(k, 0.0) - other.mass.get(k, 0.0)) for k in keys)


@dataclass
class OccupancySpec:
    """Finite space plus training knobs for the tabular experiment.

    `expert_table` maps a prompt (tuple of content token ids) to a list of
    (response tokens without EOS, probability); probabilities per prompt
    must sum to 1 and responses must fit in `max_response_len`.
    """

    prompts: list[tuple[int, ...]]
    expert_table: dict[tuple[int, ...], list[tuple[tuple[int, ...], float]]]
    vocab_size: int = 13
    max_response_len: int = 4
    gail_steps: int = 2000
    eval_every: int = 25
    stop_ratio: float | None = 0.45
    seed: int = 0
    # model scale
    embed_dim: int = 32
    n_layers: int = 1
    n_heads: int = 2
    ff_dim: int = 48
    # optimization; the KL penalty keeps the adversarial game from thrashing
    generator_lr: float = 1e-3
    disc_lr: float = 1e-3
    disc_pretrain_steps: int = 100
    buffer_size: int = 128
    minibatch_size: int = 8
    sample_batch_size: int = 16
    disc_batch_size: int = 32
    update_epochs: int = 2
    kl_coef: float = 1.0
    demo_ratio: float = 0.5
    demo_ratio_floor: float = 0.5
    demo_hold_steps: int = 50
    entropy_coef: float = 0.0
    init_policy_arrays: dict | None = None

    def __post_init__(self):
        if not self.prompts:
            raise ValueError("at least one prompt is required")
        if len(self.prompts) > 10:
            raise ValueError("the tabular space allows at most 10 distinct prompts")
        for p in self.prompts:
            if p not in self.expert_table:
                raise ValueError(f"prompt {p} missing from the expert table")
            if any(t < 5 or t >= self.vocab_size for t in p):
                raise ValueError("prompt tokens must be content ids in [5, vocab_size)")
            rows = self.expert_table[p]
            if abs(sum(prob for _, prob in rows) - 1.0) > 1e-9:
                raise ValueError(f"expert probabilities for prompt {p} must sum to 1")
            for resp, _ in rows:
                if len(resp) > self.max_response_len or len(resp) == 0:
                    raise ValueError("expert responses must have length in [1, max_response_len]")
        n = sequences_in_space(self.vocab_size, self.max_response_len) * len(self.prompts)
        if n > ENUMERATION_GUARD:
            raise ValueError(f"{n} sequences exceed the enumeration guard of {ENUMERATION_GUARD}")


def sequences_in_space(vocab_size: int, cap: int) -> int:
    branch = vocab_size - 1  # every non-EOS token can appear inside a response
    return sum(branch**d for d in range(cap)) + branch**cap


def state_for_prompt(prompt: tuple[int, ...]) -> np.ndarray:
    return np.array([BOS, SEP, *prompt, SEP], dtype=np.int64)


def full_response(resp: tuple[int, ...], cap: int) -> tuple[int, ...]:
    """Sampling semantics: EOS terminates unless the cap is hit first."""
    return resp if len(resp) == cap else resp + (EOS,)


def expert_occupancy(spec: OccupancySpec) -> OccupancyTable:
    mass: dict = {}
    p_state = 1.0 / len(spec.prompts)
    for prompt in spec.prompts:
        skey = tuple(state_for_prompt(prompt))
        for resp, prob in spec.expert_table[prompt]:
            key = (skey, full_response(tuple(resp), spec.max_response_len))
            mass[key] = mass.get(key, 0.0) + p_state * prob
    table = OccupancyTable(mass)
    table.check_normalized()
    return table


def _next_log_probs(policy: TransformerPolicy, ids: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = []
    for lo in range(0, len(ids), chunk):
        logits = policy.forward_logits(ids[lo : lo + chunk])[:, -1, :].astype(np.float64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        out.append(shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)))
    return np.concatenate(out, axis=0)


def policy_occupancy(policy: TransformerPolicy, spec: OccupancySpec) -> OccupancyTable:
    """Exact ρ under the current policy by enumerating every response sequence."""
    cap = spec.max_response_len
    V = policy.config.vocab_size
    if sequences_in_space(V, cap) * len(spec.prompts) > ENUMERATION_GUARD:
        raise ValueError("space too large to enumerate")
    non_eos = [t for t in range(V) if t != EOS]
    p_state = 1.0 / len(spec.prompts)
    mass: dict = {}
    for prompt in spec.prompts:
        state = state_for_prompt(prompt)
        skey = tuple(state)
        prefixes: list[tuple[int, ...]] = [()]
        logps = np.zeros(1, dtype=np.float64)
        for _depth in range(cap):
            ids = np.array([list(state) + list(p) for p in prefixes], dtype=np.int64)
            nxt = _next_log_probs(policy, ids)
            for i, pfx in enumerate(prefixes):
                mass[(skey, pfx + (EOS,))] = p_state * float(np.exp(logps[i] + nxt[i, EOS]))
            logps = (logps[:, None] + nxt[:, non_eos]).ravel()
            prefixes = [pfx + (tok,) for pfx in prefixes for tok in non_eos]
        for i, pfx in enumerate(prefixes):
            mass[(skey, pfx)] = p_state * float(np.exp(logps[i]))
    table = OccupancyTable(mass)
    table.check_normalized()
    return table


@dataclass
class OccupancyReport:
    initial_tv: float
    final_tv: float
    curve: list[tuple[int, float]] = field(default_factory=list)
    steps_run: int = 0
    elapsed_seconds: float = 0.0


def policy_config_for_spec(spec: OccupancySpec) -> PolicyConfig:
    state_len = 3 + max(len(p) for p in spec.prompts)
    return PolicyConfig(
        vocab_size=spec.vocab_size,
        embed_dim=spec.embed_dim,
        n_layers=spec.n_layers,
        n_heads=spec.n_heads,
        ff_dim=spec.ff_dim,
        max_context=state_len + spec.max_response_len + 1,
        max_response=spec.max_response_len,
    )


def tabular_occupancy_experiment(spec: OccupancySpec) -> OccupancyReport:
    """Run the adversarial loop on the finite space and track exact TV distance."""
    t0 = time.monotonic()
    streams = make_streams(spec.seed)
    state_len = 3 + max(len(p) for p in spec.prompts)
    policy_cfg = policy_config_for_spec(spec)
    policy = TransformerPolicy(policy_cfg, streams["policy_init"], dtype=np.float64)
    if spec.init_policy_arrays is not None:
        policy.load_param_arrays(spec.init_policy_arrays)
    disc_cfg = DiscConfig(
        vocab_size=spec.vocab_size,
        embed_dim=16,
        hidden_dim=100,
        max_state_len=state_len,
        max_response_len=spec.max_response_len,
    )
    disc = Discriminator(disc_cfg, streams["disc_init"], dtype=np.float64)

    ppo_cfg = PPOConfig(
        buffer_size=spec.buffer_size,
        minibatch_size=spec.minibatch_size,
        update_epochs=spec.update_epochs,
        entropy_coef=spec.entropy_coef,
        kl_coef=spec.kl_coef,
    )
    opt_steps = max(2, spec.gail_steps * spec.update_epochs * (spec.buffer_size // spec.minibatch_size))
    schedule = WarmupLinearSchedule(spec.generator_lr, min(50, opt_steps - 1), opt_steps)
    models = GailModels(
        policy=policy,
        disc=disc,
        gen_opt=AdamW(policy.params, lr=spec.generator_lr, weight_decay=0.01),
        gen_schedule=schedule,
        disc_opt=AdamW(disc.params, lr=spec.disc_lr, weight_decay=0.01),
    )

    states = [state_for_prompt(p) for p in spec.prompts]
    cdfs = {
        p: np.cumsum([prob for _, prob in spec.expert_table[p]]) for p in spec.prompts
    }
    responses_full = {
        p: [np.array(full_response(tuple(r), spec.max_response_len), dtype=np.int64)
            for r, _ in spec.expert_table[p]]
        for p in spec.prompts
    }

    def draw_expert(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        i = int(rng.integers(len(spec.prompts)))
        prompt = spec.prompts[i]
        j = int(np.searchsorted(cdfs[prompt], rng.random(), side="right"))
        j = min(j, len(responses_full[prompt]) - 1)
        return states[i], responses_full[prompt][j]

    def draw_state(rng: np.random.Generator) -> np.ndarray:
        return states[int(rng.integers(len(states)))]

    demo_cfg = TrainConfig(
        human_demo_ratio=spec.demo_ratio,
        demo_ratio_floor=spec.demo_ratio_floor,
        human_demo_warmup_steps=spec.demo_hold_steps,
    )

    expert_table = expert_occupancy(spec)
    initial_tv = policy_occupancy(policy, spec).tv_distance(expert_table)
    report = OccupancyReport(initial_tv=initial_tv, final_tv=initial_tv, curve=[(0, initial_tv)])
    log.info("initial TV distance: %.4f", initial_tv)

    if spec.disc_pretrain_steps > 0:
        pretrain_discriminator(
            models,
            steps=spec.disc_pretrain_steps,
            batch_size=spec.disc_batch_size,
            temperature=1.0,
            draw_expert=draw_expert,
            draw_state=draw_state,
            stream=streams["disc_batch"],
        )

    baseline = 0.0
    target = None if spec.stop_ratio is None else spec.stop_ratio * initial_tv
    for step in range(1, spec.gail_steps + 1):
        demo = demo_ratio_at(demo_cfg, step - 1, spec.gail_steps)
        baseline, _ = gail_step(
            models,
            ppo_cfg,
            demo_ratio=demo,
            baseline=baseline,
            temperature=1.0,
            sample_batch_size=spec.sample_batch_size,
            disc_batch_size=spec.disc_batch_size,
            draw_expert=draw_expert,
            draw_state=draw_state,
            streams=streams,
        )
        report.steps_run = step
        if step % spec.eval_every == 0 or step == spec.gail_steps:
            tv = policy_occupancy(policy, spec).tv_distance(expert_table)
            report.curve.append((step, tv))
            report.final_tv = tv
            log.info("step %d: TV distance %.4f (demo ratio %.3f)", step, tv, demo)
            if target is not None and tv <= target:
                break
    report.elapsed_seconds = time.monotonic() - t0
    return report


def deterministic_expert_spec(n_prompts: int = 5, seed: int = 0, **overrides) -> OccupancySpec:
    """A standard fixture: n distinct prompts, each with one fixed response."""
    rng = np.random.default_rng(seed)
    prompts = []
    table = {}
    content = list(range(5, 13))
    for i in range(n_prompts):
        prompt = (content[i % len(content)], content[(i * 3 + 1) % len(content)])
        while prompt in table:
            prompt = tuple(int(t) for t in rng.choice(content, size=2))
        length = 1 + (i % 3)
        resp = tuple(int(t) for t in rng.choice(content, size=length))
        prompts.append(prompt)
        table[prompt] = [(resp, 1.0)]
    return OccupancySpec(prompts=prompts, expert_table=table, seed=seed, **overrides)

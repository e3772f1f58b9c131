"""Perplexity and BLEU over conversation-depth buckets.

Test trajectories are split into 1-turn (no history), 2-turn (one prior
turn) and 3+-turn (two or more prior turns) buckets. Perplexity is
teacher-forced on reference responses, pooled over all tokens of a
bucket; BLEU compares temperature-sampled responses against references.
Reports carry both BLEU similarity and "BLEU error" (100 - similarity),
since this problem family conventionally reports the inverted value.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .policy import TransformerPolicy, pack_batch, sample_response
from .textdata import EOS, Trajectory, Vocab, encode

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
BUCKETS = ("1", "2", "3+")


def perplexity(probs) -> float:
    """exp(-(1/t) * sum log p_i) for per-token reference probabilities.

    Computed in log space; zero probabilities are clamped to 1e-12 with a
    warning. Equivalent to the inverse geometric mean of the probabilities.
    """
    arr = np.asarray(probs, dtype=np.float64)
    if arr.size < 1:
        raise ValueError("perplexity requires at least one probability")
    if (arr <= 0).any():
        n_bad = int((arr <= 0).sum())
        log.warning("perplexity: clamping %d zero/negative probabilities to %g", n_bad, PROB_FLOOR)
        arr = np.maximum(arr, PROB_FLOOR)
    if (arr > 1.0).any():
        raise ValueError("probabilities must lie in (0, 1]")
    return float(np.exp(-np.mean(np.log(arr))))


def perplexity_from_log_probs(log_probs) -> float:
    arr = np.asarray(log_probs, dtype=np.float64)
    if arr.size < 1:
        raise ValueError("perplexity requires at least one log-probability")
    arr = np.maximum(arr, np.log(PROB_FLOOR))
    return float(np.exp(-arr.mean()))


def ngram_counts(tokens, n: int) -> Counter:
    """Independent n-gram counter used as the BLEU oracle and implementation."""
    seq = [int(t) for t in tokens]
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def clipped_matches(candidate, reference, n: int) -> tuple[int, int]:
    """(clipped match count, candidate n-gram count) for one pair."""
    cand = ngram_counts(candidate, n)
    ref = ngram_counts(reference, n)
    matched = sum(min(c, ref[gram]) for gram, c in cand.items())
    return matched, sum(cand.values())


def bleu(candidates: list, references: list) -> float:
    """Corpus-level BLEU-4 similarity in [0, 100].

    Clipped n-gram precisions for n = 1..4 aggregated over the corpus;
    add-one smoothing on the counts for n >= 2; geometric mean; brevity
    penalty exp(min(0, 1 - ref_len/cand_len)).
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references must be parallel lists")
    if not candidates:
        raise ValueError("empty corpus")
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    log_precisions = []
    for n in range(1, 5):
        matched = total = 0
        for cand, ref in zip(candidates, references):
            m, t = clipped_matches(cand, ref, n)
            matched += m
            total += t
        if n >= 2:
            matched += 1
            total += 1
        if matched == 0 or total == 0:
            return 0.0
        log_precisions.append(math.log(matched / total))
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return 100.0 * bp * math.exp(sum(log_precisions) / 4.0)


def bucket_of(trajectory: Trajectory) -> str:
    """Prior-turn bucket: empty history -> 1; one turn -> 2; else 3+."""
    n_utterances = len(trajectory.history_utterances())
    prior_turns = n_utterances // 2
    if prior_turns == 0:
        return "1"
    if prior_turns == 1:
        return "2"
    return "3+"


def bucket_by_turns(trajectories: list[Trajectory]) -> dict[str, list[Trajectory]]:
    out: dict[str, list[Trajectory]] = {b: [] for b in BUCKETS}
    for t in trajectories:
        out[bucket_of(t)].append(t)
    return out


@dataclass
class BucketResult:
    count: int
    perplexity_mean: float
    perplexity_sd: float | None
    bleu_mean: float
    bleu_sd: float | None

    @property
    def bleu_error_mean(self) -> float:
        return 100.0 - self.bleu_mean


@dataclass
class EvalReport:
    seeds: list[int]
    vocab_size: int
    buckets: dict[str, BucketResult] = field(default_factory=dict)
    overall: BucketResult | None = None
    clamped_tokens: int = 0

    def to_records(self) -> list[dict]:
        rows = []
        for name, r in list(self.buckets.items()) + [("overall", self.overall)]:
            if r is None:
                continue
            rows.append(
                {
                    "bucket": name,
                    "count": r.count,
                    "perplexity_mean": r.perplexity_mean,
                    "perplexity_sd": r.perplexity_sd,
                    "bleu_mean": r.bleu_mean,
                    "bleu_sd": r.bleu_sd,
                    "bleu_error_mean": r.bleu_error_mean,
                    "seeds": self.seeds,
                    "uniform_baseline_perplexity": float(self.vocab_size),
                }
            )
        return rows

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.to_records()) + "\n"

    def render_table(self) -> str:
        def fmt(mean, sd):
            if sd is None:
                return f"{mean:10.2f}"
            return f"{mean:10.2f} ± {sd:<6.2f}"

        lines = [
            f"{'Bucket':<8}{'Count':>6}  {'Perplexity':>18}  {'BLEU':>18}  {'BLEU error':>12}",
            "-" * 70,
        ]
        for name in BUCKETS:
            r = self.buckets.get(name)
            if r is None or r.count == 0:
                lines.append(f"{name:<8}{0:>6}  {'(empty)':>18}")
                continue
            lines.append(
                f"{name:<8}{r.count:>6}  {fmt(r.perplexity_mean, r.perplexity_sd):>18}"
                f"  {fmt(r.bleu_mean, r.bleu_sd):>18}  {r.bleu_error_mean:>12.2f}"
            )
        if self.overall is not None:
            lines.append("-" * 70)
            r = self.overall
            lines.append(
                f"{'overall':<8}{r.count:>6}  {fmt(r.perplexity_mean, r.perplexity_sd):>18}"
                f"  {fmt(r.bleu_mean, r.bleu_sd):>18}  {r.bleu_error_mean:>12.2f}"
            )
        lines.append(f"uniform-policy perplexity baseline: {float(self.vocab_size):.1f}")
        return "\n".join(lines)


def _reference_log_probs(
    model: TransformerPolicy, pairs: list[tuple[np.ndarray, np.ndarray]], batch_size: int = 32
) -> list[np.ndarray]:
    """Per-token log-probs of each reference response, teacher-forced."""
    out: list[np.ndarray] = []
    with ad.no_grad():
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo : lo + batch_size]
            inputs, labels, mask = pack_batch(chunk, model.config.vocab_size)
            lsm = ad.log_softmax(model.forward(inputs), axis=-1).data
            lp = np.take_along_axis(lsm, labels[..., None], axis=-1)[..., 0]
            for b in range(len(chunk)):
                out.append(lp[b][mask[b] > 0].astype(np.float64))
    return out


def _strip_eos(ids) -> list[int]:
    ids = [int(t) for t in ids]
    return ids[:-1] if ids and ids[-1] == EOS else ids


def _mean_sd(values: list[float]) -> tuple[float, float | None]:
    if len(values) < 2:
        return float(values[0]), None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))


def evaluate_model(
    model: TransformerPolicy,
    test_trajectories: list[Trajectory],
    vocab: Vocab,
    seeds: list[int],
    temperature: float = 1.0,
) -> EvalReport:
    """Bucketed perplexity and BLEU, aggregated over evaluation seeds.

    Perplexity is seed-independent (teacher-forced); BLEU varies with the
    sampling seed. Empty buckets are reported as absent. Results do not
    depend on the order of the test set.
    """
    if not seeds:
        raise ValueError("at least one evaluation seed is required")
    if not test_trajectories:
        raise ValueError("empty test set")
    cfg = model.config
    ordered = sorted(test_trajectories, key=lambda t: (t.conversation_id, t.turn_index, t.prompt))
    buckets = bucket_by_turns(ordered)
    report = EvalReport(seeds=list(seeds), vocab_size=cfg.vocab_size)

    encoded: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    ref_lps: dict[str, list[np.ndarray]] = {}
    for name, trajs in buckets.items():
        pairs = [
            tuple(np.asarray(x, dtype=np.int64) for x in encode(t, vocab, cfg.max_state_len, cfg.max_response))
            for t in trajs
        ]
        encoded[name] = pairs
        ref_lps[name] = _reference_log_probs(model, pairs) if pairs else []

    overall_ppl_by_seed: list[float] = []
    overall_bleu_by_seed: list[float] = []
    per_bucket_ppl: dict[str, list[float]] = {b: [] for b in BUCKETS}
    per_bucket_bleu: dict[str, list[float]] = {b: [] for b in BUCKETS}
    for seed in seeds:
        stream = np.random.Generator(np.random.PCG64(seed))
        all_lps: list[np.ndarray] = []
        all_cands: list[list[int]] = []
        all_refs: list[list[int]] = []
        for name in BUCKETS:
            pairs = encoded[name]
            if not pairs:
                continue
            lps = np.concatenate(ref_lps[name])
            per_bucket_ppl[name].append(perplexity_from_log_probs(lps))
            all_lps.append(lps)
            cands, refs = [], []
            for state, target in pairs:
                z = int(stream.integers(2**63))
                resp = sample_response(model, state, z=z, temperature=temperature)
                cands.append(_strip_eos(resp.response_ids))
                refs.append(_strip_eos(target))
            per_bucket_bleu[name].append(bleu(cands, refs))
            all_cands.extend(cands)
            all_refs.extend(refs)
        overall_ppl_by_seed.append(perplexity_from_log_probs(np.concatenate(all_lps)))
        overall_bleu_by_seed.append(bleu(all_cands, all_refs))

    for name in BUCKETS:
        if not encoded[name]:
            continue
        ppl_mean, ppl_sd = _mean_sd(per_bucket_ppl[name])
        bleu_mean, bleu_sd = _mean_sd(per_bucket_bleu[name])
        report.buckets[name] = BucketResult(len(encoded[name]), ppl_mean, ppl_sd, bleu_mean, bleu_sd)
    ppl_mean, ppl_sd = _mean_sd(overall_ppl_by_seed)
    bleu_mean, bleu_sd = _mean_sd(overall_bleu_by_seed)
    report.overall = BucketResult(len(ordered), ppl_mean, ppl_sd, bleu_mean, bleu_sd)
    return report

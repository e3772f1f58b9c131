"""Autoregressive generator: a small decoder-only transformer.

The generator stands in for a large pretrained LM at desk scale. It
supports three access paths: a graph-building forward for training, a
cached incremental decoder for sampling, and teacher-forced scoring of a
given response. Sampling is fully determined by an integer noise seed z,
so any generated response can be reproduced exactly from
(params, state, z, temperature).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import TrainingError
from .optim import AdamW, WarmupLinearSchedule
from .textdata import EOS

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ff_dim: int = 128
    max_context: int = 128
    max_response: int = 24
    dropout: float = 0.0
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.max_context <= self.max_response:
            raise ValueError("max_context must exceed max_response")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if min(self.vocab_size, self.n_layers, self.n_heads, self.ff_dim) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def max_state_len(self) -> int:
        return self.max_context - self.max_response

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads


@dataclass
class GeneratedResponse:
    """One sampled response with the log-probs recorded at sampling time."""

    state_ids: np.ndarray
    response_ids: np.ndarray
    log_probs: np.ndarray  # per token, under the temperature-1 distribution
    z: int
    temperature: float

    @property
    def total_log_prob(self) -> float:
        return float(self.log_probs.sum())


class TransformerPolicy:
    """Decoder-only transformer over token ids, tanh feed-forward blocks."""

    def __init__(self, config: PolicyConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        d, ff, V = config.embed_dim, config.ff_dim, config.vocab_size
        p: dict[str, Tensor] = {}
        p["tok_emb"] = ad.init_uniform(rng, (V, d), V, dtype)
        p["pos_emb"] = ad.init_uniform(rng, (config.max_context, d), config.max_context, dtype)
        for i in range(config.n_layers):
            pre = f"layer{i}."
            p[pre + "ln1_g"] = ad.ones((d,), dtype)
            p[pre + "ln1_b"] = ad.zeros((d,), dtype)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = ad.init_uniform(rng, (d, d), d, dtype)
            for name in ("bq", "bk", "bv", "bo"):
                p[pre + name] = ad.zeros((d,), dtype)
            p[pre + "ln2_g"] = ad.ones((d,), dtype)
            p[pre + "ln2_b"] = ad.zeros((d,), dtype)
            p[pre + "w1"] = ad.init_uniform(rng, (d, ff), d, dtype)
            p[pre + "b1"] = ad.zeros((ff,), dtype)
            p[pre + "w2"] = ad.init_uniform(rng, (ff, d), ff, dtype)
            p[pre + "b2"] = ad.zeros((d,), dtype)
        p["ln_f_g"] = ad.ones((d,), dtype)
        p["ln_f_b"] = ad.zeros((d,), dtype)
        p["head_w"] = ad.init_uniform(rng, (d, V), d, dtype)
        p["head_b"] = ad.zeros((V,), dtype)
        self.params = p

    # -- parameter plumbing ---------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def clone_param_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = arrays[k]
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter '{k}' shape mismatch: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype)

    # -- graph forward ---------------------------------------------------------

    def forward(self, ids: np.ndarray, train_rng: np.random.Generator | None = None) -> Tensor:
        """Logits (B, T, V); position t attends only to positions <= t."""
        ids = np.atleast_2d(np.asarray(ids))
        B, T = ids.shape
        cfg = self.config
        if T > cfg.max_context:
            raise ValueError(f"context overflow: {T} > {cfg.max_context}")
        p = self.params
        neg = self.dtype(-1e9 if self.dtype == np.float32 else -1e30)
        keep = np.tril(np.ones((T, T), dtype=self.dtype))[None, None, :, :]
        fill = (1.0 - keep) * neg

        x = ad.add(ad.embedding(p["tok_emb"], ids), ad.embedding(p["pos_emb"], np.arange(T)))
        if train_rng is not None and cfg.dropout > 0:
            x = ad.dropout(x, cfg.dropout, train_rng)
        nh, hd = cfg.n_heads, cfg.head_dim
        scale = 1.0 / np.sqrt(hd)
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            h = ad.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"], cfg.layer_norm_eps)
            q = _split_heads(ad.affine(h, p[pre + "wq"], p[pre + "bq"]), nh, hd)
            k = _split_heads(ad.affine(h, p[pre + "wk"], p[pre + "bk"]), nh, hd)
            v = _split_heads(ad.affine(h, p[pre + "wv"], p[pre + "bv"]), nh, hd)
            att = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
            att = ad.add(ad.mul(att, Tensor(keep)), Tensor(fill))
            weights = ad.softmax(att, axis=-1)
            ctx = _merge_heads(ad.matmul(weights, v))
            x = ad.add(x, ad.affine(ctx, p[pre + "wo"], p[pre + "bo"]))
            h2 = ad.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"], cfg.layer_norm_eps)
            ffn = ad.matmul(ad.tanh(ad.affine(h2, p[pre + "w1"], p[pre + "b1"])), p[pre + "w2"])
            x = ad.add(x, ad.add(ffn, p[pre + "b2"]))
            if train_rng is not None and cfg.dropout > 0:
                x = ad.dropout(x, cfg.dropout, train_rng)
        x = ad.layer_norm(x, p["ln_f_g"], p["ln_f_b"], cfg.layer_norm_eps)
        return ad.affine(x, p["head_w"], p["head_b"])

    def forward_logits(self, ids: np.ndarray) -> np.ndarray:
        """Plain-array logits without graph recording."""
        with ad.no_grad():
            return self.forward(ids).data

    # -- incremental decoding ---------------------------------------------------

    def start_cache(self, state_ids: np.ndarray) -> "_DecodeCache":
        cache = _DecodeCache(self)
        cache.prefill(np.asarray(state_ids, dtype=np.int64).reshape(-1))
        return cache


def _split_heads(x: Tensor, nh: int, hd: int) -> Tensor:
    B, T, _ = x.shape
    return ad.transpose(ad.reshape(x, (B, T, nh, hd)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, nh, T, hd = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, nh * hd))


class _DecodeCache:
    """Per-layer key/value cache for one growing sequence."""

    def __init__(self, model: TransformerPolicy):
        self.model = model
        cfg = model.config
        self.pos = 0
        self.keys = [np.zeros((0, cfg.n_heads, cfg.head_dim), dtype=model.dtype) for _ in range(cfg.n_layers)]
        self.values = [np.zeros((0, cfg.n_heads, cfg.head_dim), dtype=model.dtype) for _ in range(cfg.n_layers)]
        self.last_logits: np.ndarray | None = None

    def prefill(self, tokens: np.ndarray) -> np.ndarray:
        """Consume a whole prefix at once; return next-token logits (V,)."""
        cfg = self.model.config
        T = len(tokens)
        if T == 0:
            raise ValueError("prefill requires at least one token")
        if self.pos + T > cfg.max_context:
            raise ValueError(f"context overflow: {self.pos + T} > {cfg.max_context}")
        p = {k: t.data for k, t in self.model.params.items()}
        eps = cfg.layer_norm_eps
        nh, hd = cfg.n_heads, cfg.head_dim
        x = p["tok_emb"][tokens] + p["pos_emb"][self.pos : self.pos + T]
        neg = self.model.dtype(-1e9 if self.model.dtype == np.float32 else -1e30)
        keep = np.tril(np.ones((T, T), dtype=self.model.dtype))
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            h = _ln_rows(x, p[pre + "ln1_g"], p[pre + "ln1_b"], eps)
            q = (h @ p[pre + "wq"] + p[pre + "bq"]).reshape(T, nh, hd)
            k = (h @ p[pre + "wk"] + p[pre + "bk"]).reshape(T, nh, hd)
            v = (h @ p[pre + "wv"] + p[pre + "bv"]).reshape(T, nh, hd)
            prev = self.keys[i].shape[0]
            self.keys[i] = np.concatenate([self.keys[i], k], axis=0)
            self.values[i] = np.concatenate([self.values[i], v], axis=0)
            # rows attend to all cached positions <= their own absolute position
            scores = np.einsum("qhd,thd->hqt", q, self.keys[i]) / np.sqrt(hd)
            if prev:
                full_keep = np.concatenate(
                    [np.ones((T, prev), dtype=self.model.dtype), keep], axis=1
                )
            else:
                full_keep = keep
            scores = scores * full_keep + neg * (1.0 - full_keep)
            scores = scores - scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            ctx = np.einsum("hqt,thd->qhd", w, self.values[i]).reshape(T, -1)
            x = x + ctx @ p[pre + "wo"] + p[pre + "bo"]
            h2 = _ln_rows(x, p[pre + "ln2_g"], p[pre + "ln2_b"], eps)
            x = x + np.tanh(h2 @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
        x_last = _ln_rows(x[-1:], p["ln_f_g"], p["ln_f_b"], eps)[0]
        self.pos += T
        self.last_logits = x_last @ p["head_w"] + p["head_b"]
        return self.last_logits

    def append(self, token: int) -> np.ndarray:
        """Consume one token; return next-token logits (V,)."""
        cfg = self.model.config
        if self.pos >= cfg.max_context:
            raise ValueError(f"context overflow at position {self.pos}")
        p = {k: t.data for k, t in self.model.params.items()}
        eps = cfg.layer_norm_eps
        nh, hd = cfg.n_heads, cfg.head_dim
        x = p["tok_emb"][token] + p["pos_emb"][self.pos]
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            h = _ln_np(x, p[pre + "ln1_g"], p[pre + "ln1_b"], eps)
            q = (h @ p[pre + "wq"] + p[pre + "bq"]).reshape(nh, hd)
            k = (h @ p[pre + "wk"] + p[pre + "bk"]).reshape(nh, hd)
            v = (h @ p[pre + "wv"] + p[pre + "bv"]).reshape(nh, hd)
            self.keys[i] = np.concatenate([self.keys[i], k[None]], axis=0)
            self.values[i] = np.concatenate([self.values[i], v[None]], axis=0)
            scores = np.einsum("hd,thd->ht", q, self.keys[i]) / np.sqrt(hd)
            scores = scores - scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            ctx = np.einsum("ht,thd->hd", w, self.values[i]).reshape(-1)
            x = x + ctx @ p[pre + "wo"] + p[pre + "bo"]
            h2 = _ln_np(x, p[pre + "ln2_g"], p[pre + "ln2_b"], eps)
            x = x + np.tanh(h2 @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
        x = _ln_np(x, p["ln_f_g"], p["ln_f_b"], eps)
        self.pos += 1
        self.last_logits = x @ p["head_w"] + p["head_b"]
        return self.last_logits


def _ln_np(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean()
    xc = x - mu
    return g * xc / np.sqrt((xc * xc).mean() + eps) + b


def _ln_rows(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return g * xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) + b


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits.astype(np.float64) - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def sample_response(
    model: TransformerPolicy, state_ids: np.ndarray, z: int, temperature: float = 1.0
) -> GeneratedResponse:
    """Ancestral sampling driven entirely by the stream seeded with z.

    Stops at EOS or the response-length cap. Per-token log-probs are
    recorded under the unscaled (temperature-1) distribution. A
    temperature of exactly 0 means greedy argmax with ties broken by the
    lowest token id.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    stream = np.random.Generator(np.random.PCG64(z))
    cache = model.start_cache(state_ids)
    tokens: list[int] = []
    logps: list[float] = []
    for _ in range(model.config.max_response):
        logits = cache.last_logits
        lp = _log_softmax_np(logits)
        if temperature == 0.0:
            tok = int(np.argmax(logits))
        else:
            scaled = _log_softmax_np(logits / temperature)
            cdf = np.cumsum(np.exp(scaled))
            tok = int(np.searchsorted(cdf, stream.random(), side="right"))
            tok = min(tok, len(cdf) - 1)
        tokens.append(tok)
        logps.append(float(lp[tok]))
        if tok == EOS:
            break
        cache.append(tok)
    return GeneratedResponse(
        state_ids=np.asarray(state_ids, dtype=np.int64),
        response_ids=np.asarray(tokens, dtype=np.int64),
        log_probs=np.asarray(logps, dtype=np.float64),
        z=int(z),
        temperature=float(temperature),
    )


# ----------------------------------------------------------------------------
# teacher-forced scoring
# ----------------------------------------------------------------------------

def pack_batch(
    pairs: list[tuple[np.ndarray, np.ndarray]], vocab_size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-padded (inputs, labels, mask) arrays for a batch of (state, response).

    inputs[b, t] feeds the model; labels[b, t] is the token its logits
    should predict; mask selects the response positions.
    """
    full = []
    for state, resp in pairs:
        state = np.asarray(state, dtype=np.int64)
        resp = np.asarray(resp, dtype=np.int64)
        if resp.size == 0:
            raise ValueError("empty response in batch")
        if resp.min() < 0 or resp.max() >= vocab_size:
            raise ValueError("response token id out of vocabulary range")
        full.append((np.concatenate([state, resp]), len(state)))
    T = max(len(seq) for seq, _ in full) - 1
    B = len(full)
    inputs = np.zeros((B, T), dtype=np.int64)
    labels = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.float64)
    for b, (seq, n_state) in enumerate(full):
        L = len(seq) - 1
        inputs[b, :L] = seq[:-1]
        labels[b, :L] = seq[1:]
        mask[b, n_state - 1 : L] = 1.0
    return inputs, labels, mask


def batch_scores(
    model: TransformerPolicy,
    pairs: list[tuple[np.ndarray, np.ndarray]],
    train_rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Per-sequence total log-prob (B,), mean per-token entropy, and the mask.

    Both outputs are graph tensors differentiable w.r.t. the policy.
    """
    inputs, labels, mask = pack_batch(pairs, model.config.vocab_size)
    maskc = mask.astype(np.dtype(model.dtype))
    logits = model.forward(inputs, train_rng=train_rng)
    lsm = ad.log_softmax(logits, axis=-1)
    per_tok = ad.mul(ad.gather_last(lsm, labels), Tensor(maskc))
    totals = ad.tsum(per_tok, axis=1)
    probs = ad.exp(lsm)
    ent = ad.mul(ad.tsum(ad.mul(probs, lsm), axis=-1), -1.0)
    mean_entropy = ad.mul(ad.tsum(ad.mul(ent, Tensor(maskc))), 1.0 / max(1.0, float(mask.sum())))
    return totals, mean_entropy, mask


def sequence_log_prob(
    model: TransformerPolicy, state_ids: np.ndarray, response_ids: np.ndarray
) -> tuple[float, np.ndarray]:
    """Total and per-token log-probs of a response under the current params."""
    response_ids = np.asarray(response_ids, dtype=np.int64)
    if response_ids.size == 0:
        raise ValueError("response must be non-empty")
    inputs, labels, mask = pack_batch(
        [(np.asarray(state_ids, dtype=np.int64), response_ids)], model.config.vocab_size
    )
    with ad.no_grad():
        lsm = ad.log_softmax(model.forward(inputs), axis=-1).data
    row = np.take_along_axis(lsm[0], labels[0][:, None], axis=-1)[:, 0]
    per_token = row[mask[0] > 0]
    return float(per_token.sum()), per_token.astype(np.float64)


def batch_sequence_log_probs(
    model: TransformerPolicy, pairs: list[tuple[np.ndarray, np.ndarray]]
) -> np.ndarray:
    """Vector of total response log-probs, no gradients."""
    with ad.no_grad():
        totals, _, _ = batch_scores(model, pairs)
    return totals.data.astype(np.float64)


# ----------------------------------------------------------------------------
# maximum-likelihood pretraining
# ----------------------------------------------------------------------------

@dataclass
class MleResult:
    steps_run: int
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[tuple[int, float]] = field(default_factory=list)
    best_val_loss: float = float("inf")


def mle_pretrain(
    model: TransformerPolicy,
    train_pairs: list[tuple[np.ndarray, np.ndarray]],
    val_pairs: list[tuple[np.ndarray, np.ndarray]],
    steps: int,
    batch_size: int,
    lr: float,
    warmup_steps: int,
    rng: np.random.Generator,
    weight_decay: float = 0.01,
    validation_frequency: int = 10,
    metric_hook=None,
) -> MleResult:
    """Teacher-forced cross-entropy minimization over response tokens.

    Validation cross-entropy is measured every `validation_frequency`
    epochs (an epoch is one pass over the training pairs at batch
    granularity) and the best-validation parameters are restored at the
    end. Zero steps returns the model unchanged.
    """
    result = MleResult(steps_run=0)
    if steps <= 0:
        return result
    if not train_pairs:
        raise ValueError("mle_pretrain: empty training set")
    opt = AdamW(model.params, lr=lr, weight_decay=weight_decay)
    schedule = WarmupLinearSchedule(lr, min(warmup_steps, max(0, steps - 1)), steps)
    steps_per_epoch = max(1, (len(train_pairs) + batch_size - 1) // batch_size)
    val_every = max(1, validation_frequency) * steps_per_epoch
    best_params = None
    order = rng.permutation(len(train_pairs))
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(train_pairs))
            cursor = 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        batch = [train_pairs[i] for i in idx]
        inputs, labels, mask = pack_batch(batch, model.config.vocab_size)
        train_rng = rng if model.config.dropout > 0 else None
        loss = ad.cross_entropy(model.forward(inputs, train_rng=train_rng), labels, mask)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"MLE loss diverged to {value} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step(lr=schedule.lr_at(opt.state.step))
        result.train_losses.append(value)
        result.steps_run = step + 1
        if val_pairs and ((step + 1) % val_every == 0 or step + 1 == steps):
            val = evaluate_cross_entropy(model, val_pairs)
            result.val_losses.append((step + 1, val))
            if metric_hook:
                metric_hook(step + 1, value, val)
            if val < result.best_val_loss:
                result.best_val_loss = val
                best_params = model.clone_param_arrays()
    if best_params is not None:
        model.load_param_arrays(best_params)
    return result


def evaluate_cross_entropy(
    model: TransformerPolicy, pairs: list[tuple[np.ndarray, np.ndarray]], batch_size: int = 32
) -> float:
    """Mean nats/token of reference responses under the model."""
    total, count = 0.0, 0.0
    with ad.no_grad():
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo : lo + batch_size]
            inputs, labels, mask = pack_batch(chunk, model.config.vocab_size)
            lsm = ad.log_softmax(model.forward(inputs), axis=-1).data
            lp = np.take_along_axis(lsm, labels[..., None], axis=-1)[..., 0]
            total += float(-(lp * mask).sum())
            count += float(mask.sum())
    return total / max(count, 1.0)

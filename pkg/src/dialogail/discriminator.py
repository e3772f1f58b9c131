"""Binary classifier over (state, response) pairs and the generator's reward.

D(s, a) is the probability that a pair was *generated* (not expert).
The training objective value is

    mean_generated[log D] + mean_expert[log(1 - D)]

which is ascended; the generator's reward for a pair is -log D, so
expert-looking pairs earn high reward. The convex regularizer g that
this objective realizes is exposed for verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import TrainingError
from .optim import AdamW

D_CLAMP = 1e-6
REWARD_MIN = -np.log1p(-D_CLAMP)  # -log(1 - 1e-6)
REWARD_MAX = -np.log(D_CLAMP)


@dataclass(frozen=True)
class DiscConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 100
    max_state_len: int = 104
    max_response_len: int = 24

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim) < 1:
            raise ValueError("discriminator dimensions must be positive")

    @property
    def feature_dim(self) -> int:
        return 2 * self.embed_dim + 2


class Discriminator:
    """Mean-pooled pair embedding -> two tanh hidden layers of 100 -> sigmoid.

    The embedding table is independent of the policy's (no weight sharing).
    """

    def __init__(self, config: DiscConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        d, h, V = config.embed_dim, config.hidden_dim, config.vocab_size
        f = config.feature_dim
        self.params: dict[str, Tensor] = {
            "emb": ad.init_uniform(rng, (V, d), V, dtype),
            "w1": ad.init_uniform(rng, (f, h), f, dtype),
            "b1": ad.zeros((h,), dtype),
            "w2": ad.init_uniform(rng, (h, h), h, dtype),
            "b2": ad.zeros((h,), dtype),
            "w3": ad.init_uniform(rng, (h, 1), h, dtype),
            "b3": ad.zeros((1,), dtype),
        }

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = arrays[k]
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter '{k}' shape mismatch: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype)

    def _pair_features(self, pairs: list[tuple[np.ndarray, np.ndarray]]) -> Tensor:
        """(B, 2d+2): mean-pooled state and response embeddings plus scaled lengths."""
        cfg = self.config
        B = len(pairs)
        max_s = max(len(s) for s, _ in pairs)
        max_r = max(len(r) for _, r in pairs)
        s_ids = np.zeros((B, max_s), dtype=np.int64)
        r_ids = np.zeros((B, max_r), dtype=np.int64)
        s_mask = np.zeros((B, max_s, 1), dtype=self.dtype)
        r_mask = np.zeros((B, max_r, 1), dtype=self.dtype)
        lens = np.zeros((B, 2), dtype=self.dtype)
        for b, (s, r) in enumerate(pairs):
            s = np.asarray(s, dtype=np.int64)
            r = np.asarray(r, dtype=np.int64)
            if len(s) == 0 or len(r) == 0:
                raise ValueError("state and response must be non-empty")
            if max(s.max(), r.max()) >= cfg.vocab_size or min(s.min(), r.min()) < 0:
                raise ValueError("token id out of vocabulary range")
            s_ids[b, : len(s)] = s
            r_ids[b, : len(r)] = r
            s_mask[b, : len(s), 0] = 1.0 / len(s)
            r_mask[b, : len(r), 0] = 1.0 / len(r)
            lens[b, 0] = len(s) / cfg.max_state_len
            lens[b, 1] = len(r) / cfg.max_response_len
        emb = self.params["emb"]
        s_pool = ad.tsum(ad.mul(ad.embedding(emb, s_ids), Tensor(s_mask)), axis=1)
        r_pool = ad.tsum(ad.mul(ad.embedding(emb, r_ids), Tensor(r_mask)), axis=1)
        return ad.concat([s_pool, r_pool, Tensor(lens)], axis=1)

    def score_batch(self, pairs: list[tuple[np.ndarray, np.ndarray]]) -> Tensor:
        """Clamped D values in [1e-6, 1-1e-6], shape (B,); differentiable."""
        p = self.params
        x = self._pair_features(pairs)
        x = ad.tanh(ad.affine(x, p["w1"], p["b1"]))
        x = ad.tanh(ad.affine(x, p["w2"], p["b2"]))
        out = ad.sigmoid(ad.affine(x, p["w3"], p["b3"]))
        return ad.clip(ad.reshape(out, (len(pairs),)), D_CLAMP, 1.0 - D_CLAMP)

    def score(self, state_ids: np.ndarray, response_ids: np.ndarray) -> float:
        with ad.no_grad():
            return float(self.score_batch([(state_ids, response_ids)]).data[0])


def disc_loss(
    disc: Discriminator,
    generated: list[tuple[np.ndarray, np.ndarray]],
    expert: list[tuple[np.ndarray, np.ndarray]],
) -> Tensor:
    """The classification objective value (always <= 0); ascend this."""
    if not generated or not expert:
        raise ValueError("disc_loss requires non-empty generated and expert batches")
    d_gen = disc.score_batch(generated)
    d_exp = disc.score_batch(expert)
    one_minus = ad.add(ad.mul(d_exp, -1.0), 1.0)
    return ad.add(ad.tmean(ad.log(d_gen)), ad.tmean(ad.log(one_minus)))


def reward_signal(disc: Discriminator, state_ids: np.ndarray, response_ids: np.ndarray) -> float:
    """Generator reward -log D: high when the pair looks expert-like."""
    return float(-np.log(disc.score(state_ids, response_ids)))


def reward_batch(disc: Discriminator, pairs: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    with ad.no_grad():
        d = disc.score_batch(pairs).data.astype(np.float64)
    return -np.log(d)


def disc_update(
    disc: Discriminator,
    opt: AdamW,
    generated: list[tuple[np.ndarray, np.ndarray]],
    expert: list[tuple[np.ndarray, np.ndarray]],
) -> float:
    """One ascent step on the objective; returns its pre-update value."""
    objective = disc_loss(disc, generated, expert)
    value = objective.item()
    if not np.isfinite(value):
        raise TrainingError(f"discriminator objective is non-finite: {value}")
    loss = ad.mul(objective, -1.0)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return value


def g_regularizer(x):
    """Convex cost regularizer: -x - log(1 - e^x) for x < 0, +inf otherwise.

    Accepts scalars or arrays; the x >= 0 branch returns the +inf sentinel.
    Its minimum is 2*ln 2, attained at x = -ln 2.
    """
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.full_like(arr, np.inf)
    neg = arr < 0
    with np.errstate(divide="ignore"):
        out[neg] = -arr[neg] - np.log(-np.expm1(arr[neg]))
    if np.ndim(x) == 0:
        return float(out[0])
    return out.reshape(np.shape(x))

"""AdamW with decoupled weight decay, plus the warmup-linear LR schedule.

Both networks are trained with AdamW; the generator's learning rate is
modulated per optimizer step by ``WarmupLinearSchedule``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """Serializable optimizer state: step count plus per-parameter moments."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Update per step (all elementwise), with bias-corrected moments:
        m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
        p <- p - lr*(m_hat / (sqrt(v_hat) + eps) + wd*p)
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState(
            step=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        """One update; missing gradients are treated as zero."""
        b1, b2 = self.betas
        rate = self.lr if lr is None else lr
        self.state.step += 1
        t = self.state.step
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
            m = self.state.m[name]
            v = self.state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - rate * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment tensors under stable names, for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for k in self.params:
            out[f"m.{k}"] = self.state.m[k]
            out[f"v.{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, step: int, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(step)
        for k, p in self.params.items():
            for kind, store in (("m", self.state.m), ("v", self.state.v)):
                arr = arrays[f"{kind}.{k}"]
                if arr.shape != p.data.shape:
                    raise ValueError(f"checkpointed moment '{kind}.{k}' shape mismatch")
                store[k] = arr.astype(p.data.dtype)


@dataclass(frozen=True)
class WarmupLinearSchedule:
    """Linear ramp 0 -> base over `warmup_steps`, then linear decay to 0 at `total_steps`."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.total_steps < max(1, self.warmup_steps):
            raise ValueError("total_steps must be positive and >= warmup_steps")

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be non-negative")
        if step > self.total_steps:
            log.warning("lr_at: step %d beyond total_steps %d, clamping to 0", step, self.total_steps)
            return 0.0
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        if self.total_steps == self.warmup_steps:
            return self.base_lr if step == self.warmup_steps else 0.0
        return self.base_lr * (self.total_steps - step) / (self.total_steps - self.warmup_steps)

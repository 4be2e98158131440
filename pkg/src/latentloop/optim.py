"""Adam-style optimizer with an atan2 update rule, warmup and EMA shadows.

The default variant replaces Adam's m_hat / (sqrt(v_hat) + eps) step with
atan2(m_hat, sqrt(v_hat)), which is bounded by pi/2 and needs no epsilon;
``variant="adam"`` switches back to the classic rule. Weight decay is
decoupled (applied directly to parameters, scaled by the effective
learning rate). EMA shadows track parameters as ema <- r*ema + (1-r)*p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import F32, Tensor


class NonFiniteGradientError(Exception):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1.0
    warmup_steps: int = 2000
    ema_ratio: float = 0.999
    variant: str = "adam_atan2"  # or "adam"
    eps: float = 1e-8            # used by the plain-adam variant only


class Optimizer:
    """Holds per-parameter moments, the step counter, and EMA shadows."""

    def __init__(self, params: dict[str, Tensor], config: OptimizerConfig | None = None):
        self.config = config or OptimizerConfig()
        if self.config.variant not in ("adam_atan2", "adam"):
            raise ValueError(f"unknown optimizer variant {self.config.variant!r}")
        self.params = params
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.ema = {k: p.data.copy() for k, p in params.items()}

    def effective_lr(self, t: int | None = None) -> float:
        """Linear warmup: (t / warmup_steps) * lr, clamped to lr afterward."""
        cfg = self.config
        t = self.t if t is None else t
        if cfg.warmup_steps > 0 and t < cfg.warmup_steps:
            return cfg.lr * t / cfg.warmup_steps
        return cfg.lr

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        lr_t = F32(self.effective_lr())
        b1, b2 = F32(cfg.beta1), F32(cfg.beta2)
        c1 = F32(1.0 - cfg.beta1 ** self.t)
        c2 = F32(1.0 - cfg.beta2 ** self.t)
        wd = F32(cfg.weight_decay)
        er = F32(cfg.ema_ratio)
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                self.t -= 1
                raise NonFiniteGradientError(f"non-finite gradient for {name!r} "
                                             f"at step {self.t + 1}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            if cfg.variant == "adam_atan2":
                upd = np.arctan2(m_hat, np.sqrt(v_hat))
            else:
                upd = m_hat / (np.sqrt(v_hat) + F32(cfg.eps))
            p.data -= lr_t * upd
            if wd != 0:
                p.data -= lr_t * wd * p.data
            ema = self.ema[name]
            ema *= er
            ema += (1 - er) * p.data

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers keyed for checkpointing."""
        out = {}
        for name in self.params:
            out[f"opt.m/{name}"] = self.m[name]
            out[f"opt.v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = arrays[f"opt.m/{name}"].copy()
            self.v[name] = arrays[f"opt.v/{name}"].copy()

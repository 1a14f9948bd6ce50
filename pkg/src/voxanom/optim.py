"""AdamW with decoupled weight decay and the warmup/decay schedule shared by all trainers."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

__all__ = ["ScheduleConfig", "lr_schedule", "AdamW"]


@dataclass
class ScheduleConfig:
    base_lr: float = 3e-4
    warmup_steps: int = 200
    total_steps: int = 2000


def lr_schedule(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup 0 -> base_lr over warmup_steps, then linear decay to 0 at total_steps."""
    if step > cfg.total_steps:
        warnings.warn(f"lr_schedule: step {step} beyond total_steps {cfg.total_steps}; clamping lr to 0")
        return 0.0
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.base_lr if step < cfg.total_steps else 0.0
    return cfg.base_lr * (cfg.total_steps - step) / span


class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of named parameters.

    Weight decay multiplies the parameter directly by ``1 - lr * wd`` (it never
    enters the moment accumulators). Moments use the standard bias correction.
    Gradient clipping is the caller's job and must happen before ``step``.
    """

    def __init__(self, named_params, lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-6):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise FloatingPointError(f"NaN gradient for parameter {name!r}")
            dt = p.data.dtype.type
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(self.eps))
            if self.weight_decay:
                p.data *= dt(1.0 - lr * self.weight_decay)
            p.data -= dt(lr) * update

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {name: m.copy() for (name, _), m in zip(self.params, self.m)},
            "v": {name: v.copy() for (name, _), v in zip(self.params, self.v)},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for i, (name, p) in enumerate(self.params):
            self.m[i] = np.asarray(state["m"][name], dtype=p.data.dtype).copy()
            self.v[i] = np.asarray(state["v"][name], dtype=p.data.dtype).copy()

"""AdamW, global-norm gradient clipping, and the training schedules.

Learning rate: linear warmup from ``start_lr`` to ``ref_lr`` followed by a
cosine decay to ``final_lr``. Weight decay: cosine ramp across the full run.
EMA momentum: linear ramp. All three clamp beyond the final step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingError
from .tensor import Tensor


@dataclass
class ScheduleConfig:
    total_epochs: int
    steps_per_epoch: int
    warmup_epochs: float = 40.0
    start_lr: float = 2.0e-4
    ref_lr: float = 6.25e-4
    final_lr: float = 1.0e-6
    wd_range: tuple[float, float] = (0.04, 0.4)
    momentum_range: tuple[float, float] = (0.998, 1.0)
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.start_lr > self.ref_lr or self.final_lr > self.ref_lr:
            raise ConfigError("start_lr and final_lr must not exceed ref_lr")
        if self.wd_range[0] > self.wd_range[1]:
            raise ConfigError("wd_range must be ordered")
        if self.momentum_range[0] > self.momentum_range[1]:
            raise ConfigError("momentum_range must be ordered")
        if self.total_epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("total_epochs and steps_per_epoch must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return min(int(round(self.warmup_epochs * self.steps_per_epoch)),
                   self.total_steps)


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    s = min(max(step, 0), cfg.total_steps)
    ws = cfg.warmup_steps
    if s < ws:
        return cfg.start_lr + (cfg.ref_lr - cfg.start_lr) * (s / ws)
    span = max(cfg.total_steps - ws, 1)
    progress = min((s - ws) / span, 1.0)
    return cfg.final_lr + (cfg.ref_lr - cfg.final_lr) * 0.5 * (
        1.0 + math.cos(math.pi * progress))


def wd_at(step: int, cfg: ScheduleConfig) -> float:
    s = min(max(step, 0), cfg.total_steps)
    lo, hi = cfg.wd_range
    progress = s / cfg.total_steps
    return hi + (lo - hi) * 0.5 * (1.0 + math.cos(math.pi * progress))


def momentum_at(step: int, cfg: ScheduleConfig) -> float:
    s = min(max(step, 0), cfg.total_steps)
    lo, hi = cfg.momentum_range
    return lo + (hi - lo) * (s / cfg.total_steps)


def global_grad_norm(grads) -> float:
    acc = 0.0
    for g in grads:
        acc += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(acc)


def clip_grad_norm(grads, max_norm: float = 10.0) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm.

    Returns the applied scale (1.0 when no clipping was needed, including
    for all-zero gradients).
    """
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= g.dtype.type(scale)
    return scale


class AdamW:
    """Decoupled weight decay: the shrink is a separate multiplicative step,
    so zero gradients leave exactly ``p * (1 - lr*wd)``.

    Weight decay skips 1-D parameters (biases, norm gains, the mask token)
    unless ``decay_1d`` is set.
    """

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8,
                 decay_1d: bool = False):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.betas = betas
        self.eps = eps
        self.decay_1d = decay_1d
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}

    def step(self, lr: float, wd: float = 0.0) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in {name}")
            if wd != 0.0 and (p.data.ndim > 1 or self.decay_1d):
                p.data *= p.data.dtype.type(1.0 - lr * wd)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def grads(self):
        return [p.grad for _, p in self.params if p.grad is not None]

    def state_arrays(self):
        """Moment buffers under stable names, for checkpointing."""
        for n, _ in self.params:
            yield f"opt.m.{n}", self.m[n]
        for n, _ in self.params:
            yield f"opt.v.{n}", self.v[n]

    def load_state(self, step_count: int, arrays: dict) -> None:
        self.step_count = step_count
        for n, _ in self.params:
            self.m[n][...] = arrays[f"opt.m.{n}"].reshape(self.m[n].shape)
            self.v[n][...] = arrays[f"opt.v.{n}"].reshape(self.v[n].shape)

"""Pretraining loop.

Per optimizer step: draw a batch of recordings, build one augmented clip
each, run the masked-prediction forward, average the losses, backprop, clip
the global gradient norm, apply AdamW at the scheduled learning rate and
weight decay, then move the target encoder by the scheduled EMA momentum.
Deterministic for a fixed seed when the BLAS thread count is fixed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import optim
from . import tensor as T
from .errors import TrainingError
from .jepa import JepaModel, ema_update
from .signal import ClipDataset

LOG_FIELDS = ("step", "lr", "wd", "momentum", "loss", "collapse", "grad_norm")


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 4
    grad_accum: int = 1
    seed: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)
    steps: int = 0
    final_checkpoint: str | None = None

    @property
    def collapse_min(self) -> float:
        return min((r["collapse"] for r in self.log_rows), default=float("nan"))


def collapse_metric(target_batch: np.ndarray) -> float:
    """Mean over embedding dims of the per-dim std; near zero means the
    targets have collapsed to a constant."""
    x = np.asarray(target_batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        return 0.0
    return float(x.std(axis=0).mean())


class _CsvLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def append(self, row: dict):
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in LOG_FIELDS])


def make_schedule(n_recordings: int, cfg: TrainConfig,
                  **schedule_overrides) -> optim.ScheduleConfig:
    steps = max(1, math.ceil(n_recordings / cfg.batch_size) // cfg.grad_accum)
    defaults = dict(total_epochs=cfg.epochs, steps_per_epoch=steps)
    defaults.update(schedule_overrides)
    return optim.ScheduleConfig(**defaults)


def pretrain(model: JepaModel, dataset: ClipDataset,
             schedule: optim.ScheduleConfig, cfg: TrainConfig) -> TrainReport:
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = optim.AdamW(list(model.trainable_tensors()))
    log = _CsvLog(cfg.log_path)
    report = TrainReport()
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_ckpt = None
    step = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        opt.zero_grad()
        accum = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            losses = []
            targets = []
            for i in batch:
                clip_index = (int(rng.integers(dataset.num_clips))
                              if dataset.num_clips > 1 else 0)
                clip = dataset.clip(int(i), clip_index, rng)
                loss_i, stats = model.forward_loss(clip.data, rng)
                losses.append(loss_i)
                targets.append(stats["targets"])
            batch_loss = losses[0]
            for extra in losses[1:]:
                batch_loss = batch_loss + extra
            batch_loss = batch_loss * (1.0 / len(losses))
            loss_value = batch_loss.item()
            if not math.isfinite(loss_value):
                raise TrainingError(
                    f"non-finite loss at step {step}; last good checkpoint: "
                    f"{last_ckpt or 'none'}")
            epoch_losses.append(loss_value)
            (batch_loss * (1.0 / cfg.grad_accum)).backward()
            accum += 1
            if accum < cfg.grad_accum:
                continue
            accum = 0

            grads = opt.grads()
            optim.clip_grad_norm(grads, schedule.clip_norm)
            grad_norm = optim.global_grad_norm(grads)
            lr = optim.lr_at(step, schedule)
            wd = optim.wd_at(step, schedule)
            m = optim.momentum_at(step, schedule)
            opt.step(lr, wd)
            opt.zero_grad()
            ema_update(model, m)

            row = {"step": step, "lr": lr, "wd": wd, "momentum": m,
                   "loss": loss_value,
                   "collapse": collapse_metric(np.concatenate(targets)),
                   "grad_norm": grad_norm}
            report.log_rows.append(row)
            log.append(row)
            step += 1

        report.epoch_losses.append(float(np.mean(epoch_losses)))
        if ckpt_dir:
            last_ckpt = ckpt_dir / f"epoch_{epoch + 1:04d}.ejck"
            ckpt.save_checkpoint(last_ckpt, model, opt, step=step,
                                 epoch=epoch + 1, rng=rng)

    report.steps = step
    if ckpt_dir:
        final = ckpt_dir / "final.ejck"
        ckpt.save_checkpoint(final, model, opt, step=step, epoch=cfg.epochs,
                             rng=rng)
        report.final_checkpoint = str(final)
    return report
